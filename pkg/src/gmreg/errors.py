"""Exception hierarchy shared by all stages.

Every error carries the name of the stage that raised it so the CLI can
report where a run failed.
"""

from __future__ import annotations


class RegistrationError(Exception):
    stage = "gmreg"


# cloud_io
class MalformedFile(RegistrationError):
    stage = "cloud_io"


class EmptyCloud(RegistrationError):
    stage = "cloud_io"


class NonFiniteCoordinate(RegistrationError):
    stage = "cloud_io"


class DegenerateNeighborhood(RegistrationError):
    stage = "cloud_io"


# keypoints
class TooFewPoints(RegistrationError):
    stage = "keypoint_detect"


# descriptor
class EmptyPatch(RegistrationError):
    stage = "ridf_descriptor"


class UnsupportedDegree(RegistrationError):
    stage = "ridf_descriptor"


# graph
class TooFewValidKeypoints(RegistrationError):
    stage = "graph_model"


# matching
class ShapeMismatch(RegistrationError):
    stage = "gm_solver"


class TooLarge(RegistrationError):
    stage = "gm_solver"


# transform
class DegenerateConfiguration(RegistrationError):
    stage = "transform"


class InsufficientMatches(RegistrationError):
    stage = "transform"


# pipeline
class TooFewKeypoints(RegistrationError):
    stage = "pipeline"


class NoValidDescriptors(RegistrationError):
    stage = "pipeline"


class ConfigError(RegistrationError):
    stage = "pipeline"
