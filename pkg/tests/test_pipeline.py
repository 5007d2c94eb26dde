from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from gmreg.cloud_io import PointCloud, mean_spacing
from gmreg.errors import ConfigError, TooFewKeypoints
from gmreg.evalkit import NoiseSpec, add_noise, generate_scene
from gmreg.matching import is_partial_permutation
from gmreg.pipeline import PipelineConfig, dump_config, parse_config, register
from gmreg.transform import SimilarityTransform, registration_errors


@pytest.fixture(scope="module")
def room():
    return generate_scene("cube-room", 2000, seed=3)


def test_self_registration(room):
    res = register(room.source, room.source)
    err = registration_errors(res.transform, SimilarityTransform.identity())
    assert res.converged and res.iterations >= 1
    assert err.rotation_error < 1e-6 and err.translation_error < 1e-6
    assert is_partial_permutation(res.correspondence.values)


def test_noisy_rigid_motion(room):
    # noise sigma is 1% of the mean point spacing, on both clouds
    spacing = mean_spacing(room.source.points)
    src = add_noise(room.source, NoiseSpec(1.0, 0.01 * spacing, 11))
    tgt = add_noise(room.target, NoiseSpec(1.0, 0.01 * spacing, 12))
    res = register(src, tgt)
    err = registration_errors(res.transform, room.ground_truth)
    assert err.rotation_error < 1.0
    assert err.translation_error < 0.05 * spacing
    trace = res.objective_trace
    assert all(b <= a + 1e-9 for a, b in zip(trace, trace[1:]))
    assert res.iterations <= PipelineConfig().outer_max_iters


def test_partial_overlap():
    sc = generate_scene("cube-room", 2000, overlap=0.4, seed=5)
    res = register(sc.source, sc.target)
    err = registration_errors(res.transform, sc.ground_truth)
    assert err.rotation_error < 2.0
    assert err.translation_error < 0.1 * mean_spacing(sc.source.points)
    C = res.correspondence.values
    assert is_partial_permutation(C)
    # source keypoints outside the cropped region stay unmatched
    assert C.sum() < min(C.shape)


def test_deterministic(room):
    a = register(room.source, room.target)
    b = register(room.source, room.target)
    np.testing.assert_array_equal(a.transform.matrix(), b.transform.matrix())
    np.testing.assert_array_equal(a.correspondence.values, b.correspondence.values)
    assert a.objective_trace == b.objective_trace and a.iterations == b.iterations


def test_rotation_equivariance(room):
    Q = Rotation.random(random_state=9).as_matrix()
    base = register(room.source, room.target)
    rot = register(PointCloud(room.source.points @ Q.T), PointCloud(room.target.points @ Q.T))
    Qt = SimilarityTransform(1.0, Q)
    expect = Qt.compose(base.transform).compose(Qt.inverse())
    err = registration_errors(rot.transform, expect)
    assert err.rotation_error < 1e-6 and err.translation_error < 1e-6


def test_direction_flag(room):
    fwd = register(room.source, room.target)
    back = register(room.source, room.target, PipelineConfig(direction="target_to_source"))
    err = registration_errors(back.transform, fwd.transform.inverse())
    assert err.rotation_error < 1e-9 and err.translation_error < 1e-9


def test_too_few_keypoints():
    plane = np.random.default_rng(0).random((600, 3)) * [5, 5, 0]
    with pytest.raises(TooFewKeypoints):
        register(PointCloud(plane), PointCloud(plane))


def test_config_round_trip_and_errors():
    cfg = parse_config("# comment\nk_nn = 6\nalpha3=0.25\nsmoothing=1.5\nrigid=false\n\nsalient_radius=0.3\n")
    assert cfg.k_nn == 6 and cfg.gm.alpha3 == 0.25 and cfg.descriptor.smoothing == 1.5
    assert cfg.rigid is False and cfg.iss.salient_radius == 0.3
    again = parse_config(dump_config(cfg))
    assert dump_config(again) == dump_config(cfg)
    with pytest.raises(ConfigError, match="alpah3"):
        parse_config("alpah3=1\n")
    with pytest.raises(ConfigError):
        parse_config("k_nn\n")
    with pytest.raises(ConfigError):
        parse_config("outer_max_iters=0\n")
    with pytest.raises(ConfigError):
        replace(PipelineConfig(), outer_tol=0.0)
