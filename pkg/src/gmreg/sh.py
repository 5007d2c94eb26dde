"""Real Schmidt semi-normalized spherical harmonics and their rotation matrices.

Band ``l`` is stored as ``2l + 1`` consecutive coefficients ordered by
``m = -l .. l``; the cosine terms carry ``m > 0`` and the sine terms ``m < 0``.
With this normalization ``sum_m Y_lm(u)**2 == 1`` for every unit vector ``u``.
"""

from __future__ import annotations

import warnings
from math import factorial, sqrt

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import UnsupportedDegree

MAX_WIGNER_DEGREE = 4


def band_slice(l: int) -> slice:
    return slice(l * l, (l + 1) * (l + 1))


def n_coeffs(L: int) -> int:
    return (L + 1) ** 2


def _assoc_legendre(L: int, x: np.ndarray) -> dict:
    """P_l^m(x) for 0 <= m <= l <= L, without the Condon-Shortley phase."""
    s = np.sqrt(np.clip(1.0 - x * x, 0.0, None))
    P = {(0, 0): np.ones_like(x)}
    for m in range(1, L + 1):
        P[m, m] = (2 * m - 1) * s * P[m - 1, m - 1]
    for m in range(0, L):
        P[m + 1, m] = (2 * m + 1) * x * P[m, m]
    for m in range(0, L + 1):
        for l in range(m + 2, L + 1):
            P[l, m] = ((2 * l - 1) * x * P[l - 1, m] - (l + m - 1) * P[l - 2, m]) / (l - m)
    return P


def real_sh(L: int, directions: np.ndarray) -> np.ndarray:
    """Evaluate all bands up to ``L`` at the given directions.

    ``directions`` need not be normalized; zero vectors evaluate as the pole.
    Returns an array of shape ``directions.shape[:-1] + ((L + 1)**2,)``.
    """
    d = np.asarray(directions, dtype=float)
    shape = d.shape[:-1]
    d = d.reshape(-1, 3)
    r = np.linalg.norm(d, axis=1)
    safe = np.where(r > 0, r, 1.0)
    z = np.where(r > 0, d[:, 2] / safe, 1.0)
    phi = np.arctan2(d[:, 1], d[:, 0])
    P = _assoc_legendre(L, np.clip(z, -1.0, 1.0))
    out = np.empty((len(d), n_coeffs(L)))
    for l in range(L + 1):
        base = l * l + l
        out[:, base] = P[l, 0]
        for m in range(1, l + 1):
            norm = sqrt(2.0 * factorial(l - m) / factorial(l + m))
            out[:, base + m] = norm * P[l, m] * np.cos(m * phi)
            out[:, base - m] = norm * P[l, m] * np.sin(m * phi)
    return out.reshape(shape + (n_coeffs(L),))


def _wigner_small_d(l: int, beta: float) -> np.ndarray:
    c, s = np.cos(beta / 2.0), np.sin(beta / 2.0)
    d = np.zeros((2 * l + 1, 2 * l + 1))
    for i, mp in enumerate(range(-l, l + 1)):
        for j, m in enumerate(range(-l, l + 1)):
            pref = sqrt(factorial(l + mp) * factorial(l - mp) * factorial(l + m) * factorial(l - m))
            acc = 0.0
            for k in range(max(0, m - mp), min(l + m, l - mp) + 1):
                den = factorial(l + m - k) * factorial(k) * factorial(mp - m + k) * factorial(l - mp - k)
                acc += (-1) ** (mp - m + k) * c ** (2 * l + m - mp - 2 * k) * s ** (mp - m + 2 * k) / den
            d[i, j] = pref * acc
    return d


def _complex_to_real(l: int) -> np.ndarray:
    """Unitary map taking complex (Condon-Shortley) SH of band l to the real basis."""
    U = np.zeros((2 * l + 1, 2 * l + 1), dtype=complex)
    r2 = 1.0 / sqrt(2.0)
    U[l, l] = 1.0
    for m in range(1, l + 1):
        U[l + m, l + m] = (-1) ** m * r2
        U[l + m, l - m] = r2
        U[l - m, l - m] = 1j * r2
        U[l - m, l + m] = -1j * (-1) ** m * r2
    return U


def wigner_d_real(l: int, R: np.ndarray) -> np.ndarray:
    """Orthogonal matrix ``D`` with ``real_sh(R @ u)[band l] == D @ real_sh(u)[band l]``."""
    if l > MAX_WIGNER_DEGREE:
        raise UnsupportedDegree(f"degree {l} > {MAX_WIGNER_DEGREE}")
    if l == 0:
        return np.ones((1, 1))
    with warnings.catch_warnings():
        # at beta = 0 or pi only alpha + gamma is determined; any split is fine
        warnings.simplefilter("ignore", UserWarning)
        alpha, beta, gamma = Rotation.from_matrix(R).as_euler("ZYZ")
    ms = np.arange(-l, l + 1)
    Dc = np.exp(-1j * ms[:, None] * alpha) * _wigner_small_d(l, beta) * np.exp(-1j * ms[None, :] * gamma)
    U = _complex_to_real(l)
    D = U @ Dc.conj() @ U.conj().T
    return D.real


def rotate_sh_band(coeffs_l: np.ndarray, R: np.ndarray, l: int) -> np.ndarray:
    """Apply the degree-``l`` rotation operator to coefficient vector(s) (last axis)."""
    coeffs_l = np.asarray(coeffs_l, dtype=float)
    if coeffs_l.shape[-1] != 2 * l + 1:
        raise ValueError(f"band {l} needs {2 * l + 1} coefficients")
    return coeffs_l @ wigner_d_real(l, R).T
