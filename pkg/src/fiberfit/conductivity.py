"""Conductivity tensors from log-scale parameters and tangent frames.

The learned field is a vector d = (d1, d2, d3) per point, the entries
of a symmetric 2x2 matrix D2 = [[d1, d2], [d2, d3]] expressed in the
local tangent frame P (3x2, orthonormal columns). The physical tensor
is D = P expm(D2) P^T: symmetric positive semidefinite with kernel
along the surface normal, so the conduction speed normal to the
surface is zero. Units: positions mm, times ms, D entries mm^2/ms^2.

The matrix exponential of D2 has a closed form. Split D2 = m I + S0
with m = (d1+d3)/2, S0 = [[h, d2], [d2, -h]], h = (d1-d3)/2. S0
squares to r^2 I with r^2 = h^2 + d2^2, hence

    expm(D2) = e^m (cosh(r) I + sinhc(r) S0),  sinhc(r) = sinh(r)/r,

smooth in (d1, d2, d3) including the isotropic point r = 0.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

__all__ = [
    "expm2",
    "assemble_tensor",
    "fiber_direction",
    "speed_along",
    "tensor_fields",
    "fiber_fields",
    "speed_fields",
    "log_tensor_from_speeds",
]

_TIE_TOL = 1e-12
_GRAM_TOL = 1e-8


def _sinhc(r):
    small = r < 1e-4
    safe = np.where(small, 1.0, r)
    s2 = r * r
    return np.where(small, 1.0 + s2 / 6.0 + s2 * s2 / 120.0, np.sinh(safe) / safe)


def expm2(a: float, b: float, c: float) -> np.ndarray:
    """Matrix exponential of [[a, b], [b, c]], closed form."""
    m = 0.5 * (a + c)
    h = 0.5 * (a - c)
    r = np.hypot(h, b)
    em = np.exp(m)
    ch = np.cosh(r)
    sh = _sinhc(r)
    return em * np.array([[ch + sh * h, sh * b], [sh * b, ch - sh * h]])


def _expm2_batch(d: np.ndarray) -> np.ndarray:
    """expm2 applied row-wise to d of shape (N, 3), returning (N, 2, 2)."""
    d = np.asarray(d, dtype=np.float64)
    m = 0.5 * (d[:, 0] + d[:, 2])
    h = 0.5 * (d[:, 0] - d[:, 2])
    r = np.hypot(h, d[:, 1])
    em = np.exp(m)
    ch = np.cosh(r)
    sh = _sinhc(r)
    out = np.empty((d.shape[0], 2, 2))
    out[:, 0, 0] = em * (ch + sh * h)
    out[:, 1, 1] = em * (ch - sh * h)
    out[:, 0, 1] = out[:, 1, 0] = em * sh * d[:, 1]
    return out


def _check_frame(P: np.ndarray) -> np.ndarray:
    P = np.asarray(P, dtype=np.float64)
    if P.shape != (3, 2):
        raise ValueError(f"frame must be 3x2, got {P.shape}")
    gram = P.T @ P
    if np.max(np.abs(gram - np.eye(2))) > _GRAM_TOL:
        raise ValueError("frame columns are not orthonormal")
    return P


def assemble_tensor(d, P, normal_eigenvalue: str = "zero") -> np.ndarray:
    """Conductivity tensor D = P expm2(d) P^T (3x3, mm^2/ms^2).

    With normal_eigenvalue="one" the rank-one term n n^T is added,
    matching a matrix exponential taken in the full embedding space
    (normal speed 1 instead of 0).
    """
    P = _check_frame(P)
    d = np.asarray(d, dtype=np.float64).reshape(3)
    E = expm2(d[0], d[1], d[2])
    D = P @ E @ P.T
    if normal_eigenvalue == "one":
        n = np.cross(P[:, 0], P[:, 1])
        D = D + np.outer(n, n)
    elif normal_eigenvalue != "zero":
        raise ValueError("normal_eigenvalue must be 'zero' or 'one'")
    return D


class FiberDirection(NamedTuple):
    direction: np.ndarray  # unit 3-vector
    isotropic: bool


def fiber_direction(d, P) -> FiberDirection:
    """Axis of fastest conduction: leading eigenvector of D2, mapped by P.

    The sign is fixed so the first component larger than 1e-12 in
    magnitude is positive. When the two eigenvalues of D2 coincide
    within 1e-12 the direction is the gauge's first column and the
    isotropic flag is set.
    """
    P = _check_frame(P)
    d = np.asarray(d, dtype=np.float64).reshape(3)
    h = 0.5 * (d[0] - d[2])
    b = d[1]
    r = np.hypot(h, b)
    if 2.0 * r <= _TIE_TOL:  # eigenvalue gap is 2r
        return FiberDirection(P[:, 0].copy(), True)
    # eigenvector of [[h, b], [b, -h]] for eigenvalue +r; pick the
    # better-conditioned of the two equivalent forms
    if h >= 0.0:
        v = np.array([r + h, b])
    else:
        v = np.array([b, r - h])
    v /= np.linalg.norm(v)
    fiber = P @ v
    for comp in fiber:
        if abs(comp) > _TIE_TOL:
            if comp < 0.0:
                fiber = -fiber
            break
    return FiberDirection(fiber, False)


def speed_along(D, v) -> float:
    """Front speed sqrt(v . D v) / |v| in mm/ms for a nonzero direction."""
    v = np.asarray(v, dtype=np.float64).reshape(3)
    nv = np.linalg.norm(v)
    if nv == 0.0:
        raise ValueError("direction must be nonzero")
    D = np.asarray(D, dtype=np.float64)
    q = float(v @ D @ v)
    return np.sqrt(max(q, 0.0)) / nv


def tensor_fields(d: np.ndarray, P: np.ndarray, normal_eigenvalue: str = "zero") -> np.ndarray:
    """Batched assemble_tensor: d (N, 3), P (N, 3, 2) -> D (N, 3, 3)."""
    d = np.asarray(d, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    E = _expm2_batch(d)
    D = np.einsum("nij,njk,nlk->nil", P, E, P)
    if normal_eigenvalue == "one":
        n = np.cross(P[:, :, 0], P[:, :, 1])
        D = D + n[:, :, None] * n[:, None, :]
    elif normal_eigenvalue != "zero":
        raise ValueError("normal_eigenvalue must be 'zero' or 'one'")
    return D


def fiber_fields(d: np.ndarray, P: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched fiber_direction: returns (N, 3) directions, (N,) isotropy flags."""
    d = np.asarray(d, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    n = d.shape[0]
    h = 0.5 * (d[:, 0] - d[:, 2])
    b = d[:, 1]
    r = np.hypot(h, b)
    iso = 2.0 * r <= _TIE_TOL
    v = np.empty((n, 2))
    pos = h >= 0.0
    v[:, 0] = np.where(pos, r + h, b)
    v[:, 1] = np.where(pos, b, r - h)
    v[iso] = (1.0, 0.0)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    fibers = np.einsum("nij,nj->ni", P, v)
    # deterministic sign: first component above the tolerance is positive
    big = np.abs(fibers) > _TIE_TOL
    first = np.argmax(big, axis=1)
    signs = np.sign(fibers[np.arange(n), first])
    fibers *= np.where(signs == 0.0, 1.0, signs)[:, None]
    return fibers, iso


def speed_fields(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Longitudinal and transverse front speeds (mm/ms) from d, batched.

    The 2x2 tensor exp([[d1, d2], [d2, d3]]) has eigenvalues e^(m +- r)
    with m = (d1 + d3)/2 and r = hypot((d1 - d3)/2, d2); speeds are the
    square roots of those eigenvalues.
    """
    d = np.asarray(d, dtype=np.float64)
    m = 0.5 * (d[..., 0] + d[..., 2])
    r = np.hypot(0.5 * (d[..., 0] - d[..., 2]), d[..., 1])
    return np.exp(0.5 * (m + r)), np.exp(0.5 * (m - r))


def log_tensor_from_speeds(angle_rad, v_long, v_trans) -> np.ndarray:
    """Ground-truth d for a fiber at the given gauge angle with given speeds.

    D2 must equal R(angle) diag(v_long^2, v_trans^2) R(angle)^T, so d is
    the matrix logarithm: R(angle) diag(2 ln v_long, 2 ln v_trans)
    R(angle)^T, returned as entries (d1, d2, d3). Angles and speeds may be
    scalars or broadcastable arrays; speeds in mm/ms.
    """
    v_long = np.asarray(v_long, dtype=np.float64)
    v_trans = np.asarray(v_trans, dtype=np.float64)
    if np.any(v_long <= 0.0) or np.any(v_trans <= 0.0):
        raise ValueError("speeds must be positive")
    angle = np.asarray(angle_rad, dtype=np.float64)
    la, lt = 2.0 * np.log(v_long), 2.0 * np.log(v_trans)
    c, s = np.cos(angle), np.sin(angle)
    d1 = la * c * c + lt * s * s
    d3 = la * s * s + lt * c * c
    d2 = (la - lt) * c * s
    return np.stack(np.broadcast_arrays(d1, d2, d3), axis=-1)
