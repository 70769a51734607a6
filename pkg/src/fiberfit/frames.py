"""Smooth per-vertex orthonormal tangent frames.

Each vertex carries a right-handed orthonormal triple (t1, t2, n) with
n the vertex normal; P = [t1 t2] is the 3x2 tangent gauge used by the
conductivity parametrization. The field is built by projecting a
global seed direction into every tangent plane and smoothing with
Jacobi sweeps (each vertex replaced by the normalized tangent
projection of its one-ring average, double-buffered), which gives a
deterministic, smoothly varying gauge. The parametrization is
covariant under in-plane rotations, so the particular gauge does not
restrict representable tensors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .mesh import SurfacePoint, TriMesh

__all__ = ["FrameField", "build_frames", "frame_at", "frames_at_vertices"]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FrameField:
    """Per-vertex tangent pair and normal; all unit, mutually orthogonal."""

    t1: np.ndarray  # (V, 3)
    t2: np.ndarray  # (V, 3)
    normal: np.ndarray  # (V, 3)
    smoothing_iters: int

    @property
    def P(self) -> np.ndarray:
        """Stacked 3x2 frames, shape (V, 3, 2)."""
        return np.stack([self.t1, self.t2], axis=-1)


def _project_tangent(vectors: np.ndarray, normals: np.ndarray) -> np.ndarray:
    return vectors - np.einsum("ij,ij->i", vectors, normals)[:, None] * normals


def build_frames(mesh: TriMesh, smoothing_iters: int = 100,
                 seed_vertex: int = 0,
                 seed_direction=(1.0, 0.0, 0.0)) -> FrameField:
    """Construct a FrameField; deterministic given inputs.

    seed_direction must not be parallel to the normal at seed_vertex.
    Vertices where the seed direction projects to (near) zero fall back
    to a coordinate axis and are counted in a log warning.
    """
    if smoothing_iters < 0:
        raise ValueError("smoothing_iters must be nonnegative")
    normals = mesh.vertex_normals()
    nv = mesh.n_vertices
    if not 0 <= seed_vertex < nv:
        raise ValueError(f"seed_vertex {seed_vertex} out of range")
    seed = np.asarray(seed_direction, dtype=np.float64).reshape(3)
    nseed = np.linalg.norm(seed)
    if nseed == 0.0:
        raise ValueError("seed_direction must be nonzero")
    seed = seed / nseed

    t1 = _project_tangent(np.tile(seed, (nv, 1)), normals)
    norms = np.linalg.norm(t1, axis=1)
    if norms[seed_vertex] < 1e-6:
        raise ValueError(
            f"seed_direction is parallel to the normal at vertex {seed_vertex}"
        )
    weak = norms < 1e-6
    if np.any(weak):
        # fall back to the coordinate axis least aligned with the normal
        axes = np.eye(3)
        least = np.argmin(np.abs(normals[weak]), axis=1)
        fallback = _project_tangent(axes[least], normals[weak])
        t1[weak] = fallback
        norms = np.linalg.norm(t1, axis=1)
        log.warning(
            "seed direction degenerate at %d vertex/vertices; using axis fallback",
            int(np.count_nonzero(weak)),
        )
    t1 /= norms[:, None]

    edges = mesh.edges
    for _ in range(smoothing_iters):
        acc = np.zeros_like(t1)
        np.add.at(acc, edges[:, 0], t1[edges[:, 1]])
        np.add.at(acc, edges[:, 1], t1[edges[:, 0]])
        acc = _project_tangent(acc, normals)
        norms = np.linalg.norm(acc, axis=1)
        ok = norms > 1e-12
        new_t1 = np.where(ok[:, None], acc / np.where(ok, norms, 1.0)[:, None], t1)
        t1 = new_t1

    t2 = np.cross(normals, t1)
    t2 /= np.linalg.norm(t2, axis=1, keepdims=True)
    t1 = np.cross(t2, normals)  # exact orthogonality to both
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    return FrameField(t1=t1, t2=t2, normal=normals, smoothing_iters=smoothing_iters)


def frame_at(mesh: TriMesh, frames: FrameField, sp: SurfacePoint) -> np.ndarray:
    """Frame at a surface point by barycentric interpolation, re-orthonormalized.

    Returns the 3x2 matrix [t1 t2]. Raises if the interpolated normal
    (nearly) cancels, which happens only for wildly inconsistent frames.
    """
    tri = mesh.triangles[sp.triangle]
    w = sp.bary
    n = w @ frames.normal[tri]
    nn = np.linalg.norm(n)
    if nn < 1e-6:
        raise ValueError(
            f"interpolated normal degenerates in triangle {sp.triangle}"
        )
    n = n / nn
    t1 = w @ frames.t1[tri]
    t1 = t1 - (t1 @ n) * n
    nt = np.linalg.norm(t1)
    if nt < 1e-12:
        raise ValueError(
            f"interpolated tangent degenerates in triangle {sp.triangle}"
        )
    t1 = t1 / nt
    t2 = np.cross(n, t1)
    return np.column_stack([t1, t2])


def frames_at_vertices(frames: FrameField, indices=None) -> np.ndarray:
    """(N, 3, 2) tangent gauges at the given vertex indices (all by default)."""
    P = frames.P
    return P if indices is None else P[np.asarray(indices)]


def adjacent_frame_angles(mesh: TriMesh, frames: FrameField) -> np.ndarray:
    """Angle in degrees between t1 at edge endpoints, per unique edge.

    The second endpoint's t1 is projected into the first endpoint's
    tangent plane before comparison; used as the smoothness metric.
    """
    e = mesh.edges
    t1a = frames.t1[e[:, 0]]
    na = frames.normal[e[:, 0]]
    t1b = frames.t1[e[:, 1]]
    proj = t1b - np.einsum("ij,ij->i", t1b, na)[:, None] * na
    norms = np.linalg.norm(proj, axis=1)
    ok = norms > 1e-12
    proj[ok] /= norms[ok, None]
    cosang = np.clip(np.einsum("ij,ij->i", t1a, proj), -1.0, 1.0)
    angles = np.degrees(np.arccos(cosang))
    angles[~ok] = 90.0  # orthogonal-to-plane neighbors count as worst case
    return angles
