"""Forward anisotropic eikonal solver on triangle meshes.

Fast-iterative-method fixed point: each vertex of each triangle is
repeatedly updated from its opposite edge by minimizing
lambda*phi(a) + (1-lambda)*phi(b) + metric distance over the edge
parameter, with the edge endpoints as fallback. Updates are monotone
decreasing, so sweeping an active list until no vertex improves by
more than the tolerance converges to the unique fixed point regardless
of sweep order. Anisotropy enters through a per-triangle 2x2 travel
metric M = (projected conductivity)^-1 in the triangle's local basis;
obtuse triangles need no special casing because the constrained 1D
minimization is always well-posed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .conductivity import _expm2_batch
from .frames import FrameField
from .mesh import TriMesh

__all__ = [
    "SeedSet",
    "metric_from_tensor",
    "metrics_from_tensors",
    "triangle_metrics",
    "constant_metrics",
    "solve",
    "analytic_planar",
]

log = logging.getLogger(__name__)

SOLVER_TOL_MS = 1e-9


@dataclass(frozen=True)
class SeedSet:
    """Wavefront initiation sites: vertex indices with start times (ms)."""

    vertices: np.ndarray
    times: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices",
                           np.atleast_1d(np.asarray(self.vertices, dtype=np.int64)))
        object.__setattr__(self, "times",
                           np.atleast_1d(np.asarray(self.times, dtype=np.float64)))
        if self.vertices.size == 0:
            raise ValueError("seed set must be nonempty")
        if self.vertices.shape != self.times.shape:
            raise ValueError("seed vertices and times must align")
        if not np.all(np.isfinite(self.times)):
            raise ValueError("seed times must be finite")

    @classmethod
    def single(cls, vertex: int, time: float = 0.0) -> "SeedSet":
        return cls(np.array([vertex]), np.array([time]))


def _invert_spd2(m: np.ndarray, what: str) -> np.ndarray:
    det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    trace = m[..., 0, 0] + m[..., 1, 1]
    # smaller eigenvalue of a symmetric 2x2 block
    eig_min = 0.5 * (trace - np.sqrt(np.maximum(trace**2 - 4.0 * det, 0.0)))
    bad = eig_min < 1e-10
    if np.any(bad):
        first = int(np.argmax(bad))
        raise ValueError(
            f"near-singular tangential conductivity at {what} {first} "
            f"(eigenvalue {float(np.atleast_1d(eig_min)[first]):.3e})"
        )
    inv = np.empty_like(m)
    inv[..., 0, 0] = m[..., 1, 1]
    inv[..., 1, 1] = m[..., 0, 0]
    inv[..., 0, 1] = -m[..., 0, 1]
    inv[..., 1, 0] = -m[..., 1, 0]
    return inv / det[..., None, None]


def metric_from_tensor(mesh: TriMesh, tri: int, tensor: np.ndarray) -> np.ndarray:
    """Travel metric for one triangle: invert the projected 3x3 tensor."""
    basis = mesh.triangle_basis(tri)
    projected = basis.T @ np.asarray(tensor, dtype=np.float64) @ basis
    try:
        return _invert_spd2(projected[None], "triangle")[0]
    except ValueError:
        raise ValueError(
            f"near-singular tangential conductivity on triangle {tri}"
        ) from None


def metrics_from_tensors(mesh: TriMesh, tensors: np.ndarray) -> np.ndarray:
    """Per-triangle metrics from (T, 3, 3) world conductivity tensors."""
    tensors = np.asarray(tensors, dtype=np.float64)
    bases = mesh.triangle_bases()
    projected = np.einsum("tik,tkl,tlj->tij", bases.transpose(0, 2, 1),
                          tensors, bases)
    return _invert_spd2(projected, "triangle")


def constant_metrics(mesh: TriMesh, tensor: np.ndarray) -> np.ndarray:
    """One world tensor applied to every triangle."""
    tensor = np.asarray(tensor, dtype=np.float64)
    return metrics_from_tensors(
        mesh, np.broadcast_to(tensor, (mesh.n_triangles, 3, 3)))


def triangle_metrics(mesh: TriMesh, frames: FrameField,
                     d: np.ndarray) -> np.ndarray:
    """Metrics from a per-vertex conductivity coefficient field.

    The three corner d vectors are averaged, exponentiated into a 2x2
    tensor in a triangle-level gauge built from the averaged corner
    tangents, and re-expressed in the triangle basis. Valid when the
    frame field varies smoothly, which build_frames guarantees.
    """
    d = np.asarray(d, dtype=np.float64)
    if d.shape != (mesh.n_vertices, 3):
        raise ValueError(f"d must have shape ({mesh.n_vertices}, 3)")
    tris = mesh.triangles
    davg = d[tris].mean(axis=1)
    tensors2 = _expm2_batch(davg)

    normals = mesh.triangle_normals
    t1 = frames.t1[tris].mean(axis=1)
    t1 -= np.einsum("ti,ti->t", t1, normals)[:, None] * normals
    norms = np.linalg.norm(t1, axis=1)
    if np.any(norms < 1e-8):
        tri = int(np.argmax(norms < 1e-8))
        raise ValueError(
            f"frame field is too twisted to average on triangle {tri}"
        )
    t1 /= norms[:, None]
    t2 = np.cross(normals, t1)
    gauge = np.stack([t1, t2], axis=-1)

    world = np.einsum("tik,tkl,tjl->tij", gauge, tensors2, gauge)
    return metrics_from_tensors(mesh, world)


def _update_slots(mesh: TriMesh):
    """Per-(triangle, corner) update data in each triangle's local basis."""
    tris = mesh.triangles
    bases = mesh.triangle_bases()
    slots = []
    for c_pos, a_pos, b_pos in ((2, 0, 1), (0, 1, 2), (1, 2, 0)):
        ia, ib, ic = tris[:, a_pos], tris[:, b_pos], tris[:, c_pos]
        e = np.einsum("tij,ti->tj", bases,
                      mesh.vertices[ia] - mesh.vertices[ib])
        w = np.einsum("tij,ti->tj", bases,
                      mesh.vertices[ic] - mesh.vertices[ib])
        slots.append((ia, ib, ic, e, w, np.arange(mesh.n_triangles)))
    ia = np.concatenate([s[0] for s in slots])
    ib = np.concatenate([s[1] for s in slots])
    ic = np.concatenate([s[2] for s in slots])
    e = np.concatenate([s[3] for s in slots])
    w = np.concatenate([s[4] for s in slots])
    tri_of = np.concatenate([s[5] for s in slots])
    return ia, ib, ic, e, w, tri_of


def solve(mesh: TriMesh, metrics: np.ndarray, seeds: SeedSet,
          tol: float = SOLVER_TOL_MS, max_sweeps: int = 1_000_000) -> np.ndarray:
    """Per-vertex first-arrival times (ms); unreachable vertices get +inf."""
    metrics = np.asarray(metrics, dtype=np.float64)
    if metrics.shape != (mesh.n_triangles, 2, 2):
        raise ValueError(
            f"metrics must have shape ({mesh.n_triangles}, 2, 2), "
            f"got {metrics.shape}"
        )
    nv = mesh.n_vertices
    if np.any(seeds.vertices < 0) or np.any(seeds.vertices >= nv):
        raise ValueError("seed vertex index out of range")

    ia, ib, ic, e, w, tri_of = _update_slots(mesh)
    m = metrics[tri_of]
    me = np.einsum("uij,uj->ui", m, e)
    mw = np.einsum("uij,uj->ui", m, w)
    quad_a = np.einsum("ui,ui->u", e, me)
    quad_b = np.einsum("ui,ui->u", e, mw)
    quad_c = np.einsum("ui,ui->u", w, mw)
    dist_b = np.sqrt(quad_c)
    dist_a = np.sqrt(np.maximum(quad_a - 2.0 * quad_b + quad_c, 0.0))
    ac_minus_b2 = np.maximum(quad_a * quad_c - quad_b**2, 0.0)

    phi = np.full(nv, np.inf)
    seed_idx = seeds.vertices
    seed_t = np.full(nv, np.inf)
    np.minimum.at(seed_t, seed_idx, seeds.times)
    clamp = np.isfinite(seed_t)
    phi[clamp] = seed_t[clamp]

    changed = np.zeros(nv, dtype=bool)
    changed[seed_idx] = True

    for _ in range(max_sweeps):
        active = changed[ia] | changed[ib]
        if not np.any(active):
            break
        sa, sb, sc = ia[active], ib[active], ic[active]
        pa, pb = phi[sa], phi[sb]
        qa, qb, qc = quad_a[active], quad_b[active], quad_c[active]

        cand = np.where(np.isfinite(pb), pb + dist_b[active], np.inf)
        cand = np.minimum(
            cand, np.where(np.isfinite(pa), pa + dist_a[active], np.inf))

        both = np.isfinite(pa) & np.isfinite(pb)
        if np.any(both):
            delta = np.where(both, pa - pb, 0.0)
            kappa = delta * delta
            denom = qa - kappa
            ok = both & (denom > 0.0)
            with np.errstate(divide="ignore", invalid="ignore"):
                root = np.sqrt(
                    np.where(ok, kappa * ac_minus_b2[active] / denom, 0.0))
                for sign in (1.0, -1.0):
                    lam = (qb + sign * root) / qa
                    interior = ok & (lam > 0.0) & (lam < 1.0)
                    quad = qc - 2.0 * lam * qb + lam * lam * qa
                    t_int = pb + lam * delta + np.sqrt(np.maximum(quad, 0.0))
                    cand = np.minimum(cand,
                                      np.where(interior, t_int, np.inf))

        proposal = phi.copy()
        np.minimum.at(proposal, sc, cand)
        proposal[clamp] = seed_t[clamp]
        changed = proposal < phi - tol
        phi = np.minimum(phi, proposal)
    else:
        log.warning("eikonal solve hit the sweep cap before converging")

    unreachable = int(np.count_nonzero(np.isinf(phi)))
    if unreachable:
        log.warning("%d vertices unreachable from the seed set", unreachable)
    return phi


def analytic_planar(d2: np.ndarray, source, x, t0: float = 0.0) -> np.ndarray:
    """Closed-form planar arrival times for a constant 2x2 tensor.

    t(x) = t0 + sqrt((x - source) . D2^-1 (x - source)) for 2D points.
    """
    d2 = np.asarray(d2, dtype=np.float64)
    det = d2[0, 0] * d2[1, 1] - d2[0, 1] * d2[1, 0]
    if abs(det) < 1e-300:
        raise ValueError("tensor is singular")
    inv = np.array([[d2[1, 1], -d2[0, 1]], [-d2[1, 0], d2[0, 0]]]) / det
    delta = np.atleast_2d(np.asarray(x, dtype=np.float64)) - np.asarray(source,
                                                                        dtype=np.float64)
    q = np.einsum("ni,ij,nj->n", delta, inv, delta)
    return t0 + np.sqrt(np.maximum(q, 0.0))
