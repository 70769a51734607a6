"""Triangle mesh container, geometry queries, and file IO.

Positions are in mm. A mesh is immutable after construction and
validates its invariants up front: indices in range, no degenerate
triangles (area > 1e-10 mm^2), and edge-manifoldness (every edge shared
by at most two triangles). Inconsistent winding between neighboring
triangles is reported as a warning, never repaired.

Supported formats: OBJ (positions and triangular faces only) and VTK
legacy ASCII POLYDATA. VTK output writes floats with repr-level
precision so coordinates and fields round-trip bit-exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "MeshFormatError",
    "SurfacePoint",
    "TriMesh",
    "load_mesh",
    "save_vtk",
    "read_vtk",
]

log = logging.getLogger(__name__)

_MIN_AREA = 1e-10


class MeshFormatError(ValueError):
    """Raised when a mesh file cannot be parsed or violates invariants."""


@dataclass(frozen=True)
class SurfacePoint:
    """A point on the mesh: triangle index, barycentric coords, position."""

    triangle: int
    bary: np.ndarray
    position: np.ndarray

    def __post_init__(self):
        bary = np.asarray(self.bary, dtype=np.float64)
        if bary.shape != (3,) or np.any(bary < -1e-12) or abs(bary.sum() - 1.0) > 1e-12:
            raise ValueError(f"invalid barycentric coordinates {bary}")
        object.__setattr__(self, "bary", bary)
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))


class TriMesh:
    """Immutable triangle surface mesh.

    Parameters
    ----------
    vertices : (V, 3) float array, mm
    triangles : (T, 3) integer array of vertex indices
    """

    def __init__(self, vertices, triangles):
        self.vertices = np.ascontiguousarray(vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise ValueError(f"triangles must be (T, 3), got {self.triangles.shape}")
        nv = len(self.vertices)
        if self.triangles.size and (
            self.triangles.min() < 0 or self.triangles.max() >= nv
        ):
            bad = np.where((self.triangles < 0) | (self.triangles >= nv))[0][0]
            raise MeshFormatError(
                f"triangle {bad} references vertex outside 0..{nv - 1}: "
                f"{self.triangles[bad].tolist()}"
            )

        corners = self.vertices[self.triangles]
        cross = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
        norms = np.linalg.norm(cross, axis=1)
        self._areas = 0.5 * norms
        small = np.where(self._areas <= _MIN_AREA)[0]
        if small.size:
            raise MeshFormatError(
                f"triangle {small[0]} is degenerate "
                f"(area {self._areas[small[0]]:.3e} mm^2)"
            )
        self._tri_normals = cross / norms[:, None]

        self._edges, edge_counts, oriented = self._edge_table()
        over = np.where(edge_counts > 2)[0]
        if over.size:
            e = self._edges[over[0]]
            raise MeshFormatError(
                f"edge ({e[0]}, {e[1]}) shared by {edge_counts[over[0]]} triangles; "
                "mesh is not edge-manifold"
            )
        # Interior edges traversed twice in the same direction mean the
        # two triangles disagree on orientation.
        if oriented:
            log.warning(
                "mesh winding is inconsistent across %d edge(s); "
                "normals may flip locally", oriented
            )

        self._vertex_triangles = [[] for _ in range(nv)]
        for t, tri in enumerate(self.triangles):
            for v in tri:
                self._vertex_triangles[v].append(t)
        self._vertex_triangles = [np.array(ts, dtype=np.int64) for ts in self._vertex_triangles]
        self._vertex_normals = None
        self._tri_bases = None

    def _edge_table(self):
        tri = self.triangles
        raw = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        key = np.sort(raw, axis=1)
        uniq, inverse, counts = np.unique(
            key, axis=0, return_inverse=True, return_counts=True
        )
        # count same-direction duplicates among interior edges
        forward = raw[:, 0] < raw[:, 1]
        fwd_per_edge = np.zeros(len(uniq), dtype=np.int64)
        np.add.at(fwd_per_edge, inverse, forward.astype(np.int64))
        interior = counts == 2
        bad = np.count_nonzero(interior & (fwd_per_edge != 1))
        return uniq, counts, int(bad)

    # -- basic queries ---------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def areas(self) -> np.ndarray:
        """Per-triangle areas, mm^2."""
        return self._areas

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted index pairs, shape (E, 2)."""
        return self._edges

    @property
    def triangle_normals(self) -> np.ndarray:
        return self._tri_normals

    def vertex_triangles(self, v: int) -> np.ndarray:
        return self._vertex_triangles[v]

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted average of incident triangle normals, unit length."""
        if self._vertex_normals is None:
            acc = np.zeros_like(self.vertices)
            weighted = self._tri_normals * self._areas[:, None]
            for c in range(3):
                np.add.at(acc, self.triangles[:, c], weighted)
            norms = np.linalg.norm(acc, axis=1)
            bad = np.where(norms < 1e-12)[0]
            if bad.size:
                raise ValueError(
                    f"vertex {bad[0]}: incident normals cancel; "
                    "cannot define a vertex normal"
                )
            self._vertex_normals = acc / norms[:, None]
        return self._vertex_normals

    def mean_edge_length(self) -> float:
        """Arithmetic mean of unique edge lengths, mm."""
        if len(self._edges) == 0:
            raise ValueError("mesh has no edges")
        diffs = self.vertices[self._edges[:, 0]] - self.vertices[self._edges[:, 1]]
        return float(np.mean(np.linalg.norm(diffs, axis=1)))

    def triangle_basis(self, t: int) -> np.ndarray:
        """Deterministic orthonormal in-plane basis of triangle t, shape (3, 2)."""
        a, b, _ = self.vertices[self.triangles[t]]
        e1 = b - a
        e1 = e1 / np.linalg.norm(e1)
        e2 = np.cross(self._tri_normals[t], e1)
        return np.column_stack([e1, e2])

    def triangle_bases(self) -> np.ndarray:
        """All triangle bases stacked, shape (T, 3, 2); cached."""
        if self._tri_bases is None:
            corners = self.vertices[self.triangles]
            e1 = corners[:, 1] - corners[:, 0]
            e1 = e1 / np.linalg.norm(e1, axis=1, keepdims=True)
            e2 = np.cross(self._tri_normals, e1)
            self._tri_bases = np.stack([e1, e2], axis=2)
            self._tri_bases.setflags(write=False)
        return self._tri_bases

    # -- closest-point projection ----------------------------------------

    def project_point(self, p) -> SurfacePoint:
        """Closest point on the surface to p (exact, ties to lowest index)."""
        p = np.asarray(p, dtype=np.float64).reshape(3)
        bary = _closest_point_barycentric(self.vertices[self.triangles], p)
        feet = np.einsum("tc,tcx->tx", bary, self.vertices[self.triangles])
        d2 = np.sum((feet - p) ** 2, axis=1)
        t = int(np.argmin(d2))
        return SurfacePoint(triangle=t, bary=bary[t], position=feet[t])


def _closest_point_barycentric(corners: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Barycentric coordinates of the point of each triangle closest to p.

    Vectorized closed-form region classification over all triangles
    (vertex / edge / interior cases), following the standard
    point-to-triangle construction.
    """
    a, b, c = corners[:, 0], corners[:, 1], corners[:, 2]
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    n = len(corners)
    bary = np.empty((n, 3))
    denom = va + vb + vc
    denom = np.where(denom == 0.0, 1.0, denom)
    v_in = vb / denom
    w_in = vc / denom
    bary[:, 0] = 1.0 - v_in - w_in
    bary[:, 1] = v_in
    bary[:, 2] = w_in

    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = np.where(d1 != d3, d1 / (d1 - d3), 0.0)
        w_ac = np.where(d2 != d6, d2 / (d2 - d6), 0.0)
        denom_bc = (d4 - d3) + (d5 - d6)
        w_bc = np.where(denom_bc != 0.0, (d4 - d3) / denom_bc, 0.0)

    # later assignments win, so order regions from interior to vertices
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    bary[on_bc] = np.column_stack(
        [np.zeros(n), 1.0 - w_bc, w_bc]
    )[on_bc]
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    bary[on_ac] = np.column_stack([1.0 - w_ac, np.zeros(n), w_ac])[on_ac]
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    bary[on_ab] = np.column_stack([1.0 - v_ab, v_ab, np.zeros(n)])[on_ab]
    at_a = (d1 <= 0) & (d2 <= 0)
    bary[at_a] = (1.0, 0.0, 0.0)
    at_b = (d3 >= 0) & (d4 <= d3)
    bary[at_b] = (0.0, 1.0, 0.0)
    at_c = (d6 >= 0) & (d5 <= d6)
    bary[at_c] = (0.0, 0.0, 1.0)
    return np.clip(bary, 0.0, 1.0)


# -- file IO ----------------------------------------------------------------


def load_mesh(path, fmt: str | None = None) -> TriMesh:
    """Read a mesh from OBJ or VTK legacy ASCII; format inferred from suffix."""
    path = Path(path)
    if fmt is None:
        suffix = path.suffix.lower()
        if suffix == ".obj":
            fmt = "obj"
        elif suffix == ".vtk":
            fmt = "vtk"
        else:
            raise MeshFormatError(
                f"{path}: cannot infer mesh format from suffix {suffix!r}; "
                "pass fmt='obj' or 'vtk'"
            )
    if fmt == "obj":
        vertices, triangles = _read_obj(path)
        return TriMesh(vertices, triangles)
    if fmt == "vtk":
        mesh, _ = read_vtk(path)
        return mesh
    raise MeshFormatError(f"unsupported mesh format {fmt!r}")


def _read_obj(path):
    vertices, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshFormatError(f"{path}:{lineno}: malformed vertex line")
                try:
                    vertices.append([float(x) for x in parts[1:4]])
                except ValueError as exc:
                    raise MeshFormatError(f"{path}:{lineno}: {exc}") from exc
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise MeshFormatError(
                        f"{path}:{lineno}: only triangular faces are supported"
                    )
                try:
                    idx = [int(tok.split("/")[0]) - 1 for tok in parts[1:4]]
                except ValueError as exc:
                    raise MeshFormatError(f"{path}:{lineno}: {exc}") from exc
                faces.append(idx)
            # all other directives (vn, vt, usemtl, ...) are ignored
    if not vertices or not faces:
        raise MeshFormatError(f"{path}: no vertices or no faces found")
    return np.array(vertices), np.array(faces)


def _fmt_floats(row) -> str:
    return " ".join(repr(float(x)) for x in row)


def save_vtk(mesh: TriMesh, path, point_data: dict | None = None,
             title: str = "fiberfit surface") -> None:
    """Write VTK legacy ASCII POLYDATA with optional per-vertex fields.

    point_data maps field name to a (V,) scalar array or (V, 3) vector
    array. Floats are written with full round-trip precision.
    """
    nv, nt = mesh.n_vertices, mesh.n_triangles
    lines = [
        "# vtk DataFile Version 3.0",
        title,
        "ASCII",
        "DATASET POLYDATA",
        f"POINTS {nv} double",
    ]
    lines.extend(_fmt_floats(v) for v in mesh.vertices)
    lines.append(f"POLYGONS {nt} {4 * nt}")
    lines.extend(f"3 {t[0]} {t[1]} {t[2]}" for t in mesh.triangles)
    if point_data:
        lines.append(f"POINT_DATA {nv}")
        for name, values in point_data.items():
            values = np.asarray(values, dtype=np.float64)
            if values.shape == (nv,):
                lines.append(f"SCALARS {name} double 1")
                lines.append("LOOKUP_TABLE default")
                lines.extend(repr(float(x)) for x in values)
            elif values.shape == (nv, 3):
                lines.append(f"VECTORS {name} double")
                lines.extend(_fmt_floats(v) for v in values)
            else:
                raise ValueError(
                    f"point_data[{name!r}] must be ({nv},) or ({nv}, 3), "
                    f"got {values.shape}"
                )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_vtk(path):
    """Read VTK legacy ASCII POLYDATA; returns (TriMesh, point_data dict)."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as fh:
        tokens_by_line = [line.split() for line in fh]

    # flatten to a token stream but remember line numbers for errors
    stream = []
    for lineno, toks in enumerate(tokens_by_line, 1):
        stream.extend((lineno, t) for t in toks)
    pos = 0

    def fail(lineno, msg):
        raise MeshFormatError(f"{path}:{lineno}: {msg}")

    def take(n):
        nonlocal pos
        if pos + n > len(stream):
            fail(stream[-1][0] if stream else 0, "unexpected end of file")
        out = stream[pos : pos + n]
        pos += n
        return out

    def take_values(n, lineno):
        try:
            return np.array([float(t) for _, t in take(n)])
        except ValueError as exc:
            fail(lineno, f"bad numeric value: {exc}")

    header = [t.upper() for _, t in stream[:20]]
    if "POLYDATA" not in header:
        fail(1, "not a VTK POLYDATA file")

    vertices = triangles = None
    point_data: dict[str, np.ndarray] = {}
    n_points = 0
    while pos < len(stream):
        lineno, tok = take(1)[0]
        key = tok.upper()
        if key == "POINTS":
            (l2, cnt), (_, _dtype) = take(2)
            n_points = int(cnt)
            vertices = take_values(3 * n_points, l2).reshape(n_points, 3)
        elif key == "POLYGONS":
            (l2, cnt), (_, total) = take(2)
            cnt, total = int(cnt), int(total)
            raw = take_values(total, l2).astype(np.int64)
            tris, k = [], 0
            while k < total:
                m = raw[k]
                if m != 3:
                    fail(l2, f"non-triangle polygon with {m} vertices")
                tris.append(raw[k + 1 : k + 4])
                k += m + 1
            if len(tris) != cnt:
                fail(l2, f"POLYGONS declared {cnt} cells, found {len(tris)}")
            triangles = np.array(tris, dtype=np.int64)
        elif key == "POINT_DATA":
            (_, cnt) = take(1)[0]
            if int(cnt) != n_points:
                fail(lineno, "POINT_DATA count does not match POINTS")
        elif key == "SCALARS":
            (_, name), (_, _dtype) = take(2)
            l2, nxt = take(1)[0]
            if nxt.upper() != "LOOKUP_TABLE":  # optional component count
                l2, nxt = take(1)[0]
            if nxt.upper() != "LOOKUP_TABLE":
                fail(l2, "expected LOOKUP_TABLE after SCALARS")
            take(1)  # table name
            point_data[name] = take_values(n_points, l2)
        elif key == "VECTORS":
            (_, name), (_, _dtype) = take(2)
            point_data[name] = take_values(3 * n_points, lineno).reshape(n_points, 3)
        elif key in ("#", "ASCII", "DATASET", "POLYDATA"):
            continue
        elif key == "VTK" or tok.startswith("#"):
            continue
        # anything else: header words, title text; skip

    if vertices is None or triangles is None:
        fail(1, "missing POINTS or POLYGONS block")
    return TriMesh(vertices, triangles), point_data
