"""Built-in synthetic test geometries: planar sheet and icosphere."""

from __future__ import annotations

import numpy as np

from .mesh import TriMesh

__all__ = ["rect_sheet", "icosphere"]


def rect_sheet(width: float = 100.0, height: float = 100.0,
               target_edge: float = 2.0) -> TriMesh:
    """Flat rectangular sheet in z = 0, corner at the origin.

    A regular grid with spacing as close to target_edge as divides the
    extents evenly, each cell split along the same diagonal. Vertex 0
    sits at (0, 0, 0); winding is counterclockwise seen from +z.
    """
    if width <= 0 or height <= 0 or target_edge <= 0:
        raise ValueError("width, height and target_edge must be positive")
    nx = max(1, round(width / target_edge))
    ny = max(1, round(height / target_edge))
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    gx, gy = np.meshgrid(xs, ys)  # row-major over y, then x
    vertices = np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)])

    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    v00 = idx[:-1, :-1].ravel()
    v10 = idx[:-1, 1:].ravel()
    v01 = idx[1:, :-1].ravel()
    v11 = idx[1:, 1:].ravel()
    tris = np.concatenate([
        np.column_stack([v00, v10, v11]),
        np.column_stack([v00, v11, v01]),
    ])
    return TriMesh(vertices, tris)


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    """Unit icosahedron subdivided and projected onto a sphere."""
    if subdivisions < 0:
        raise ValueError("subdivisions must be nonnegative")
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [v for v in verts]
    for _ in range(subdivisions):
        midpoint_cache: dict[tuple[int, int], int] = {}

        def midpoint(i, j):
            key = (i, j) if i < j else (j, i)
            if key not in midpoint_cache:
                m = verts[i] + verts[j]
                m /= np.linalg.norm(m)
                midpoint_cache[key] = len(verts)
                verts.append(m)
            return midpoint_cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces.extend([(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)])
        faces = new_faces
    return TriMesh(radius * np.array(verts), np.array(faces, dtype=np.int64))
