"""Structured triangulations of a rectangle and their regular refinement.

Every square cell of the coarse grid is cut along the diagonal running from
its lower-left to its upper-right corner.  Regular refinement joins edge
midpoints, so each triangle has four congruent children and the refined mesh
belongs to the same structured family with half the cell size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

__all__ = [
    "DomainRect",
    "Mesh",
    "MeshSizeError",
    "build_structured_mesh",
    "refine_regular",
    "mesh_edges",
    "write_off",
]


class MeshSizeError(ValueError):
    """Mesh size does not divide the domain into whole cells."""


@dataclass(frozen=True)
class DomainRect:
    x_min: float
    x_max: float
    y_min: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate rectangle {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangle mesh, one level of a nested hierarchy.

    ``parent[t]`` is the index of the triangle on the previous level that
    contains triangle ``t`` (None on level 0).  ``cell`` is the leg length of
    the right triangles, i.e. the grid spacing.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    level: int
    parent: Optional[np.ndarray]
    h_max: float
    cell: float
    domain: DomainRect

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def signed_areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def boundary_vertex_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.boundary_edges.ravel()] = True
        return mask


def mesh_edges(triangles: np.ndarray):
    """Unique edges of a triangulation.

    Returns ``(edges, tri_edges)`` where ``edges`` is (E, 2) with sorted
    endpoints and ``tri_edges[t, i]`` indexes the local edge i of triangle t,
    local edges being (0,1), (1,2), (2,0).
    """
    local = triangles[:, [[0, 1], [1, 2], [2, 0]]]  # (T, 3, 2)
    flat = np.sort(local.reshape(-1, 2), axis=1)
    edges, inverse = np.unique(flat, axis=0, return_inverse=True)
    return edges, inverse.reshape(-1, 3)


def _boundary_edges(triangles):
    edges, tri_edges = mesh_edges(triangles)
    counts = np.bincount(tri_edges.ravel(), minlength=len(edges))
    return edges[counts == 1]


def _cell_count(length: float, H: float) -> int:
    n = round(length / H)
    if n < 1 or abs(n * H - length) > 1e-10 * max(length, 1.0):
        raise MeshSizeError(
            f"mesh size H={H} does not divide side length {length} into whole cells"
        )
    return n


def build_structured_mesh(domain: DomainRect, H: float) -> Mesh:
    """Uniform diagonal triangulation of ``domain`` with grid spacing ``H``.

    Vertices are numbered row by row (lexicographic in (y, x)); each cell
    contributes the triangles (v00, v10, v11) and (v00, v11, v01).
    """
    if H <= 0:
        raise MeshSizeError(f"mesh size must be positive, got {H}")
    nx = _cell_count(domain.width, H)
    ny = _cell_count(domain.height, H)
    xs = np.linspace(domain.x_min, domain.x_max, nx + 1)
    ys = np.linspace(domain.y_min, domain.y_max, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    i, j = np.meshgrid(np.arange(nx), np.arange(ny))
    v00 = (j * (nx + 1) + i).ravel()
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    lower = np.column_stack([v00, v10, v11])
    upper = np.column_stack([v00, v11, v01])
    triangles = np.stack([lower, upper], axis=1).reshape(-1, 3)

    return Mesh(
        vertices=_frozen(vertices),
        triangles=_frozen(triangles),
        boundary_edges=_frozen(_boundary_edges(triangles)),
        level=0,
        parent=None,
        h_max=math.sqrt(2.0) * H,
        cell=H,
        domain=domain,
    )


def refine_regular(mesh: Mesh) -> Mesh:
    """Split every triangle into four congruent children through edge midpoints.

    Old vertices keep their indices and coordinates; midpoint ``e`` of the
    coarse edge list becomes vertex ``V + e``.
    """
    V = mesh.n_vertices
    edges, tri_edges = mesh_edges(mesh.triangles)
    mid = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    vertices = np.vstack([mesh.vertices, mid])

    a, b, c = mesh.triangles.T
    m01, m12, m20 = (V + tri_edges).T
    children = np.stack(
        [
            np.column_stack([a, m01, m20]),
            np.column_stack([m01, b, m12]),
            np.column_stack([m20, m12, c]),
            np.column_stack([m12, m20, m01]),
        ],
        axis=1,
    ).reshape(-1, 3)
    parent = np.repeat(np.arange(mesh.n_triangles), 4)

    return Mesh(
        vertices=_frozen(vertices),
        triangles=_frozen(children),
        boundary_edges=_frozen(_boundary_edges(children)),
        level=mesh.level + 1,
        parent=_frozen(parent),
        h_max=0.5 * mesh.h_max,
        cell=0.5 * mesh.cell,
        domain=mesh.domain,
    )


def write_off(mesh: Mesh, path) -> None:
    """Dump the mesh as an OFF-like text listing (debugging aid only)."""
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{mesh.n_vertices} {mesh.n_triangles} 0\n")
        for x, y in mesh.vertices:
            fh.write(f"{x:.17g} {y:.17g} 0\n")
        for t in mesh.triangles:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")
