"""Overlapping subdomain system aligned with the coarsest mesh.

The domain is cut into a sqrt(m) x sqrt(m) grid of blocks D_j.  Each block
is grown by the overlap width to give Omega_j and shrunk by the same width
away from interior interfaces to give G_j; the remaining cross-shaped strip
is G_{m+1}.  Regions are unions of coarse triangles, selected by centroid,
and inherited by finer levels through the parent maps.

Region ids are ``(kind, j)`` tuples with 0-based ``j``:

* ``("block", j)``    D_j
* ``("extended", j)`` Omega_j
* ``("core", j)``     G_j
* ``("strip", 0)``    G_{m+1}
* ``("domain", 0)``   the whole domain
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from .fespace import FeSpace
from .mesh import DomainRect, Mesh

__all__ = [
    "PartitionError",
    "Rect",
    "Partition",
    "SubSpace",
    "build_partition",
    "restrict_space",
    "snap_overlap",
]

Rect = Tuple[float, float, float, float]  # x0, x1, y0, y1
Region = Tuple[str, int]

_KINDS = ("block", "extended", "core", "strip", "domain")


class PartitionError(ValueError):
    pass


def _is_multiple(a, H):
    q = a / H
    return round(q) >= 1 and abs(q - round(q)) <= 1e-9 * max(1.0, q)


def snap_overlap(delta: float, H: float) -> float:
    """Smallest positive multiple of ``H`` that is at least ``delta``."""
    if delta <= 0:
        raise PartitionError(f"overlap width must be positive, got {delta}")
    k = max(1, math.ceil(delta / H - 1e-9))
    return k * H


@dataclass(eq=False)
class Partition:
    m: int
    delta: float
    domain: DomainRect
    blocks: List[Rect]
    extended: List[Rect]
    cores: List[Rect]
    coarse_masks: Dict[Region, np.ndarray]
    _masks: Dict[int, Dict[Region, np.ndarray]] = field(default_factory=dict, repr=False)

    def regions(self) -> List[Region]:
        out = [(k, j) for k in ("block", "extended", "core") for j in range(self.m)]
        return out + [("strip", 0), ("domain", 0)]

    def element_mask(self, region: Region, mesh: Mesh) -> np.ndarray:
        """Boolean mask of the triangles of ``mesh`` that make up ``region``."""
        if region not in self.coarse_masks:
            raise KeyError(f"unknown region {region!r}")
        masks = self._masks.get(mesh.level)
        if masks is None:
            masks = self._propagate(mesh)
        return masks[region]

    def _propagate(self, mesh: Mesh):
        if mesh.level == 0:
            masks = self.coarse_masks
        else:
            if mesh.parent is None:
                raise PartitionError("mesh has no parent map; cannot inherit regions")
            prev = self._masks.get(mesh.level - 1)
            if prev is None:
                raise PartitionError(
                    f"level {mesh.level - 1} not registered; visit levels in order")
            masks = {r: m[mesh.parent] for r, m in prev.items()}
        for m in masks.values():
            m.flags.writeable = False
        self._masks[mesh.level] = masks
        return masks

    def register(self, mesh: Mesh) -> None:
        """Cache the element sets of every region on ``mesh``'s level."""
        if mesh.level not in self._masks:
            self._propagate(mesh)

    def overlap_count(self, mesh: Mesh) -> np.ndarray:
        """Number of extended subdomains containing each triangle."""
        return sum(self.element_mask(("extended", j), mesh).astype(int) for j in range(self.m))


def build_partition(coarse: Mesh, m: int, delta: float) -> Partition:
    """Build the block / extended / core / strip regions on the coarsest mesh.

    Preconditions: ``m`` is a perfect square, blocks and ``delta`` are whole
    multiples of the coarse cell size, and every core keeps positive width
    after shrinking (a block with interior interfaces on both sides in one
    direction needs 2 delta < side, a block with one needs delta < side).
    """
    r = math.isqrt(m)
    if m < 1 or r * r != m:
        raise PartitionError(f"m={m} is not a perfect square")
    H = coarse.cell
    dom = coarse.domain
    bw, bh = dom.width / r, dom.height / r
    if not (_is_multiple(bw, H) and _is_multiple(bh, H)):
        raise PartitionError(f"blocks of size {bw} x {bh} do not align with H={H}")
    if not _is_multiple(delta, H):
        raise PartitionError(f"overlap width delta={delta} is not a multiple of H={H}")

    xs = [dom.x_min + i * bw for i in range(r)] + [dom.x_max]
    ys = [dom.y_max - i * bh for i in range(r)] + [dom.y_min]  # top row first
    blocks, extended, cores = [], [], []
    for row in range(r):
        for col in range(r):
            x0, x1 = xs[col], xs[col + 1]
            y1, y0 = ys[row], ys[row + 1]
            lft, rgt = col > 0, col < r - 1
            bot, top = row < r - 1, row > 0
            blocks.append((x0, x1, y0, y1))
            extended.append((
                max(dom.x_min, x0 - delta), min(dom.x_max, x1 + delta),
                max(dom.y_min, y0 - delta), min(dom.y_max, y1 + delta),
            ))
            core = (x0 + delta * lft, x1 - delta * rgt, y0 + delta * bot, y1 - delta * top)
            if core[1] - core[0] <= 1e-12 * bw or core[3] - core[2] <= 1e-12 * bh:
                raise PartitionError(
                    f"delta={delta} leaves an empty core in block {len(blocks) - 1}")
            cores.append(core)

    cen = coarse.centroids()

    def inside(rect):
        x0, x1, y0, y1 = rect
        return (cen[:, 0] > x0) & (cen[:, 0] < x1) & (cen[:, 1] > y0) & (cen[:, 1] < y1)

    masks: Dict[Region, np.ndarray] = {}
    for j in range(m):
        masks[("block", j)] = inside(blocks[j])
        masks[("extended", j)] = inside(extended[j])
        masks[("core", j)] = inside(cores[j])
    any_core = np.zeros(coarse.n_triangles, dtype=bool)
    for j in range(m):
        any_core |= masks[("core", j)]
    masks[("strip", 0)] = ~any_core
    masks[("domain", 0)] = np.ones(coarse.n_triangles, dtype=bool)

    part = Partition(m, delta, dom, blocks, extended, cores, masks)
    part.register(coarse)
    return part


@dataclass(frozen=True, eq=False)
class SubSpace:
    """Dofs of a region, as positions in the interior numbering of ``space``.

    ``index`` are positions into interior-dof vectors; ``dofs`` the matching
    global dof numbers.
    """

    space: FeSpace
    region: Region
    zero_trace: bool
    index: np.ndarray
    dofs: np.ndarray

    def __len__(self):
        return len(self.index)


def restrict_space(space: FeSpace, partition: Partition, region: Region,
                   zero_trace: bool) -> SubSpace:
    """Interior dofs touched by ``region``.

    With ``zero_trace`` only dofs whose every incident triangle lies in the
    region are kept, i.e. the dofs of V_0h(region); otherwise every dof of a
    region triangle (closure of the region) is kept.  Dofs on the outer
    boundary never appear.
    """
    if region[0] not in _KINDS:
        raise KeyError(f"unknown region {region!r}")
    mask = partition.element_mask(region, space.mesh)
    touched = np.zeros(space.N, dtype=bool)
    touched[space.elem_dofs[mask].ravel()] = True
    if zero_trace:
        outside = np.zeros(space.N, dtype=bool)
        outside[space.elem_dofs[~mask].ravel()] = True
        touched &= ~outside
    touched[space.boundary] = False
    dofs = np.flatnonzero(touched)
    index = space.interior_pos[dofs]
    index.flags.writeable = False
    dofs.flags.writeable = False
    return SubSpace(space, region, zero_trace, index, dofs)
