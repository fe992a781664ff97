"""Sparse domain decomposition with clamped-tent gate blending.

Index space is tiled by an S-aligned lattice (S a multiple of 512); only
cells containing active values get a subdomain, each with a dedicated expert
network.  Subdomains overlap through a fixed halo of ``HALO`` voxels and are
blended with separable clamped-tent gate weights whose ramps are centered on
the core box faces, so complementary ramps of face-adjacent neighbors sum to
one and the blended field is continuous across boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .errors import OutOfCoverageError, SvcodecError
from .grid import VdbGrid

HALO = 8
SUBDOMAIN_QUANTUM = 512


@dataclass
class Subdomain:
    """One occupied lattice cell: core box [lo, lo+S) plus the shared halo."""

    id: int
    cell: Tuple[int, int, int]
    size: int
    cluster_id: int = 0
    halo: int = HALO

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.cell, dtype=np.int64) * self.size

    @property
    def hi(self) -> np.ndarray:
        """Exclusive core upper bound."""
        return self.lo + self.size

    def expanded_lo(self) -> np.ndarray:
        return self.lo - self.halo

    def expanded_hi(self) -> np.ndarray:
        return self.hi + self.halo

    def contains_core(self, coords: np.ndarray) -> np.ndarray:
        c = np.asarray(coords)
        return np.all((c >= self.lo) & (c < self.hi), axis=-1)


@dataclass
class SubdomainLayout:
    """Occupancy-driven decomposition of index space."""

    size: int
    halo: int = HALO
    subdomains: List[Subdomain] = field(default_factory=list)
    cell_to_id: Dict[Tuple[int, int, int], int] = field(default_factory=dict)
    cluster_count: int = 0

    def subdomain_at_cell(self, cell: Tuple[int, int, int]) -> Subdomain:
        return self.subdomains[self.cell_to_id[cell]]

    def owner_of(self, coord: Sequence[int]) -> int:
        """Id of the subdomain whose core box contains the coordinate, or -1."""
        cell = tuple(int(v) // self.size for v in np.asarray(coord, dtype=np.int64))
        return self.cell_to_id.get(cell, -1)


def decompose(grid: VdbGrid, size: int) -> SubdomainLayout:
    """Subdomains for every lattice cell holding at least one active value.

    Cluster ids come from a 26-connected flood fill over occupied cells; they
    affect reporting only, never the math.  Pure function of (topology, S).
    """
    if size <= 0 or size % SUBDOMAIN_QUANTUM:
        raise SvcodecError(f"subdomain size must be a positive multiple of "
                           f"{SUBDOMAIN_QUANTUM}, got {size}")
    cells = set()
    for leaf in grid.iter_leaves():
        if leaf.active.bits.any():
            # leaves are 8-aligned and S is a multiple of 512, so a leaf
            # never straddles a cell boundary
            cells.add(tuple(int(v) // size for v in leaf.origin))
    for entry in grid.active_tiles():
        lo = np.asarray(entry.coord, dtype=np.int64)
        for corner in (lo, lo + entry.extent - 1):
            cells.add(tuple(int(v) // size for v in corner))
    layout = SubdomainLayout(size=size)
    ordered = sorted(cells)
    for sid, cell in enumerate(ordered):
        layout.subdomains.append(Subdomain(id=sid, cell=cell, size=size))
        layout.cell_to_id[cell] = sid
    # 26-connected clusters over occupied cells, in deterministic order
    cluster = -1
    seen = set()
    for cell in ordered:
        if cell in seen:
            continue
        cluster += 1
        stack = [cell]
        seen.add(cell)
        while stack:
            cur = stack.pop()
            layout.subdomains[layout.cell_to_id[cur]].cluster_id = cluster
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    for dz in (-1, 0, 1):
                        if dx == dy == dz == 0:
                            continue
                        nb = (cur[0] + dx, cur[1] + dy, cur[2] + dz)
                        if nb in layout.cell_to_id and nb not in seen:
                            seen.add(nb)
                            stack.append(nb)
    layout.cluster_count = cluster + 1
    return layout


def gate_weight(sub: Subdomain, x: np.ndarray) -> np.ndarray:
    """Clamped tent weight in [0, 1] at continuous index-space points.

    Per axis: clamp(min(x - (lo - h), (hi + h) - x) / (2h), 0, 1); the product
    over axes is 1 at points at least h inside the core box and 0 outside the
    box plus halo.
    """
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    if single:
        pts = pts[None, :]
    h = float(sub.halo)
    lo = sub.lo.astype(np.float64)
    hi = sub.hi.astype(np.float64)
    ramp = np.minimum(pts - (lo - h), (hi + h) - pts) / (2.0 * h)
    w = np.clip(ramp, 0.0, 1.0).prod(axis=-1)
    return float(w[0]) if single else w


def blend(layout: SubdomainLayout, expert_outputs: Iterable[Tuple[int, float, float]],
          x: Sequence[float]) -> float:
    """Gate-weighted average of expert values at one point.

    ``expert_outputs`` yields (subdomain id, value, weight).  The weighted sum
    is normalized by the total weight; with all-zero weights the point is
    outside coverage and the caller falls back to the background.
    """
    num = 0.0
    den = 0.0
    for _, value, weight in expert_outputs:
        num += weight * value
        den += weight
    if den <= 0.0:
        raise OutOfCoverageError(f"no gate covers point {tuple(x)}")
    return num / den


def candidate_cells(layout: SubdomainLayout, pts: np.ndarray) -> np.ndarray:
    """(n, 8, 3) lattice cells whose gates might be nonzero at each point.

    Per axis only two cells can be in range because the halo is smaller than
    the cell size, so eight candidates cover every case (corner points touch
    exactly eight).
    """
    pts = np.asarray(pts, dtype=np.float64)
    s = float(layout.size)
    h = float(layout.halo)
    lo_cell = np.floor((pts - h) / s).astype(np.int64)
    hi_cell = np.floor((pts + h) / s).astype(np.int64)
    out = np.empty((pts.shape[0], 8, 3), dtype=np.int64)
    for i in range(8):
        out[:, i, 0] = lo_cell[:, 0] if i & 4 == 0 else hi_cell[:, 0]
        out[:, i, 1] = lo_cell[:, 1] if i & 2 == 0 else hi_cell[:, 1]
        out[:, i, 2] = lo_cell[:, 2] if i & 1 == 0 else hi_cell[:, 2]
    return out


def assign_points(layout: SubdomainLayout, coords: np.ndarray
                  ) -> Dict[int, Tuple[np.ndarray, np.ndarray]]:
    """Dispatch points to every subdomain whose gate weight there is > 0.

    ``coords`` is (n, 3) continuous index-space points.  Returns
    {subdomain id: (row indices, gate weights)}; a point can appear in up to
    eight batches.
    """
    pts = np.asarray(coords, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("coords must have shape (n, 3)")
    s = float(layout.size)
    h = float(layout.halo)
    lo_cell = np.floor((pts - h) / s).astype(np.int64)
    hi_cell = np.floor((pts + h) / s).astype(np.int64)
    differs = hi_cell != lo_cell
    out: Dict[int, Tuple[np.ndarray, np.ndarray]] = {}
    for i in range(8):
        # a combo taking the hi cell on an axis is new only when hi != lo there
        keep = np.ones(pts.shape[0], dtype=bool)
        cells = lo_cell.copy()
        for axis, bit in ((0, 4), (1, 2), (2, 1)):
            if i & bit:
                keep &= differs[:, axis]
                cells[:, axis] = hi_cell[:, axis]
        rows0 = np.flatnonzero(keep)
        if rows0.size == 0:
            continue
        uniq, inv = np.unique(cells[rows0], axis=0, return_inverse=True)
        for u, cell in enumerate(uniq):
            sid = layout.cell_to_id.get(tuple(int(v) for v in cell))
            if sid is None:
                continue
            rows = rows0[inv == u]
            w = gate_weight(layout.subdomains[sid], pts[rows])
            nz = w > 0.0
            if not nz.any():
                continue
            rows = rows[nz]
            prev = out.get(sid)
            if prev is None:
                out[sid] = (rows, np.asarray(w[nz], dtype=np.float64))
            else:
                out[sid] = (np.concatenate([prev[0], rows]),
                            np.concatenate([prev[1], w[nz]]))
    # canonical row order per subdomain
    for sid, (rows, w) in out.items():
        order = np.argsort(rows, kind="stable")
        out[sid] = (rows[order], w[order])
    return out


def blend_fields(layout: SubdomainLayout, pts: np.ndarray, evaluate,
                 out_dim: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Blend per-expert fields at (n, 3) points with normalized gate weights.

    ``evaluate(subdomain_id, pts_subset)`` returns (k, out_dim) expert
    outputs, or None to exclude that expert (its weights are dropped from the
    normalization).  Returns (blended (n, out_dim), covered (n,) bool); rows
    without coverage are zero and flagged.
    """
    pts = np.asarray(pts, dtype=np.float64)
    n = pts.shape[0]
    num = np.zeros((n, out_dim), dtype=np.float64)
    den = np.zeros(n, dtype=np.float64)
    for sid, (rows, w) in sorted(assign_points(layout, pts).items()):
        vals = evaluate(sid, pts[rows])
        if vals is None:
            continue
        vals = np.asarray(vals, dtype=np.float64)
        if vals.ndim == 1:
            vals = vals[:, None]
        num[rows] += vals * w[:, None]
        den[rows] += w
    covered = den > 0.0
    num[covered] /= den[covered, None]
    return num, covered
