"""Evaluation metrics: IoU, RMSE, modified Chamfer distance, compression.

SDF occupancy is the sign test ``value <= 0``.  Per-voxel evaluation is only
needed inside the active bands; outside them occupancy is decided wholesale
by tile signs, so each grid's occupied set is its active voxels with
non-positive values plus the extents of its non-positive tiles.  IoU is the
overlap of the two occupied sets (1.0 when both are empty).  For density
grids occupancy is simply the active bit over the union of both active sets.

RMSE runs over the union of both active sets; a side inactive at a
coordinate contributes its background.

The modified Chamfer distance samples the opposing SDF at zero-crossing
surface points by trilinear interpolation and averages the absolute values
symmetrically.  The printed equation sums signed values; absolute values are
used here since signed contributions could cancel.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List

import numpy as np

from .container import NeuralGridContainer, serialize_container
from .errors import MetricError
from .grid import GRID_CLASS_SDF, VdbGrid
from .gridfile import serialize_grid

logger = logging.getLogger(__name__)

RATIO_RAW = "rawPayload"
RATIO_FILE = "filePayload"


def _check_comparable(a: VdbGrid, b: VdbGrid) -> None:
    if a.voxel_size != b.voxel_size:
        raise MetricError(f"voxel size mismatch: {a.voxel_size} vs {b.voxel_size}")
    if a.grid_class != b.grid_class:
        raise MetricError(f"grid class mismatch: {a.grid_class} vs {b.grid_class}")


def _expand_extent(origin, extent: int) -> np.ndarray:
    axis = np.arange(extent, dtype=np.int64)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    block = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    return np.asarray(origin, dtype=np.int64) + block


def _active_coords(g: VdbGrid) -> np.ndarray:
    """Active voxel coordinates with active tiles expanded, (n, 3) int64."""
    parts = [g.active_voxels()[0]]
    for entry in g.active_tiles():
        if entry.extent > 128:
            raise MetricError("root-level active tiles are not supported by metrics")
        parts.append(_expand_extent(entry.coord, entry.extent))
    return np.concatenate(parts, axis=0)


def _active_union(a: VdbGrid, b: VdbGrid) -> np.ndarray:
    coords = np.concatenate([_active_coords(a), _active_coords(b)], axis=0)
    if coords.shape[0] == 0:
        return coords
    return np.unique(coords, axis=0)


def _nonpositive_tiles(g: VdbGrid) -> list:
    """(origin, extent) of every tile holding a non-positive value."""
    out = []
    for key, node2 in g.root.items():
        occupied = (~node2.child_mask.bits) & (node2.tiles <= 0.0)
        for idx in np.flatnonzero(occupied):
            out.append((node2.slot_origin(int(idx)), 128))
        for idx2 in node2.child_mask.indices():
            node1 = node2.children[int(idx2)]
            occupied = (~node1.child_mask.bits) & (node1.tiles <= 0.0)
            for idx in np.flatnonzero(occupied):
                out.append((node1.slot_origin(int(idx)), 8))
    for key, (value, _) in g.root_tiles.items():
        if value <= 0.0:
            raise MetricError("root-level occupied tiles are not supported by metrics")
    return out


def _occupied_coords(g: VdbGrid) -> np.ndarray:
    """Voxels where the stored SDF is non-positive.

    Per-voxel signs inside leaves (active or not), whole extents for
    non-positive tiles.
    """
    from .grid import LEAF_LOCAL_COORDS
    parts = []
    for leaf in g.iter_leaves():
        neg = leaf.values <= 0.0
        if neg.any():
            parts.append(np.asarray(leaf.origin, dtype=np.int64)
                         + LEAF_LOCAL_COORDS[neg])
    for origin, extent in _nonpositive_tiles(g):
        parts.append(_expand_extent(origin, extent))
    if not parts:
        return np.empty((0, 3), dtype=np.int64)
    allc = np.concatenate(parts, axis=0)
    return np.unique(allc, axis=0)


def _packed(coords: np.ndarray) -> np.ndarray:
    # components fit in 21 bits at metric scale; guarded by the tile checks
    c = coords + (1 << 20)
    if c.min() < 0 or c.max() >= (1 << 21):
        raise MetricError("coordinates outside +-2^20 are not supported by metrics")
    return (c[:, 0] << 42) | (c[:, 1] << 21) | c[:, 2]


def iou(a: VdbGrid, b: VdbGrid) -> float:
    """Occupancy overlap; 1.0 when both occupied sets are empty.

    SDF grids compare their full occupied sets (per-voxel signs inside the
    bands, whole tiles outside); density grids compare active sets.
    """
    _check_comparable(a, b)
    if a.grid_class == GRID_CLASS_SDF:
        occ_a = _occupied_coords(a)
        occ_b = _occupied_coords(b)
        if occ_a.shape[0] == 0 and occ_b.shape[0] == 0:
            return 1.0
        pa = _packed(occ_a) if occ_a.shape[0] else np.empty(0, dtype=np.int64)
        pb = _packed(occ_b) if occ_b.shape[0] else np.empty(0, dtype=np.int64)
        inter = np.intersect1d(pa, pb, assume_unique=True).size
        union = pa.size + pb.size - inter
        return float(inter / union) if union else 1.0
    union = _active_union(a, b)
    if union.shape[0] == 0:
        return 1.0
    _, aa = a.get_values(union)
    _, ab = b.get_values(union)
    denom = int(np.count_nonzero(aa | ab))
    if denom == 0:
        return 1.0
    return float(np.count_nonzero(aa & ab) / denom)


def rmse(a: VdbGrid, b: VdbGrid) -> float:
    """Root mean squared value error over the union of both active sets."""
    _check_comparable(a, b)
    union = _active_union(a, b)
    if union.shape[0] == 0:
        raise MetricError("rmse over an empty active-set union")
    va, aa = a.get_values(union)
    vb, ab = b.get_values(union)
    va = np.where(aa, va, np.float32(a.background))
    vb = np.where(ab, vb, np.float32(b.background))
    diff = va.astype(np.float64) - vb.astype(np.float64)
    return float(np.sqrt(np.mean(diff * diff)))


@dataclass
class SurfaceSamples:
    """Zero-crossing points on active-voxel grid edges (index space)."""

    points: np.ndarray   # (n, 3) float64

    def __len__(self) -> int:
        return self.points.shape[0]


def extract_surface_samples(g: VdbGrid) -> SurfaceSamples:
    """Linear-interpolation zero crossings along +x/+y/+z active edges."""
    if g.grid_class != GRID_CLASS_SDF:
        raise MetricError("surface extraction requires an SDF grid")
    coords, values = g.active_voxels()
    pts: List[np.ndarray] = []
    for axis in range(3):
        nb = coords.copy()
        nb[:, axis] += 1
        nv, na = g.get_values(nb)
        both = na
        v0 = values.astype(np.float64)
        v1 = nv.astype(np.float64)
        crossing = both & (v0 * v1 < 0.0)
        if crossing.any():
            t = v0[crossing] / (v0[crossing] - v1[crossing])
            p = coords[crossing].astype(np.float64)
            p[:, axis] += t
            pts.append(p)
        zero = both & (v0 == 0.0)
        if zero.any():
            pts.append(coords[zero].astype(np.float64))
    if not pts:
        logger.warning("no zero crossings found; surface sample set is empty")
        return SurfaceSamples(np.empty((0, 3), dtype=np.float64))
    allp = np.concatenate(pts, axis=0)
    return SurfaceSamples(np.unique(allp, axis=0))


def sample_trilinear(g: VdbGrid, points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of grid values at continuous index points.

    Corner values come from ordinary lookups, so out-of-band corners
    contribute their tile or background values.
    """
    p = np.asarray(points, dtype=np.float64)
    base = np.floor(p).astype(np.int64)
    frac = p - base
    out = np.zeros(p.shape[0], dtype=np.float64)
    for corner in range(8):
        offs = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1],
                        dtype=np.int64)
        vals, _ = g.get_values(base + offs)
        w = np.ones(p.shape[0], dtype=np.float64)
        for axis in range(3):
            w *= frac[:, axis] if offs[axis] else 1.0 - frac[:, axis]
        out += w * vals.astype(np.float64)
    return out


def mcd(a: VdbGrid, b: VdbGrid) -> float:
    """Symmetric mean |SDF| of each grid sampled at the other's surface.

    Returned in world length units; divide by the voxel size for voxels.
    """
    _check_comparable(a, b)
    sa = extract_surface_samples(a)
    sb = extract_surface_samples(b)
    if len(sa) == 0 or len(sb) == 0:
        raise MetricError("mcd requires surface samples on both grids")
    d_ab = np.abs(sample_trilinear(b, sa.points))
    d_ba = np.abs(sample_trilinear(a, sb.points))
    return float(0.5 * d_ab.mean() + 0.5 * d_ba.mean())


def compression_ratio(c: NeuralGridContainer, g: VdbGrid,
                      mode: str = RATIO_RAW, lossless_stage: bool = False) -> float:
    """Grid-to-container size ratio.

    ``rawPayload`` compares the grid's documented-layout byte total against
    the container payload at its stored weight precision; ``filePayload``
    compares serialized file sizes (the container optionally after its
    lossless stage).
    """
    if mode == RATIO_RAW:
        return g.topology_stats().total_bytes / c.payload_bytes()
    if mode == RATIO_FILE:
        grid_bytes = len(serialize_grid(g))
        file_bytes = len(serialize_container(c, lossless_stage=lossless_stage))
        return grid_bytes / file_bytes
    raise MetricError(f"unknown compression ratio mode {mode!r}")
