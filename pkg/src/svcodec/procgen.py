"""Procedural ground-truth volumes: banded SDFs and fBm density fields.

All generators are pure functions of their spec (including the seed), so
every experiment is reproducible without external assets.  Narrow-band SDF
grids follow the usual conventions: voxels with ``|d| < halfWidth*dx`` are
active and store the exact distance; inactive voxels and tiles store the
band limit ``+-halfWidth*dx`` signed by region, with the positive (exterior)
value doubling as the grid background.

The fBm field is value noise with quintic interpolation.  The exact formula,
kept deliberately simple so tests can re-evaluate it independently:

* lattice value at integer point (i, j, k) with seed s:
  ``h = (i*K1 ^ j*K2 ^ k*K3 ^ s*K4)`` mixed with the splitmix64 finalizer,
  mapped to [0, 1) via the top 24 bits,
* one octave interpolates the 8 surrounding lattice values with the quintic
  weight ``t^3 (t (6t - 15) + 10)``,
* octave o uses frequency ``baseFrequency * lacunarity^o``, amplitude
  ``gain^o`` and seed ``s ^ (o * K5)``; the sum is normalized by the total
  amplitude and clamped to [0, 1].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import GenerationError
from .grid import (
    GRID_CLASS_FOG,
    GRID_CLASS_SDF,
    GridBuilder,
    L1_SPAN,
    LEAF_LOCAL_COORDS,
    LEAF_SPAN,
    VdbGrid,
)

logger = logging.getLogger(__name__)

K1 = np.uint64(0x9E3779B97F4A7C15)
K2 = np.uint64(0xBF58476D1CE4E5B9)
K3 = np.uint64(0x94D049BB133111EB)
K4 = np.uint64(0xD6E8FEB86659FD93)
K5 = np.uint64(0xA24BAED4963EE407)


@dataclass
class SphereSpec:
    """World-space sphere with a narrow-band sampling contract."""

    center: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 40.0
    voxel_size: float = 1.0
    half_width: float = 3.0

    def validate(self) -> None:
        if self.radius <= 0:
            raise GenerationError(f"degenerate sphere radius {self.radius}")
        if self.radius <= 2 * self.half_width * self.voxel_size:
            raise GenerationError(
                "sphere radius must exceed twice the band width "
                f"({self.radius} <= {2 * self.half_width * self.voxel_size})"
            )


@dataclass
class FbmSpec:
    """Seeded fBm density field over an index-space box.

    ``domain`` is (lo, hi) with inclusive lo and exclusive hi per axis.
    """

    octaves: int = 4
    lacunarity: float = 2.0
    gain: float = 0.5
    base_frequency: float = 0.05
    seed: int = 0
    domain: Tuple[Tuple[int, int, int], Tuple[int, int, int]] = ((0, 0, 0), (64, 64, 64))
    threshold: float = 0.5
    voxel_size: float = 1.0

    def validate(self) -> None:
        if self.octaves < 1:
            raise GenerationError("octaves must be >= 1")
        lo, hi = self.domain
        if any(h <= l for l, h in zip(lo, hi)):
            raise GenerationError(f"empty fBm domain {self.domain}")


# -- value-noise fBm ----------------------------------------------------------


def _lattice_values(ix: np.ndarray, iy: np.ndarray, iz: np.ndarray,
                    seed: np.uint64) -> np.ndarray:
    """Deterministic lattice hash mapped to [0, 1)."""
    with np.errstate(over="ignore"):
        h = (
            ix.astype(np.uint64) * K1
            ^ iy.astype(np.uint64) * K2
            ^ iz.astype(np.uint64) * K3
            ^ np.uint64(seed) * K4
        )
        h ^= h >> np.uint64(30)
        h *= K2
        h ^= h >> np.uint64(27)
        h *= K3
        h ^= h >> np.uint64(31)
    return (h >> np.uint64(40)).astype(np.float64) * (1.0 / (1 << 24))


def _quintic(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def value_noise(points: np.ndarray, seed: int) -> np.ndarray:
    """One octave of value noise at (n, 3) float points."""
    p = np.asarray(points, dtype=np.float64)
    i = np.floor(p).astype(np.int64)
    f = p - i
    w = _quintic(f)
    ix, iy, iz = i[:, 0], i[:, 1], i[:, 2]
    s = np.uint64(seed)
    c000 = _lattice_values(ix, iy, iz, s)
    c001 = _lattice_values(ix, iy, iz + 1, s)
    c010 = _lattice_values(ix, iy + 1, iz, s)
    c011 = _lattice_values(ix, iy + 1, iz + 1, s)
    c100 = _lattice_values(ix + 1, iy, iz, s)
    c101 = _lattice_values(ix + 1, iy, iz + 1, s)
    c110 = _lattice_values(ix + 1, iy + 1, iz, s)
    c111 = _lattice_values(ix + 1, iy + 1, iz + 1, s)
    wx, wy, wz = w[:, 0], w[:, 1], w[:, 2]
    c00 = c000 + wz * (c001 - c000)
    c01 = c010 + wz * (c011 - c010)
    c10 = c100 + wz * (c101 - c100)
    c11 = c110 + wz * (c111 - c110)
    c0 = c00 + wy * (c01 - c00)
    c1 = c10 + wy * (c11 - c10)
    return c0 + wx * (c1 - c0)


def fbm(points: np.ndarray, spec: FbmSpec) -> np.ndarray:
    """Normalized fBm in [0, 1] at (n, 3) world-space points."""
    p = np.asarray(points, dtype=np.float64)
    total = np.zeros(p.shape[0], dtype=np.float64)
    amp = 1.0
    freq = spec.base_frequency
    norm = 0.0
    mask64 = (1 << 64) - 1
    for octave in range(spec.octaves):
        octave_seed = (spec.seed ^ ((octave * int(K5)) & mask64)) & mask64
        total += amp * value_noise(p * freq, octave_seed)
        norm += amp
        amp *= spec.gain
        freq *= spec.lacunarity
    return np.clip(total / norm, 0.0, 1.0)


# -- banded SDF construction --------------------------------------------------


def _leaf_block_origins(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Origins of all leaf blocks covering the inclusive index box [lo, hi]."""
    lo = np.asarray(lo, dtype=np.int64) & ~(LEAF_SPAN - 1)
    hi = np.asarray(hi, dtype=np.int64)
    axes = [np.arange(lo[a], hi[a] + 1, LEAF_SPAN, dtype=np.int64) for a in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([v.ravel() for v in g], axis=1)


def _banded_sdf_grid(distance, lo_idx, hi_idx, voxel_size: float,
                     half_width: float) -> VdbGrid:
    """Build a narrow-band SDF grid from a vectorized distance function.

    ``distance`` maps (n, 3) world positions to signed world distances.
    Assumes half_width >= 1 so the band cannot slip between voxel centers.
    """
    band = half_width * voxel_size
    builder = GridBuilder(band, GRID_CLASS_SDF, voxel_size, half_width)
    origins = _leaf_block_origins(lo_idx, hi_idx)
    chunk = 512
    for s in range(0, len(origins), chunk):
        blk = origins[s:s + chunk]
        coords = (blk[:, None, :] + LEAF_LOCAL_COORDS[None, :, :]).astype(np.float64)
        d = distance(coords.reshape(-1, 3) * voxel_size).reshape(len(blk), -1)
        active = np.abs(d) < band
        keep = active.any(axis=1)
        for bi in np.flatnonzero(keep):
            vals = np.where(active[bi], d[bi], np.where(d[bi] < 0, -band, band))
            builder.add_leaf_block(tuple(int(v) for v in blk[bi]),
                                   vals.astype(np.float32), active[bi])
    _fill_interior_tiles(builder, distance, voxel_size, band)
    grid = builder.finalize()
    return grid


def _fill_interior_tiles(builder: GridBuilder, distance, voxel_size: float,
                         band: float) -> None:
    """Mark non-leaf slots of allocated nodes with signed band tiles.

    Exterior slots keep the background (+band) and are not stored; interior
    slots get an inactive -band tile so lookups deep inside the object report
    the correct sign.
    """
    grid = builder.grid
    for key, node2 in list(grid.root.items()):
        empty2 = ~node2.child_mask.bits & ~node2.active_mask.bits
        idxs = np.flatnonzero(empty2)
        if idxs.size:
            centers = np.array(
                [node2.slot_origin(int(i)) for i in idxs], dtype=np.float64
            ) + (L1_SPAN - 1) / 2.0
            d = distance(centers * voxel_size)
            for i, di in zip(idxs, d):
                if di < 0:
                    builder.add_tile(node2.slot_origin(int(i)), -band, False, L1_SPAN)
        for idx2 in node2.child_mask.indices():
            node1 = node2.children[int(idx2)]
            empty1 = ~node1.child_mask.bits & ~node1.active_mask.bits
            idxs1 = np.flatnonzero(empty1)
            if not idxs1.size:
                continue
            centers = np.array(
                [node1.slot_origin(int(i)) for i in idxs1], dtype=np.float64
            ) + (LEAF_SPAN - 1) / 2.0
            d = distance(centers * voxel_size)
            for i, di in zip(idxs1, d):
                if di < 0:
                    builder.add_tile(node1.slot_origin(int(i)), -band, False, LEAF_SPAN)


def gen_sphere_sdf(spec: SphereSpec) -> VdbGrid:
    """Narrow-band SDF of a sphere; active voxels sandwich the surface."""
    spec.validate()
    center = np.asarray(spec.center, dtype=np.float64)
    dx = spec.voxel_size

    def distance(points: np.ndarray) -> np.ndarray:
        return np.linalg.norm(points - center, axis=1) - spec.radius

    reach = spec.radius / dx + spec.half_width + 1
    lo = np.floor(center / dx - reach).astype(np.int64)
    hi = np.ceil(center / dx + reach).astype(np.int64)
    return _banded_sdf_grid(distance, lo, hi, dx, spec.half_width)


def gen_torus_sdf(major_radius: float, minor_radius: float, voxel_size: float,
                  half_width: float,
                  center: Sequence[float] = (0.0, 0.0, 0.0)) -> VdbGrid:
    """Narrow-band SDF of a z-axis torus (second topology for tests)."""
    if major_radius <= 0 or minor_radius <= 0:
        raise GenerationError("degenerate torus radii")
    if minor_radius <= 2 * half_width * voxel_size:
        raise GenerationError("torus minor radius must exceed twice the band width")
    c = np.asarray(center, dtype=np.float64)

    def distance(points: np.ndarray) -> np.ndarray:
        p = points - c
        q = np.hypot(p[:, 0], p[:, 1]) - major_radius
        return np.hypot(q, p[:, 2]) - minor_radius

    reach = (major_radius + minor_radius) / voxel_size + half_width + 1
    zreach = minor_radius / voxel_size + half_width + 1
    lo = np.floor(c / voxel_size - (reach, reach, zreach)).astype(np.int64)
    hi = np.ceil(c / voxel_size + (reach, reach, zreach)).astype(np.int64)
    return _banded_sdf_grid(distance, lo, hi, voxel_size, half_width)


def gen_fbm_density(spec: FbmSpec) -> VdbGrid:
    """Thresholded fBm density (FOG) grid; deterministic for a fixed seed."""
    spec.validate()
    lo = np.asarray(spec.domain[0], dtype=np.int64)
    hi = np.asarray(spec.domain[1], dtype=np.int64) - 1
    builder = GridBuilder(0.0, GRID_CLASS_FOG, spec.voxel_size, 0.0)
    origins = _leaf_block_origins(lo, hi)
    n_active = 0
    chunk = 512
    for s in range(0, len(origins), chunk):
        blk = origins[s:s + chunk]
        coords = blk[:, None, :] + LEAF_LOCAL_COORDS[None, :, :]
        inside = np.all((coords >= lo) & (coords <= hi), axis=2)
        vals = fbm(coords.reshape(-1, 3).astype(np.float64) * spec.voxel_size,
                   spec).reshape(len(blk), -1)
        active = inside & (vals > spec.threshold)
        keep = active.any(axis=1)
        n_active += int(active.sum())
        for bi in np.flatnonzero(keep):
            builder.add_leaf_block(
                tuple(int(v) for v in blk[bi]),
                np.where(active[bi], vals[bi], 0.0).astype(np.float32),
                active[bi],
            )
    if n_active == 0:
        logger.warning("fBm threshold %.3f produced an empty grid", spec.threshold)
    return builder.finalize()


def gen_moving_sphere_sequence(spec: SphereSpec, frames: int,
                               velocity: Sequence[float]) -> List[VdbGrid]:
    """Analytic moving-sphere sequence; frame t translates the center by t*v."""
    if frames < 2:
        raise GenerationError("a sequence needs at least 2 frames")
    vel = np.asarray(velocity, dtype=np.float64)
    out = []
    for t in range(frames):
        frame_spec = SphereSpec(
            center=tuple(np.asarray(spec.center, dtype=np.float64) + t * vel),
            radius=spec.radius,
            voxel_size=spec.voxel_size,
            half_width=spec.half_width,
        )
        out.append(gen_sphere_sdf(frame_spec))
    return out
