"""Reconstruction: offline full decode and the random-access hybrid grid.

Both decode paths share one topology pass: level-1 node origins come from
the explicit level-2 child masks, every slot is classified by the blended
ternary classifier (argmax) and corrected with level-1 patches; child slots
get leaves whose active bits come from the blended binary classifier
(sigmoid > 0.5) plus level-0 patches.  The full decode then evaluates the
voxel regressor at reconstructed-active voxels only; the hybrid grid keeps
the regressors and defers leaf values to query time.

Query points that land outside every gate return the background, matching
the tree-masking semantics of sparse-field training (the regressor is never
asked to extrapolate).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .container import (
    L1_CLASS_ACTIVE_TILE,
    L1_CLASS_CHILD,
    L1_CLASS_INACTIVE_TILE,
    NeuralGridContainer,
)
from .errors import SvcodecError
from .grid import (
    InternalNode,
    L1_LOCAL_COORDS,
    L1_LOG2,
    L1_SIZE,
    L2_LOG2,
    LEAF_LOCAL_COORDS,
    LEAF_SIZE,
    LEAF_SPAN,
    LeafNode,
    TopologyStats,
    VdbGrid,
    coord_to_keys,
)
from .inference import blended_l0_probs, blended_l1_probs, blended_values

_SLOT_CENTER_OFFSETS = (L1_LOCAL_COORDS * LEAF_SPAN + LEAF_SPAN / 2.0).astype(np.float64)
_VOXEL_CENTER_OFFSETS = (LEAF_LOCAL_COORDS + 0.5).astype(np.float64)
L1_SPAN_MASK = np.int64(128 - 1)
LEAF_SPAN_MASK = np.int64(LEAF_SPAN - 1)


def _rebuild_upper_levels(c: NeuralGridContainer) -> Tuple[VdbGrid, List[InternalNode]]:
    """Explicit root/level-2 reconstruction plus empty level-1 shells."""
    meta = c.grid_meta
    grid = VdbGrid(meta.background, meta.grid_class, meta.voxel_size, meta.half_width)
    grid.root_tiles = dict(c.upper_tree.root_tiles)
    by_origin = {}
    for rec in c.upper_tree.l2_nodes:
        node2 = InternalNode(rec.origin, L2_LOG2, meta.background)
        node2.child_mask.bits[:] = rec.child_mask.bits
        node2.active_mask.bits[:] = rec.active_mask.bits
        for idx, value in rec.tiles.items():
            node2.tiles[idx] = value
        grid.root[rec.origin] = node2
        by_origin[rec.origin] = node2
    expected = sum(int(np.count_nonzero(n.child_mask.bits)) for n in grid.root.values())
    if expected != len(c.upper_tree.l1_origins):
        raise SvcodecError(
            f"corrupt container: {len(c.upper_tree.l1_origins)} level-1 origins "
            f"vs {expected} level-2 child bits")
    l1_nodes = []
    for origin in sorted(c.upper_tree.l1_origins):
        root, idx2, _, _ = coord_to_keys(origin)
        node2 = by_origin.get(root)
        if node2 is None or not node2.child_mask.bits[idx2]:
            raise SvcodecError(f"corrupt container: level-1 origin {origin} "
                               "has no level-2 child bit")
        node1 = InternalNode(origin, L1_LOG2, meta.background)
        node2.children[idx2] = node1
        l1_nodes.append(node1)
    return grid, l1_nodes


def _patch_maps(c: NeuralGridContainer):
    l1_map: Dict[Tuple[int, int, int], int] = {}
    l0_map: Dict[Tuple[int, int, int], Tuple[bool, float]] = {}
    for e in c.experts:
        for origin, cls in e.patches.l1:
            l1_map[origin] = cls
        for coord, active, value in e.patches.l0:
            l0_map[coord] = (active, value)
    return l1_map, l0_map


@dataclass
class _Recon:
    grid: VdbGrid
    regressor_evaluations: int = 0


def _reconstruct(c: NeuralGridContainer, materialize_values: bool) -> _Recon:
    grid, l1_nodes = _rebuild_upper_levels(c)
    l1_map, l0_map = _patch_maps(c)
    meta = c.grid_meta
    scale = np.float32(meta.value_scale)
    recon = _Recon(grid=grid)
    # classify all level-1 slots of all nodes in one batched pass
    if l1_nodes:
        node_index = {n.origin: ni for ni, n in enumerate(l1_nodes)}
        origins = np.asarray([n.origin for n in l1_nodes], dtype=np.int64)
        centers = (origins[:, None, :] + _SLOT_CENTER_OFFSETS[None, :, :]).reshape(-1, 3)
        probs, covered = blended_l1_probs(c.layout, c.experts, centers)
        classes = np.where(covered, probs.argmax(axis=1), L1_CLASS_INACTIVE_TILE)
        classes = classes.reshape(len(l1_nodes), L1_SIZE)
        slot_origins = (origins[:, None, :]
                        + (L1_LOCAL_COORDS * LEAF_SPAN)[None, :, :])
        for key, cls in l1_map.items():
            parent = tuple(int(v) & ~(L1_SPAN_MASK) for v in key)
            ni = node_index.get(parent)
            if ni is None:
                raise SvcodecError(f"corrupt container: level-1 patch {key} "
                                   "outside every level-1 node")
            _, _, idx1, _ = coord_to_keys(key)
            classes[ni, idx1] = cls
        # explicit far-field values for inactive tiles (signed interiors)
        for origin, tiles in c.upper_tree.l1_tiles.items():
            ni = node_index.get(origin)
            if ni is None:
                raise SvcodecError(f"corrupt container: tile record for "
                                   f"unknown level-1 node {origin}")
            node1 = l1_nodes[ni]
            for idx, value in tiles.items():
                if classes[ni, idx] == L1_CLASS_INACTIVE_TILE:
                    node1.tiles[idx] = value
        # tile values for active-tile slots
        tile_rows = np.argwhere(classes == L1_CLASS_ACTIVE_TILE)
        if tile_rows.size:
            tcenters = (origins[tile_rows[:, 0]]
                        + _SLOT_CENTER_OFFSETS[tile_rows[:, 1]])
            tvals, tcov = blended_values(c.layout, c.experts, tcenters, "tile")
            tvals = np.where(tcov, tvals * float(scale), meta.background)
            for (ni, si), tv in zip(tile_rows, tvals):
                node1 = l1_nodes[ni]
                node1.active_mask.set(int(si), True)
                node1.tiles[int(si)] = tv
        # leaves under child slots
        leaf_parents: List[Tuple[InternalNode, int, np.ndarray]] = []
        for ni, node1 in enumerate(l1_nodes):
            for si in np.flatnonzero(classes[ni] == L1_CLASS_CHILD):
                leaf_parents.append((node1, int(si), slot_origins[ni, si]))
        recon.regressor_evaluations += _fill_leaves(
            c, grid, leaf_parents, l0_map, materialize_values)
    return recon


def _fill_leaves(c: NeuralGridContainer, grid: VdbGrid, leaf_parents,
                 l0_map, materialize_values: bool) -> int:
    if not leaf_parents:
        return 0
    meta = c.grid_meta
    scale = float(meta.value_scale)
    origins = np.asarray([org for _, _, org in leaf_parents], dtype=np.int64)
    centers = (origins[:, None, :] + _VOXEL_CENTER_OFFSETS[None, :, :]).reshape(-1, 3)
    probs, covered = blended_l0_probs(c.layout, c.experts, centers)
    active = (covered & (probs > 0.5)).reshape(len(leaf_parents), LEAF_SIZE)
    coords = (origins[:, None, :] + LEAF_LOCAL_COORDS[None, :, :])
    # apply level-0 patches
    leaf_index = {tuple(int(v) for v in org): li for li, org in enumerate(origins)}
    patch_values: Dict[Tuple[int, int], float] = {}
    for key, (pactive, pvalue) in l0_map.items():
        base = tuple(int(v) & ~int(LEAF_SPAN_MASK) for v in key)
        li = leaf_index.get(base)
        if li is None:
            raise SvcodecError(f"corrupt container: level-0 patch {key} "
                               "outside every reconstructed leaf")
        _, _, _, idx0 = coord_to_keys(key)
        active[li, idx0] = pactive
        if pactive:
            patch_values[(li, idx0)] = pvalue
    evaluations = 0
    values = None
    if materialize_values:
        values = np.full((len(leaf_parents), LEAF_SIZE), meta.background,
                         dtype=np.float32)
        rows, cols = np.nonzero(active)
        if rows.size:
            vcenters = coords[rows, cols].astype(np.float64) + 0.5
            vals, vcov = blended_values(c.layout, c.experts, vcenters, "voxel")
            evaluations += int(rows.size)
            if c.grid_meta.grid_class == "sdf":
                # the representation is band-limited; clip overshoot
                vals = np.clip(vals, -1.0, 1.0)
            out = np.where(vcov, vals * scale, meta.background).astype(np.float32)
            values[rows, cols] = out
        for (li, idx0), pv in patch_values.items():
            values[li, idx0] = pv
    fill = c.upper_tree.leaf_negative_fill
    for li, (node1, si, org) in enumerate(leaf_parents):
        origin = tuple(int(v) for v in org)
        leaf = LeafNode(origin, meta.background)
        leaf.active.bits[:] = active[li]
        if values is not None:
            leaf.values[:] = values[li]
        neg = fill.get(origin)
        if neg is not None:
            # explicit far-field signs: inactive voxels on the interior side
            restore = neg & ~leaf.active.bits
            leaf.values[restore] = -np.float32(meta.value_scale)
        node1.children[si] = leaf
        node1.child_mask.set(si, True)
    return evaluations


def decode_full(c: NeuralGridContainer) -> VdbGrid:
    """Sequential reconstruction of the complete explicit grid."""
    recon = _reconstruct(c, materialize_values=True)
    return recon.grid


@dataclass
class HybridGrid:
    """Explicit topology and tiles with neural leaf values.

    Random access is a two-step process: the explicit tree resolves tiles and
    inactive voxels immediately; only coordinates landing on active leaf
    voxels reach the voxel regressors.  ``regressor_evaluations`` counts the
    points actually evaluated (instrumentation for the no-extrapolation
    guarantee).
    """

    container: NeuralGridContainer
    topology: VdbGrid
    regressor_evaluations: int = 0
    _patched_values: Optional[Dict[Tuple[int, int, int], float]] = None

    def topology_stats(self) -> TopologyStats:
        return self.topology.topology_stats(include_leaf_values=False)

    def query(self, coords: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Batched (value, active) lookups at integer coordinates."""
        coords = np.asarray(coords, dtype=np.int64)
        values, active, kind = self.topology.get_values(coords, with_kind=True)
        neural_rows = np.flatnonzero(active & (kind == 2))
        if neural_rows.size:
            meta = self.container.grid_meta
            centers = coords[neural_rows].astype(np.float64) + 0.5
            vals, covered = blended_values(self.container.layout,
                                           self.container.experts, centers, "voxel")
            self.regressor_evaluations += int(neural_rows.size)
            if meta.grid_class == "sdf":
                vals = np.clip(vals, -1.0, 1.0)
            out = np.where(covered, vals * float(meta.value_scale),
                           meta.background).astype(np.float32)
            values[neural_rows] = out
            # patched voxels carry their exact stored value
            if self._patched_values is None:
                _, l0_map = _patch_maps(self.container)
                self._patched_values = {k: v for k, (a, v) in l0_map.items() if a}
            if self._patched_values:
                for row in neural_rows:
                    rec = self._patched_values.get(tuple(int(v) for v in coords[row]))
                    if rec is not None:
                        values[row] = rec
        return values, active


def make_hybrid(c: NeuralGridContainer) -> HybridGrid:
    """Topology-only reconstruction retaining the voxel regressors."""
    recon = _reconstruct(c, materialize_values=False)
    return HybridGrid(container=c, topology=recon.grid)


def topology_equal(a: VdbGrid, b: VdbGrid) -> bool:
    """True when every mask bit and tile/root layout matches between grids."""
    if sorted(a.root) != sorted(b.root) or a.root_tiles != b.root_tiles:
        return False
    for key, na in a.root.items():
        nb = b.root[key]
        if not (np.array_equal(na.child_mask.bits, nb.child_mask.bits)
                and np.array_equal(na.active_mask.bits, nb.active_mask.bits)):
            return False
        for idx2, ca in na.children.items():
            cb = nb.children[idx2]
            if not (np.array_equal(ca.child_mask.bits, cb.child_mask.bits)
                    and np.array_equal(ca.active_mask.bits, cb.active_mask.bits)):
                return False
            for idx1, la in ca.children.items():
                lb = cb.children[idx1]
                if not np.array_equal(la.active.bits, lb.active.bits):
                    return False
    return True


def decode_report(c: NeuralGridContainer) -> Dict[str, int]:
    """Decode once and report instrumentation counters (tests, stats)."""
    recon = _reconstruct(c, materialize_values=True)
    return {
        "regressor_evaluations": recon.regressor_evaluations,
        "active_voxels": recon.grid.active_voxel_count(),
    }
