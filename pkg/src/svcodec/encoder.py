"""Training pipeline: a VdbGrid in, a NeuralGridContainer out.

Per subdomain, four networks can be trained: a ternary level-1 slot
classifier (child / active tile / inactive tile, cross-entropy), a binary
leaf-voxel classifier (BCE over voxels inside child slots only), a tile
value regressor (only when active level-1 tiles exist) and the voxel value
regressor (MSE over active voxels only).  SDF targets are scaled by
1/(halfWidth*dx) into [-1, 1]; density targets keep their native [0, 1]
range.  After training, classifiers are evaluated exhaustively through the
same gate-blended path the decoder uses and every disagreement becomes an
explicit patch, subject to the significance filter when strict topology is
off.

Level-1 classifiers train on all slots of their nodes every epoch; the
level-0 classifier and the regressors draw uniform batches with replacement
(the working-subset scheme when sample_interval > 1).  Early stopping:
regressors stop when the epoch loss drops below 1e-6; classifiers stop at a
coarser loss target because every residual error is patched anyway and the
patch list converges long before the loss does.

Expert network inputs are cell centers mapped into [0, 1]^3 by a per-expert
isotropic affine map stored in the container.  The map centers the expert's
level-1 content box at 0.5 and scales it to a fixed fraction of the unit
cube, which keeps the effective feature-map bandwidth at desk scale close to
the regime the hyperparameter table was tuned for; normalizing over the full
subdomain box would squeeze a small volume into a corner of the input domain
and measurably slows convergence.

Determinism: every stream of randomness derives from (config seed, expert
id, network tag), so multi-worker encoding is bit-identical to single-worker
expert by expert.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import TrainConfig
from .container import (
    EncodedSubdomain,
    GridMeta,
    L1_CLASS_ACTIVE_TILE,
    L1_CLASS_CHILD,
    L1_CLASS_INACTIVE_TILE,
    L2NodeRecord,
    NetRecord,
    NeuralGridContainer,
    PatchList,
    UpperTree,
)
from .errors import EncodeError
from .grid import (
    GRID_CLASS_SDF,
    L1_LOCAL_COORDS,
    L1_SIZE,
    L1_SPAN,
    L2_SIZE,
    LEAF_LOCAL_COORDS,
    LEAF_SIZE,
    LEAF_SPAN,
    NodeMask,
    VdbGrid,
)
from .inference import blended_l0_probs, blended_l1_probs
from .neural import (
    Activation,
    AdamState,
    Batch,
    FourierFeatures,
    FusedNet,
    LrSchedule,
    TrainWorkspace,
    fused_step,
    init_mlp,
    lr_at,
)
from .partition import SubdomainLayout, Subdomain, decompose

logger = logging.getLogger(__name__)

NET_TAGS = {"l1": 0, "tile": 1, "l0": 2, "voxel": 3}

# Fraction of the unit input cube the expert's content box is scaled to.
NORM_CONTENT_FRACTION = 0.6

# Early-stop loss targets; residual classifier errors become patches.
REGRESSOR_LOSS_TARGET = 1e-6
CLASSIFIER_LOSS_TARGET = 1e-2

# (0.5 * dx for SDF, 0.01 for FOG) when the config leaves the threshold unset.
SDF_SIGNIFICANCE_FACTOR = 0.5
FOG_SIGNIFICANCE_DEFAULT = 0.01

_SLOT_CENTER_OFFSETS = (L1_LOCAL_COORDS * LEAF_SPAN + LEAF_SPAN / 2.0).astype(np.float64)
_VOXEL_CENTER_OFFSETS = (LEAF_LOCAL_COORDS + 0.5).astype(np.float64)


def _stable_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(tuple(int(p) for p in parts)).generate_state(1)[0])


# -- grid flattening -------------------------------------------------------------


@dataclass
class _GridArrays:
    """Array view of the two neuralized tree levels."""

    leaf_origins: np.ndarray       # (nl, 3) int64
    leaf_active: np.ndarray        # (nl, 512) bool
    leaf_values: np.ndarray        # (nl, 512) float32
    l1_origins: np.ndarray         # (n1, 3) int64
    l1_child: np.ndarray           # (n1, 4096) bool
    l1_active: np.ndarray          # (n1, 4096) bool
    l1_tiles: np.ndarray           # (n1, 4096) float32


def _flatten_grid(grid: VdbGrid) -> _GridArrays:
    leaf_origins, leaf_active, leaf_values = [], [], []
    l1_origins, l1_child, l1_active, l1_tiles = [], [], [], []
    for key in sorted(grid.root):
        node2 = grid.root[key]
        for idx2 in node2.child_mask.indices():
            node1 = node2.children[int(idx2)]
            l1_origins.append(node1.origin)
            l1_child.append(node1.child_mask.bits.copy())
            l1_active.append(node1.active_mask.bits.copy())
            l1_tiles.append(node1.tiles.copy())
            for idx1 in node1.child_mask.indices():
                leaf = node1.children[int(idx1)]
                leaf_origins.append(leaf.origin)
                leaf_active.append(leaf.active.bits.copy())
                leaf_values.append(leaf.values.copy())

    def stack(rows, dtype, width):
        if rows:
            return np.asarray(rows, dtype=dtype)
        return np.empty((0, width), dtype=dtype)

    return _GridArrays(
        leaf_origins=stack(leaf_origins, np.int64, 3),
        leaf_active=stack(leaf_active, bool, LEAF_SIZE),
        leaf_values=stack(leaf_values, np.float32, LEAF_SIZE),
        l1_origins=stack(l1_origins, np.int64, 3),
        l1_child=stack(l1_child, bool, L1_SIZE),
        l1_active=stack(l1_active, bool, L1_SIZE),
        l1_tiles=stack(l1_tiles, np.float32, L1_SIZE),
    )


def _boxes_intersect(origins: np.ndarray, span: int, lo: np.ndarray,
                     hi: np.ndarray) -> np.ndarray:
    """Rows whose [origin, origin+span) box intersects [lo, hi)."""
    if origins.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    return np.all((origins + span > lo) & (origins < hi), axis=1)


@dataclass
class _ExpertData:
    """Per-expert training sets in normalized input space."""

    sub: Subdomain
    norm_origin: np.ndarray
    norm_scale: float
    l1_inputs: Optional[np.ndarray] = None
    l1_labels: Optional[np.ndarray] = None
    tile_inputs: Optional[np.ndarray] = None
    tile_targets: Optional[np.ndarray] = None
    l0_inputs: Optional[np.ndarray] = None
    l0_labels: Optional[np.ndarray] = None
    vox_inputs: Optional[np.ndarray] = None
    vox_targets: Optional[np.ndarray] = None


def _expert_norm(sub: Subdomain, arrays: _GridArrays) -> Tuple[np.ndarray, float]:
    """Isotropic input map: content box center -> 0.5, extent -> fraction."""
    lo = sub.expanded_lo().astype(np.float64)
    hi = sub.expanded_hi().astype(np.float64)
    sel = _boxes_intersect(arrays.l1_origins, L1_SPAN, sub.expanded_lo(), sub.expanded_hi())
    if sel.any():
        n_lo = arrays.l1_origins[sel].min(axis=0).astype(np.float64)
        n_hi = (arrays.l1_origins[sel] + L1_SPAN).max(axis=0).astype(np.float64)
        lo = np.maximum(lo, n_lo)
        hi = np.minimum(hi, n_hi)
    extent = float((hi - lo).max())
    scale = extent / NORM_CONTENT_FRACTION
    center = (lo + hi) / 2.0
    return center - scale / 2.0, scale


def _gather_expert_data(grid: VdbGrid, sub: Subdomain, arrays: _GridArrays,
                        value_scale: float,
                        norm: Optional[Tuple[np.ndarray, float]] = None
                        ) -> _ExpertData:
    lo, hi = sub.expanded_lo(), sub.expanded_hi()
    norm_origin, norm_scale = _expert_norm(sub, arrays) if norm is None else norm
    data = _ExpertData(sub=sub, norm_origin=norm_origin, norm_scale=norm_scale)

    def norm(centers: np.ndarray) -> np.ndarray:
        return ((centers - norm_origin) / norm_scale).astype(np.float32)

    sel1 = _boxes_intersect(arrays.l1_origins, L1_SPAN, lo, hi)
    if sel1.any():
        origins = arrays.l1_origins[sel1]
        centers = (origins[:, None, :] + _SLOT_CENTER_OFFSETS[None, :, :]).reshape(-1, 3)
        child = arrays.l1_child[sel1].reshape(-1)
        active = arrays.l1_active[sel1].reshape(-1)
        labels = np.full(child.shape, L1_CLASS_INACTIVE_TILE, dtype=np.int64)
        labels[active & ~child] = L1_CLASS_ACTIVE_TILE
        labels[child] = L1_CLASS_CHILD
        data.l1_inputs = norm(centers)
        data.l1_labels = labels
        tile_sel = active & ~child
        if tile_sel.any():
            data.tile_inputs = data.l1_inputs[tile_sel]
            data.tile_targets = (arrays.l1_tiles[sel1].reshape(-1)[tile_sel]
                                 / value_scale).astype(np.float32)
    sel0 = _boxes_intersect(arrays.leaf_origins, LEAF_SPAN, lo, hi)
    if sel0.any():
        origins = arrays.leaf_origins[sel0]
        centers = (origins[:, None, :] + _VOXEL_CENTER_OFFSETS[None, :, :]).reshape(-1, 3)
        active = arrays.leaf_active[sel0].reshape(-1)
        data.l0_inputs = norm(centers)
        data.l0_labels = active.astype(np.float32)
        if active.any():
            data.vox_inputs = data.l0_inputs[active]
            data.vox_targets = (arrays.leaf_values[sel0].reshape(-1)[active]
                                / value_scale).astype(np.float32)
    return data


# -- sampling ---------------------------------------------------------------------


class Sampler:
    """Uniform-with-replacement batches with working-subset semantics.

    With sample_interval > 1, a working subset of interval*batch indices is
    drawn once per interval and per-epoch batches come from it.  All draws
    are pure functions of (seed, epoch), so resumption order never matters.
    """

    def __init__(self, n: int, batch_size: int, sample_interval: int, seed: int):
        self.n = n
        self.batch_size = batch_size
        self.interval = sample_interval
        self.seed = seed
        self._subset: Optional[np.ndarray] = None
        self._chunk = -1

    def indices(self, epoch: int) -> np.ndarray:
        if self.interval <= 1:
            rng = np.random.default_rng(np.random.SeedSequence((self.seed, 0, epoch)))
            return rng.integers(0, self.n, self.batch_size)
        chunk = epoch // self.interval
        if chunk != self._chunk:
            rng = np.random.default_rng(np.random.SeedSequence((self.seed, 1, chunk)))
            self._subset = rng.integers(0, self.n, self.interval * self.batch_size)
            self._chunk = chunk
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 2, epoch)))
        return self._subset[rng.integers(0, self._subset.size, self.batch_size)]


def sample_batch(grid: VdbGrid, layout: SubdomainLayout, rng: np.random.Generator,
                 cfg: TrainConfig, epoch: int = 0) -> Dict[int, Batch]:
    """One epoch of per-expert active-voxel batches (regressor sampling).

    Experts whose expanded box contains no active voxels are skipped and
    logged.  Uses the caller's generator directly; the encoder itself uses
    seeded per-network streams instead.
    """
    coords, values = grid.active_voxels()
    centers = coords.astype(np.float64) + 0.5
    out: Dict[int, Batch] = {}
    for sub in layout.subdomains:
        inside = np.all((coords >= sub.expanded_lo()) & (coords < sub.expanded_hi()),
                        axis=1)
        n = int(np.count_nonzero(inside))
        if n == 0:
            logger.warning("expert %d: no active voxels, skipped", sub.id)
            continue
        pool = np.flatnonzero(inside)
        take = pool[rng.integers(0, n, cfg.batch_size)]
        out[sub.id] = Batch(inputs=centers[take], targets=values[take])
    return out


# -- single-network training -------------------------------------------------------


@dataclass
class _NetSpec:
    tag: str
    arch: Tuple[int, int]
    m: int
    head: str
    out_dim: int
    loss_kind: str
    loss_target: float
    full_batch: bool


def _net_spec(tag: str, cfg: TrainConfig) -> Optional[_NetSpec]:
    if tag == "l1":
        return _NetSpec("l1", cfg.l1_net, max(1, cfg.ffm_size // 2), "logits", 3,
                        "ce", CLASSIFIER_LOSS_TARGET, True)
    if tag == "tile":
        if cfg.tile_net is None:
            return None
        return _NetSpec("tile", cfg.tile_net, cfg.ffm_size, "linear", 1,
                        "mse", REGRESSOR_LOSS_TARGET, True)
    if tag == "l0":
        return _NetSpec("l0", cfg.l0_net, cfg.ffm_size, "binary", 1,
                        "bce", CLASSIFIER_LOSS_TARGET, False)
    if tag == "voxel":
        return _NetSpec("voxel", cfg.voxel_net, cfg.ffm_size, "linear", 1,
                        "mse", REGRESSOR_LOSS_TARGET, False)
    raise ValueError(tag)


_LOSS_KIND_MAP = {"ce": "ce", "bce": "bce", "mse": "mse"}


def train_network(inputs: np.ndarray, targets: np.ndarray, spec: _NetSpec,
                  cfg: TrainConfig, expert_id: int, lr0: float,
                  warm: Optional[NetRecord] = None,
                  stop_loss: Optional[float] = None,
                  workspace: Optional[TrainWorkspace] = None) -> NetRecord:
    """Train one network; returns the committed record with loss/epochs."""
    depth, width = spec.arch
    seed_ff = _stable_seed(cfg.seed, expert_id, NET_TAGS[spec.tag], 0)
    seed_init = _stable_seed(cfg.seed, expert_id, NET_TAGS[spec.tag], 1)
    seed_draw = _stable_seed(cfg.seed, expert_id, NET_TAGS[spec.tag], 2)
    activation = Activation(cfg.activation, cfg.frequency)
    if warm is not None:
        params = warm.params.copy()
        ff = warm.ff
    else:
        ff = FourierFeatures(spec.m, cfg.ffm_scale, seed_ff)
        params = init_mlp(2 * spec.m, [width] * depth, spec.out_dim,
                          activation, spec.head, seed_init)
    net = FusedNet(params, ff, AdamState(params))
    ws = workspace if workspace is not None else TrainWorkspace()
    schedule = LrSchedule(lr0, cfg.decay, cfg.interval)
    n = inputs.shape[0]
    xs32 = np.ascontiguousarray(inputs, dtype=np.float32)
    target_loss = spec.loss_target if stop_loss is None else max(spec.loss_target, stop_loss)
    sampler = None
    if not spec.full_batch and n > cfg.batch_size:
        sampler = Sampler(n, cfg.batch_size, cfg.sample_interval, seed_draw)
    loss = float("inf")
    epochs = 0
    for epoch in range(cfg.max_epochs):
        if sampler is not None:
            idx = sampler.indices(epoch)
            xb, yb = xs32[idx], targets[idx]
        else:
            xb, yb = xs32, targets
        loss = fused_step(net, xb, yb, _LOSS_KIND_MAP[spec.loss_kind],
                          np.float32(lr_at(schedule, epoch)), ws)
        epochs = epoch + 1
        if loss < target_loss:
            break
    net.commit()
    return NetRecord(params=params, ff=ff, final_loss=float(loss), epochs=epochs)


# -- spec-surface trainers ----------------------------------------------------------


def train_l1_classifier(grid: VdbGrid, layout: SubdomainLayout, expert_id: int,
                        cfg: TrainConfig) -> NetRecord:
    """Ternary slot classifier over all level-1 slots in the expert's box."""
    arrays = _flatten_grid(grid)
    scale = _value_scale(grid)
    data = _gather_expert_data(grid, layout.subdomains[expert_id], arrays, scale)
    if data.l1_inputs is None:
        raise EncodeError("no level-1 nodes in box", expert_id)
    return train_network(data.l1_inputs, data.l1_labels, _net_spec("l1", cfg),
                         cfg, expert_id, cfg.lr)


def train_l0_classifier(grid: VdbGrid, layout: SubdomainLayout, expert_id: int,
                        cfg: TrainConfig) -> NetRecord:
    """Binary voxel-state classifier over voxels inside child slots only."""
    arrays = _flatten_grid(grid)
    scale = _value_scale(grid)
    data = _gather_expert_data(grid, layout.subdomains[expert_id], arrays, scale)
    if data.l0_inputs is None:
        raise EncodeError("no leaf nodes in box", expert_id)
    return train_network(data.l0_inputs, data.l0_labels, _net_spec("l0", cfg),
                         cfg, expert_id, cfg.lr)


def train_regressor(grid: VdbGrid, layout: SubdomainLayout, expert_id: int,
                    cfg: TrainConfig, level: str = "voxel") -> Tuple[NetRecord, float]:
    """Value regressor at ``level`` in {'tile', 'voxel'}; returns (net, scale)."""
    arrays = _flatten_grid(grid)
    scale = _value_scale(grid)
    data = _gather_expert_data(grid, layout.subdomains[expert_id], arrays, scale)
    if level == "voxel":
        inputs, targets = data.vox_inputs, data.vox_targets
    else:
        inputs, targets = data.tile_inputs, data.tile_targets
    if inputs is None:
        raise EncodeError(f"no {level} targets in box", expert_id)
    spec = _net_spec(level if level == "tile" else "voxel", cfg)
    if spec is None:
        raise EncodeError("config has no tile network", expert_id)
    return train_network(inputs, targets, spec, cfg, expert_id, cfg.lr), scale


# -- patch extraction ----------------------------------------------------------------


def _significance_threshold(grid: VdbGrid, cfg: TrainConfig) -> float:
    if cfg.significance_threshold is not None:
        return cfg.significance_threshold
    if grid.grid_class == GRID_CLASS_SDF:
        return SDF_SIGNIFICANCE_FACTOR * grid.voxel_size
    return FOG_SIGNIFICANCE_DEFAULT


def extract_patches(grid: VdbGrid, layout: SubdomainLayout,
                    experts: List[EncodedSubdomain], cfg: TrainConfig) -> None:
    """Record classifier disagreements against ground truth as patches.

    Predictions go through the same blended evaluators the decoder uses, so
    (classifier + patches) reproduces the source masks exactly in strict
    mode.  Level-1 disagreements are always all recorded; level-0
    disagreements are filtered unless strict: ground-truth-inactive voxels
    are dropped, as are true values outside the significance band.
    """
    arrays = _flatten_grid(grid)
    band = grid.half_width * grid.voxel_size
    eps = _significance_threshold(grid, cfg)
    by_id = {e.id: e for e in experts}
    for sub in layout.subdomains:
        expert = by_id[sub.id]
        patches = PatchList()
        own1 = np.all((arrays.l1_origins >= sub.lo) & (arrays.l1_origins < sub.hi),
                      axis=1)
        if own1.any():
            origins = arrays.l1_origins[own1]
            centers = (origins[:, None, :] + _SLOT_CENTER_OFFSETS[None, :, :]).reshape(-1, 3)
            probs, covered = blended_l1_probs(layout, experts, centers)
            pred = np.where(covered, probs.argmax(axis=1), L1_CLASS_INACTIVE_TILE)
            child = arrays.l1_child[own1].reshape(-1)
            active = arrays.l1_active[own1].reshape(-1)
            truth = np.full(child.shape, L1_CLASS_INACTIVE_TILE, dtype=np.int64)
            truth[active & ~child] = L1_CLASS_ACTIVE_TILE
            truth[child] = L1_CLASS_CHILD
            slot_origins = (origins[:, None, :]
                            + (L1_LOCAL_COORDS * LEAF_SPAN)[None, :, :]).reshape(-1, 3)
            for i in np.flatnonzero(pred != truth):
                patches.l1.append((tuple(int(v) for v in slot_origins[i]),
                                   int(truth[i])))
        own0 = np.all((arrays.leaf_origins >= sub.lo) & (arrays.leaf_origins < sub.hi),
                      axis=1)
        if own0.any():
            origins = arrays.leaf_origins[own0]
            centers = (origins[:, None, :] + _VOXEL_CENTER_OFFSETS[None, :, :]).reshape(-1, 3)
            probs, covered = blended_l0_probs(layout, experts, centers)
            pred = covered & (probs > 0.5)
            truth = arrays.leaf_active[own0].reshape(-1)
            values = arrays.leaf_values[own0].reshape(-1)
            disagree = pred != truth
            if not cfg.strict_topology:
                keep = truth.copy()          # ground-truth-inactive are dropped
                if grid.grid_class == GRID_CLASS_SDF:
                    keep &= np.abs(values) < band - eps
                else:
                    keep &= values > eps
                disagree &= keep
            coords = (origins[:, None, :] + LEAF_LOCAL_COORDS[None, :, :]).reshape(-1, 3)
            for i in np.flatnonzero(disagree):
                is_active = bool(truth[i])
                patches.l0.append((tuple(int(v) for v in coords[i]), is_active,
                                   float(values[i]) if is_active else 0.0))
        expert.patches = patches


# -- full encode -----------------------------------------------------------------------


def _value_scale(grid: VdbGrid) -> float:
    if grid.grid_class == GRID_CLASS_SDF:
        return grid.half_width * grid.voxel_size
    return 1.0


def _build_upper_tree(grid: VdbGrid) -> UpperTree:
    tree = UpperTree()
    tree.root_tiles = dict(grid.root_tiles)
    for key in sorted(grid.root):
        node2 = grid.root[key]
        tiles = {}
        keep = (~node2.child_mask.bits) & (
            node2.active_mask.bits | (node2.tiles != np.float32(grid.background)))
        for idx in np.flatnonzero(keep):
            tiles[int(idx)] = float(node2.tiles[idx])
        tree.l2_nodes.append(L2NodeRecord(
            origin=key,
            child_mask=NodeMask(L2_SIZE, node2.child_mask.bits.copy()),
            active_mask=NodeMask(L2_SIZE, node2.active_mask.bits.copy()),
            tiles=tiles,
        ))
        for idx2 in node2.child_mask.indices():
            node1 = node2.children[int(idx2)]
            tree.l1_origins.append(node1.origin)
            inactive = (~node1.child_mask.bits & ~node1.active_mask.bits
                        & (node1.tiles != np.float32(grid.background)))
            if inactive.any():
                tree.l1_tiles[node1.origin] = {
                    int(i): float(node1.tiles[i]) for i in np.flatnonzero(inactive)}
            for idx1 in node1.child_mask.indices():
                leaf = node1.children[int(idx1)]
                neg = ~leaf.active.bits & (leaf.values < 0)
                if neg.any():
                    tree.leaf_negative_fill[leaf.origin] = neg.copy()
    tree.l1_origins.sort()
    return tree


def _train_expert(grid: VdbGrid, layout: SubdomainLayout, sub: Subdomain,
                  arrays: _GridArrays, cfg: TrainConfig, lr0: float,
                  warm: Optional[EncodedSubdomain] = None,
                  stop_losses: Optional[Dict[str, float]] = None
                  ) -> EncodedSubdomain:
    scale = _value_scale(grid)
    # warm nets were trained under the previous frame's input map; keep it
    norm = (warm.norm_origin.copy(), warm.norm_scale) if warm is not None else None
    data = _gather_expert_data(grid, sub, arrays, scale, norm=norm)
    expert = EncodedSubdomain(
        id=sub.id, cell=sub.cell, cluster_id=sub.cluster_id,
        norm_origin=data.norm_origin, norm_scale=data.norm_scale,
        value_scale=scale,
    )
    ws = TrainWorkspace()

    def run(tag, inputs, targets):
        spec = _net_spec(tag, cfg)
        if spec is None or inputs is None:
            if inputs is not None and spec is None and tag == "tile":
                logger.warning("expert %d: active tiles present but config has "
                               "no tile network", sub.id)
            return None
        warm_net = None
        if warm is not None:
            warm_net = dict(warm.nets()).get(tag)
        stop = None if stop_losses is None else stop_losses.get(tag)
        try:
            return train_network(inputs, targets, spec, cfg, sub.id, lr0,
                                 warm=warm_net, stop_loss=stop, workspace=ws)
        except Exception as exc:
            raise EncodeError(f"{tag} training failed: {exc}", sub.id) from exc

    expert.l1_classifier = run("l1", data.l1_inputs, data.l1_labels)
    expert.tile_regressor = run("tile", data.tile_inputs, data.tile_targets)
    expert.l0_classifier = run("l0", data.l0_inputs, data.l0_labels)
    expert.voxel_regressor = run("voxel", data.vox_inputs, data.vox_targets)
    if expert.voxel_regressor is None:
        logger.warning("expert %d: no active voxels, value regressor skipped", sub.id)
    return expert


def encode(grid: VdbGrid, cfg: TrainConfig, weight_precision: int = 32,
           workers: int = 1,
           _warm: Optional[Dict[Tuple[int, int, int], EncodedSubdomain]] = None,
           _lr0: Optional[float] = None,
           _stop_losses: Optional[Dict[Tuple[Tuple[int, int, int], str], float]] = None
           ) -> NeuralGridContainer:
    """Encode a grid into its hierarchical neural container."""
    cfg.validate()
    layout = decompose(grid, cfg.subdomain_size)
    if not layout.subdomains:
        raise EncodeError("grid has no active values")
    arrays = _flatten_grid(grid)
    lr0 = cfg.lr if _lr0 is None else _lr0

    def train_one(sub: Subdomain) -> EncodedSubdomain:
        warm = _warm.get(sub.cell) if _warm else None
        stops = None
        if _stop_losses is not None:
            stops = {tag: _stop_losses[(sub.cell, tag)] for tag in NET_TAGS
                     if (sub.cell, tag) in _stop_losses}
        return _train_expert(grid, layout, sub, arrays, cfg, lr0,
                             warm=warm, stop_losses=stops)

    if workers > 1 and len(layout.subdomains) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            experts = list(pool.map(train_one, layout.subdomains))
    else:
        experts = [train_one(sub) for sub in layout.subdomains]
    extract_patches(grid, layout, experts, cfg)
    meta = GridMeta(grid.grid_class, grid.background, grid.voxel_size,
                    grid.half_width, _value_scale(grid))
    return NeuralGridContainer(
        grid_meta=meta,
        upper_tree=_build_upper_tree(grid),
        layout=layout,
        experts=experts,
        config=replace(cfg),
        weight_precision=weight_precision,
    )


# -- temporal warm-start sequence --------------------------------------------------


@dataclass
class FrameReport:
    """Per-frame training accounting for the sequence manifest."""

    frame: int
    epochs: int
    final_loss: float
    detail: Dict[str, float] = field(default_factory=dict)


def _frame_epochs(container: NeuralGridContainer) -> int:
    return sum(net.epochs for e in container.experts
               for _, net in e.nets() if net is not None)


def _frame_loss(container: NeuralGridContainer) -> float:
    losses = [e.voxel_regressor.final_loss for e in container.experts
              if e.voxel_regressor is not None]
    return float(np.mean(losses)) if losses else 0.0


def encode_sequence(grids: Sequence[VdbGrid], cfg: TrainConfig,
                    weight_precision: int = 32, workers: int = 1
                    ) -> Tuple[List[NeuralGridContainer], List[FrameReport]]:
    """Temporally-coherent warm-start encoding of an animated sequence.

    Frame 0 trains cold at the configured rate and is then refined at the
    refinement rate; the refined final losses become early-stop targets.
    Every later frame starts from the previous frame's weights, trains at the
    refinement rate and stops once its epoch loss reaches the target.  New
    subdomains appearing mid-sequence get the cold + refine treatment.
    """
    if len(grids) < 2:
        raise EncodeError("a sequence needs at least 2 frames")
    for i, g in enumerate(grids[1:], start=1):
        if g.voxel_size != grids[0].voxel_size:
            raise EncodeError(f"frame {i}: voxel size {g.voxel_size} != "
                              f"{grids[0].voxel_size}")
        if g.grid_class != grids[0].grid_class:
            raise EncodeError(f"frame {i}: grid class mismatch")
    refine_lr = cfg.refinement_lr()
    containers: List[NeuralGridContainer] = []
    reports: List[FrameReport] = []
    targets: Dict[Tuple[Tuple[int, int, int], str], float] = {}

    def frame_cfg(pass_id: int) -> TrainConfig:
        # fresh sampling streams per pass; otherwise a re-training pass
        # replays the exact batch sequence it already fit, and its final
        # loss becomes a flattered early-stop target for later frames
        return replace(cfg, seed=_stable_seed(cfg.seed, 9000 + pass_id))

    def cold_refine(grid: VdbGrid, pass_id: int, warm_from=None, only_cells=None):
        """Cold pass then refinement pass; returns (container, cold_epochs)."""
        cold = encode(grid, frame_cfg(pass_id), weight_precision, workers,
                      _warm=warm_from)
        cold_epochs = _frame_epochs(cold)
        warm = {e.cell: e for e in cold.experts
                if only_cells is None or e.cell in only_cells}
        refined = encode(grid, frame_cfg(pass_id + 1), weight_precision, workers,
                         _warm=warm, _lr0=refine_lr)
        return cold, refined, cold_epochs

    cold0, frame0, cold_epochs0 = cold_refine(grids[0], pass_id=0)
    for e in frame0.experts:
        for tag, net in e.nets():
            if net is not None:
                targets[(e.cell, tag)] = net.final_loss
    containers.append(frame0)
    reports.append(FrameReport(
        frame=0, epochs=cold_epochs0 + _frame_epochs(frame0),
        final_loss=_frame_loss(frame0),
        detail={"cold_epochs": float(cold_epochs0),
                "refine_epochs": float(_frame_epochs(frame0))},
    ))
    prev = frame0
    for t in range(1, len(grids)):
        prev_by_cell = {e.cell: e for e in prev.experts}
        layout_t = decompose(grids[t], cfg.subdomain_size)
        new_cells = [s.cell for s in layout_t.subdomains if s.cell not in prev_by_cell]
        warm = {cell: prev_by_cell[cell] for cell in prev_by_cell}
        if new_cells:
            # cold+refine only to produce warm sources and targets for new cells
            cold_t, refined_t, _ = cold_refine(grids[t], pass_id=10 * t)
            for e in refined_t.experts:
                if e.cell in new_cells:
                    warm[e.cell] = e
                    for tag, net in e.nets():
                        if net is not None:
                            targets[(e.cell, tag)] = net.final_loss
        ct = encode(grids[t], frame_cfg(10 * t + 2), weight_precision, workers,
                    _warm=warm, _lr0=refine_lr, _stop_losses=targets)
        containers.append(ct)
        reports.append(FrameReport(
            frame=t, epochs=_frame_epochs(ct), final_loss=_frame_loss(ct),
            detail={},
        ))
        prev = ct
    return containers, reports
