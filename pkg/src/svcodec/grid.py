"""VDB-style sparse voxel tree with the [Hash,5,4,3] configuration.

The tree is four levels deep: a hashed root maps 4096-aligned origins to
level-2 internal nodes (32^3 slots spanning 4096^3), whose slots hold either
level-1 internal nodes (16^3 slots spanning 128^3) or tile values, and whose
level-1 children hold either dense 8^3 leaf nodes or tile values.  Internal
nodes carry a child mask and an active mask; leaves carry an active mask only.

Slot indexing is fixed for the whole codebase: for a node of log2dim ``L`` a
local offset (i, j, k) maps to ``index = i*4^L + j*2^L + k`` (x is the major
axis, z varies fastest).  Negative coordinates are handled by two's-complement
masking, so the grid is origin-symmetric.

Byte accounting used by :func:`VdbGrid.topology_stats` follows the documented
serialized node layouts (origin + packed masks + 4-byte slots/voxels), not
allocator overhead:

* leaf:     12 + 64 + 512*4            = 2124 bytes
* level 1:  12 + 2*512 + 4096*4        = 17420 bytes
* level 2:  12 + 2*4096 + 32768*4      = 139276 bytes
* root:     20 bytes per node entry, 17 per tile entry
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, NamedTuple, Optional, Tuple

import numpy as np

from .errors import DuplicateSampleError, SvcodecError

Coord = Tuple[int, int, int]

LEAF_LOG2 = 3
L1_LOG2 = 4
L2_LOG2 = 5

LEAF_SPAN = 1 << LEAF_LOG2          # 8 coordinates per leaf axis
L1_SPAN = LEAF_SPAN << L1_LOG2      # 128
L2_SPAN = L1_SPAN << L2_LOG2        # 4096

LEAF_SIZE = 1 << (3 * LEAF_LOG2)    # 512 voxels
L1_SIZE = 1 << (3 * L1_LOG2)        # 4096 slots
L2_SIZE = 1 << (3 * L2_LOG2)        # 32768 slots

COORD_LIMIT = 1 << 30               # component range so key math never overflows

GRID_CLASS_SDF = "sdf"
GRID_CLASS_FOG = "fog"

def local_coords(log2dim: int) -> np.ndarray:
    """(2^3L, 3) local (i, j, k) offsets of a node's slots, in index order."""
    ii = np.arange(1 << log2dim)
    return np.stack(np.meshgrid(ii, ii, ii, indexing="ij"), axis=-1).reshape(-1, 3)


# Local offsets of the 512 voxels of a leaf / 4096 slots of a level-1 node.
LEAF_LOCAL_COORDS = local_coords(LEAF_LOG2)
L1_LOCAL_COORDS = local_coords(L1_LOG2)

_BYTES_LEAF = 12 + LEAF_SIZE // 8 + LEAF_SIZE * 4
_BYTES_L1 = 12 + 2 * (L1_SIZE // 8) + L1_SIZE * 4
_BYTES_L2 = 12 + 2 * (L2_SIZE // 8) + L2_SIZE * 4
_BYTES_ROOT_ENTRY = 20
_BYTES_ROOT_TILE = 17


def _check_coord(c: Coord) -> None:
    if max(abs(c[0]), abs(c[1]), abs(c[2])) >= COORD_LIMIT:
        raise SvcodecError(f"coordinate {tuple(c)} outside legal range +-2^30")


def coord_to_keys(c: Coord) -> Tuple[Coord, int, int, int]:
    """Decompose a coordinate into its root key and per-level slot indices."""
    x, y, z = int(c[0]), int(c[1]), int(c[2])
    _check_coord((x, y, z))
    root = (x & ~(L2_SPAN - 1), y & ~(L2_SPAN - 1), z & ~(L2_SPAN - 1))
    idx2 = (
        (((x & (L2_SPAN - 1)) >> 7) << (2 * L2_LOG2))
        | (((y & (L2_SPAN - 1)) >> 7) << L2_LOG2)
        | ((z & (L2_SPAN - 1)) >> 7)
    )
    idx1 = (
        (((x & (L1_SPAN - 1)) >> 3) << (2 * L1_LOG2))
        | (((y & (L1_SPAN - 1)) >> 3) << L1_LOG2)
        | ((z & (L1_SPAN - 1)) >> 3)
    )
    idx0 = (
        ((x & (LEAF_SPAN - 1)) << (2 * LEAF_LOG2))
        | ((y & (LEAF_SPAN - 1)) << LEAF_LOG2)
        | (z & (LEAF_SPAN - 1))
    )
    return root, idx2, idx1, idx0


def keys_to_coord(root: Coord, idx2: int, idx1: int, idx0: int) -> Coord:
    """Inverse of :func:`coord_to_keys`."""
    mask2 = (1 << L2_LOG2) - 1
    i2, j2, k2 = (idx2 >> (2 * L2_LOG2)) & mask2, (idx2 >> L2_LOG2) & mask2, idx2 & mask2
    mask1 = (1 << L1_LOG2) - 1
    i1, j1, k1 = (idx1 >> (2 * L1_LOG2)) & mask1, (idx1 >> L1_LOG2) & mask1, idx1 & mask1
    mask0 = (1 << LEAF_LOG2) - 1
    i0, j0, k0 = (idx0 >> (2 * LEAF_LOG2)) & mask0, (idx0 >> LEAF_LOG2) & mask0, idx0 & mask0
    return (
        root[0] + (i2 << 7) + (i1 << 3) + i0,
        root[1] + (j2 << 7) + (j1 << 3) + j0,
        root[2] + (k2 << 7) + (k1 << 3) + k0,
    )


def coord_arrays_to_keys(coords: np.ndarray):
    """Vectorized :func:`coord_to_keys` over an (n, 3) integer array."""
    c = np.asarray(coords, dtype=np.int64)
    root = c & ~(L2_SPAN - 1)
    l2 = (c & (L2_SPAN - 1)) >> 7
    l1 = (c & (L1_SPAN - 1)) >> 3
    l0 = c & (LEAF_SPAN - 1)
    idx2 = (l2[:, 0] << (2 * L2_LOG2)) | (l2[:, 1] << L2_LOG2) | l2[:, 2]
    idx1 = (l1[:, 0] << (2 * L1_LOG2)) | (l1[:, 1] << L1_LOG2) | l1[:, 2]
    idx0 = (l0[:, 0] << (2 * LEAF_LOG2)) | (l0[:, 1] << LEAF_LOG2) | l0[:, 2]
    return root, idx2, idx1, idx0


def slot_origin(node_origin: Coord, idx: int, log2dim: int, slot_span: int) -> Coord:
    """Origin of the coordinate domain covered by slot ``idx`` of a node."""
    mask = (1 << log2dim) - 1
    i = (idx >> (2 * log2dim)) & mask
    j = (idx >> log2dim) & mask
    k = idx & mask
    return (
        node_origin[0] + i * slot_span,
        node_origin[1] + j * slot_span,
        node_origin[2] + k * slot_span,
    )


class NodeMask:
    """Fixed-length bitmask over the slots of one node."""

    __slots__ = ("bits",)

    def __init__(self, size: int, bits: Optional[np.ndarray] = None):
        if bits is None:
            bits = np.zeros(size, dtype=bool)
        else:
            bits = np.asarray(bits, dtype=bool)
            if bits.shape != (size,):
                raise ValueError(f"mask bits must have shape ({size},)")
        self.bits = bits

    def __len__(self) -> int:
        return self.bits.size

    def get(self, idx: int) -> bool:
        return bool(self.bits[idx])

    def set(self, idx: int, on: bool = True) -> None:
        self.bits[idx] = on

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def indices(self) -> np.ndarray:
        """Set slot indices in ascending order."""
        return np.flatnonzero(self.bits)

    def packed_words(self) -> bytes:
        """Little-endian packed u64 words, bit i of the stream = slot i."""
        return np.packbits(self.bits, bitorder="little").tobytes()

    @classmethod
    def from_packed(cls, data: bytes, size: int) -> "NodeMask":
        bits = np.unpackbits(
            np.frombuffer(data, dtype=np.uint8), count=size, bitorder="little"
        ).astype(bool)
        return cls(size, bits)


class LeafNode:
    """Dense 8^3 block of voxel values with an active mask."""

    __slots__ = ("origin", "values", "active")

    def __init__(self, origin: Coord, background: float):
        if any(v % LEAF_SPAN for v in origin):
            raise ValueError(f"leaf origin {origin} not {LEAF_SPAN}-aligned")
        self.origin = origin
        self.values = np.full(LEAF_SIZE, background, dtype=np.float32)
        self.active = NodeMask(LEAF_SIZE)

    def voxel_coords(self) -> np.ndarray:
        """(512, 3) int64 coordinates of all voxels, in slot order."""
        return np.asarray(self.origin, dtype=np.int64) + LEAF_LOCAL_COORDS

    def active_voxel_coords(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.int64) + LEAF_LOCAL_COORDS[self.active.bits]


class InternalNode:
    """Internal tree node; slots hold a child reference or a tile value."""

    __slots__ = ("origin", "log2dim", "slot_span", "child_mask", "active_mask",
                 "tiles", "children")

    def __init__(self, origin: Coord, log2dim: int, background: float):
        span = LEAF_SPAN << log2dim if log2dim == L1_LOG2 else L1_SPAN << log2dim
        size = 1 << (3 * log2dim)
        if any(v % span for v in origin):
            raise ValueError(f"node origin {origin} not {span}-aligned")
        self.origin = origin
        self.log2dim = log2dim
        self.slot_span = span >> log2dim
        self.child_mask = NodeMask(size)
        self.active_mask = NodeMask(size)
        self.tiles = np.full(size, background, dtype=np.float32)
        self.children: Dict[int, object] = {}

    @property
    def size(self) -> int:
        return 1 << (3 * self.log2dim)

    def slot_origin(self, idx: int) -> Coord:
        return slot_origin(self.origin, idx, self.log2dim, self.slot_span)


class ActiveValue(NamedTuple):
    """One entry of the active-value stream.

    ``extent`` is the edge length of the covered cube: 1 for a voxel, 8 for a
    level-1 tile, 128 for a level-2 tile, 4096 for a root tile.
    """

    coord: Coord
    value: float
    extent: int


@dataclass
class LevelStats:
    node_count: int = 0
    active_value_count: int = 0
    estimated_bytes: int = 0


@dataclass
class TopologyStats:
    """Per-level node/value counts and serialized-layout byte estimates."""

    leaf: LevelStats = field(default_factory=LevelStats)
    internal1: LevelStats = field(default_factory=LevelStats)
    internal2: LevelStats = field(default_factory=LevelStats)
    root: LevelStats = field(default_factory=LevelStats)
    leaf_value_bytes: int = 0

    @property
    def total_bytes(self) -> int:
        return (
            self.leaf.estimated_bytes
            + self.internal1.estimated_bytes
            + self.internal2.estimated_bytes
            + self.root.estimated_bytes
        )

    @property
    def active_voxel_count(self) -> int:
        return self.leaf.active_value_count


class VdbGrid:
    """Immutable-after-build sparse grid.

    Concurrency: safe for any number of concurrent readers once built; each
    :class:`Accessor` is single-owner.
    """

    def __init__(self, background: float, grid_class: str = GRID_CLASS_SDF,
                 voxel_size: float = 1.0, half_width: float = 3.0):
        if grid_class not in (GRID_CLASS_SDF, GRID_CLASS_FOG):
            raise ValueError(f"unknown grid class {grid_class!r}")
        if voxel_size <= 0:
            raise ValueError("voxel_size must be positive")
        # value-typed fields live at float32 precision, like the stored data
        self.background = float(np.float32(background))
        self.grid_class = grid_class
        self.voxel_size = float(voxel_size)
        self.half_width = float(np.float32(half_width))
        self.root: Dict[Coord, InternalNode] = {}
        self.root_tiles: Dict[Coord, Tuple[float, bool]] = {}

    # -- random access ---------------------------------------------------

    def get_value(self, c: Coord) -> Tuple[float, bool]:
        """Value and active state at a coordinate (total function)."""
        root, idx2, idx1, idx0 = coord_to_keys(c)
        node2 = self.root.get(root)
        if node2 is None:
            tile = self.root_tiles.get(root)
            if tile is not None:
                return tile
            return self.background, False
        if not node2.child_mask.bits[idx2]:
            return float(node2.tiles[idx2]), bool(node2.active_mask.bits[idx2])
        node1 = node2.children[idx2]
        if not node1.child_mask.bits[idx1]:
            return float(node1.tiles[idx1]), bool(node1.active_mask.bits[idx1])
        leaf = node1.children[idx1]
        return float(leaf.values[idx0]), bool(leaf.active.bits[idx0])

    def get_values(self, coords: np.ndarray, with_kind: bool = False):
        """Vectorized lookup; returns (values float32, active bool) per row.

        With ``with_kind=True`` a third uint8 array reports where each row
        resolved: 0 outside any node, 1 at a tile, 2 at a leaf voxel.
        """
        c = np.asarray(coords, dtype=np.int64)
        if c.ndim != 2 or c.shape[1] != 3:
            raise ValueError("coords must have shape (n, 3)")
        n = c.shape[0]
        values = np.full(n, self.background, dtype=np.float32)
        active = np.zeros(n, dtype=bool)
        kind = np.zeros(n, dtype=np.uint8) if with_kind else None
        if n == 0:
            return (values, active, kind) if with_kind else (values, active)
        root, idx2, idx1, idx0 = coord_arrays_to_keys(c)
        # Group rows by root key (57-bit packed; components fit in 19 bits).
        shift = root >> int(np.int64(L2_LOG2 + L1_LOG2 + LEAF_LOG2))
        packed = (
            ((shift[:, 0] + (1 << 18)) << 38)
            | ((shift[:, 1] + (1 << 18)) << 19)
            | (shift[:, 2] + (1 << 18))
        )
        order = np.argsort(packed, kind="stable")
        sp = packed[order]
        starts = np.flatnonzero(np.r_[True, sp[1:] != sp[:-1]])
        ends = np.r_[starts[1:], n]
        for s, e in zip(starts, ends):
            rows = order[s:e]
            key = tuple(int(v) for v in root[rows[0]])
            node2 = self.root.get(key)
            if node2 is None:
                tile = self.root_tiles.get(key)
                if tile is not None:
                    values[rows] = tile[0]
                    active[rows] = tile[1]
                    if kind is not None:
                        kind[rows] = 1
                continue
            self._gather_in_node2(node2, rows, idx2, idx1, idx0, values, active, kind)
        return (values, active, kind) if with_kind else (values, active)

    def _gather_in_node2(self, node2, rows, idx2, idx1, idx0, values, active,
                         kind=None):
        i2 = idx2[rows]
        comp = (i2 << 21) | (idx1[rows] << 9) | idx0[rows]
        sub = np.argsort(comp, kind="stable")
        rows = rows[sub]
        i2 = i2[sub]
        starts = np.flatnonzero(np.r_[True, i2[1:] != i2[:-1]])
        ends = np.r_[starts[1:], rows.size]
        cbits2 = node2.child_mask.bits
        abits2 = node2.active_mask.bits
        for s, e in zip(starts, ends):
            slot2 = int(i2[s])
            r2 = rows[s:e]
            if not cbits2[slot2]:
                values[r2] = node2.tiles[slot2]
                active[r2] = abits2[slot2]
                if kind is not None:
                    kind[r2] = 1
                continue
            node1 = node2.children[slot2]
            j1 = idx1[r2]
            st1 = np.flatnonzero(np.r_[True, j1[1:] != j1[:-1]])
            en1 = np.r_[st1[1:], r2.size]
            for s1, e1 in zip(st1, en1):
                slot1 = int(j1[s1])
                r1 = r2[s1:e1]
                if not node1.child_mask.bits[slot1]:
                    values[r1] = node1.tiles[slot1]
                    active[r1] = node1.active_mask.bits[slot1]
                    if kind is not None:
                        kind[r1] = 1
                    continue
                leaf = node1.children[slot1]
                k0 = idx0[r1]
                values[r1] = leaf.values[k0]
                active[r1] = leaf.active.bits[k0]
                if kind is not None:
                    kind[r1] = 2

    def accessor(self) -> "Accessor":
        return Accessor(self)

    # -- iteration ---------------------------------------------------------

    def iter_leaves(self) -> Iterator[LeafNode]:
        """Leaves in canonical (root key, idx2, idx1) order."""
        for key in sorted(self.root):
            node2 = self.root[key]
            for idx2 in node2.child_mask.indices():
                node1 = node2.children[int(idx2)]
                for idx1 in node1.child_mask.indices():
                    yield node1.children[int(idx1)]

    def iter_active(self) -> Iterator[ActiveValue]:
        """Active voxels and active tiles in canonical order.

        Tiles are reported once with their covered extent.  Inactive tile
        values (for example the signed interior of a narrow-band SDF) are not
        part of the stream.
        """
        keys = sorted(set(self.root) | set(self.root_tiles))
        for key in keys:
            tile = self.root_tiles.get(key)
            if tile is not None:
                if tile[1]:
                    yield ActiveValue(key, float(tile[0]), L2_SPAN)
                continue
            node2 = self.root[key]
            occupied2 = node2.child_mask.bits | node2.active_mask.bits
            for idx2 in np.flatnonzero(occupied2):
                idx2 = int(idx2)
                org2 = node2.slot_origin(idx2)
                if not node2.child_mask.bits[idx2]:
                    yield ActiveValue(org2, float(node2.tiles[idx2]), L1_SPAN)
                    continue
                node1 = node2.children[idx2]
                occupied1 = node1.child_mask.bits | node1.active_mask.bits
                for idx1 in np.flatnonzero(occupied1):
                    idx1 = int(idx1)
                    if not node1.child_mask.bits[idx1]:
                        yield ActiveValue(
                            node1.slot_origin(idx1), float(node1.tiles[idx1]), LEAF_SPAN
                        )
                        continue
                    leaf = node1.children[idx1]
                    base = leaf.origin
                    for idx0 in leaf.active.indices():
                        idx0 = int(idx0)
                        coord = (
                            base[0] + (idx0 >> (2 * LEAF_LOG2)),
                            base[1] + ((idx0 >> LEAF_LOG2) & (LEAF_SPAN - 1)),
                            base[2] + (idx0 & (LEAF_SPAN - 1)),
                        )
                        yield ActiveValue(coord, float(leaf.values[idx0]), 1)

    def active_voxels(self) -> Tuple[np.ndarray, np.ndarray]:
        """All active leaf voxels as ((n, 3) int64 coords, (n,) float32 values).

        Array-valued companion to :meth:`iter_active`; excludes tiles.
        """
        coords = []
        vals = []
        for leaf in self.iter_leaves():
            bits = leaf.active.bits
            if bits.any():
                coords.append(np.asarray(leaf.origin, dtype=np.int64) + LEAF_LOCAL_COORDS[bits])
                vals.append(leaf.values[bits])
        if not coords:
            return np.empty((0, 3), dtype=np.int64), np.empty(0, dtype=np.float32)
        return np.concatenate(coords), np.concatenate(vals)

    def active_tiles(self) -> list:
        """Active tiles as ActiveValue entries (extent 8, 128 or 4096)."""
        return [e for e in self.iter_active() if e.extent > 1]

    def active_bbox(self) -> Optional[Tuple[np.ndarray, np.ndarray]]:
        """Inclusive (lo, hi) bounds over active voxels and tiles, or None."""
        lo = None
        hi = None
        for leaf in self.iter_leaves():
            if not leaf.active.bits.any():
                continue
            c = leaf.active_voxel_coords()
            clo, chi = c.min(axis=0), c.max(axis=0)
            lo = clo if lo is None else np.minimum(lo, clo)
            hi = chi if hi is None else np.maximum(hi, chi)
        for entry in self.active_tiles():
            clo = np.asarray(entry.coord, dtype=np.int64)
            chi = clo + entry.extent - 1
            lo = clo if lo is None else np.minimum(lo, clo)
            hi = chi if hi is None else np.maximum(hi, chi)
        if lo is None:
            return None
        return lo, hi

    # -- statistics --------------------------------------------------------

    def topology_stats(self, include_leaf_values: bool = True) -> TopologyStats:
        """Per-level accounting with documented serialized-layout byte sizes.

        ``include_leaf_values=False`` accounts a topology-only tree (leaf
        masks without the 512 voxel values), as used by the hybrid grid.
        """
        st = TopologyStats()
        leaf_bytes = _BYTES_LEAF if include_leaf_values else _BYTES_LEAF - LEAF_SIZE * 4
        for key, node2 in self.root.items():
            st.internal2.node_count += 1
            st.internal2.estimated_bytes += _BYTES_L2
            st.internal2.active_value_count += int(
                np.count_nonzero(node2.active_mask.bits & ~node2.child_mask.bits)
            )
            for idx2 in node2.child_mask.indices():
                node1 = node2.children[int(idx2)]
                st.internal1.node_count += 1
                st.internal1.estimated_bytes += _BYTES_L1
                st.internal1.active_value_count += int(
                    np.count_nonzero(node1.active_mask.bits & ~node1.child_mask.bits)
                )
                for idx1 in node1.child_mask.indices():
                    leaf = node1.children[int(idx1)]
                    st.leaf.node_count += 1
                    st.leaf.estimated_bytes += leaf_bytes
                    st.leaf.active_value_count += leaf.active.count()
        st.root.node_count = len(self.root) + len(self.root_tiles)
        st.root.active_value_count = sum(1 for t in self.root_tiles.values() if t[1])
        st.root.estimated_bytes = (
            len(self.root) * _BYTES_ROOT_ENTRY + len(self.root_tiles) * _BYTES_ROOT_TILE
        )
        if include_leaf_values:
            st.leaf_value_bytes = st.leaf.node_count * LEAF_SIZE * 4
        return st

    def active_voxel_count(self) -> int:
        return sum(leaf.active.count() for leaf in self.iter_leaves())

    # -- structural checks (used by tests and the decoder) ------------------

    def check_invariants(self) -> None:
        """Full-traversal consistency check; raises on violation."""
        for key, node2 in self.root.items():
            if any(v % L2_SPAN for v in key):
                raise SvcodecError(f"root key {key} not {L2_SPAN}-aligned")
            both = node2.child_mask.bits & node2.active_mask.bits
            if both.any():
                raise SvcodecError(f"level-2 node {key}: slot with child and active tile")
            if set(node2.children) != set(int(i) for i in node2.child_mask.indices()):
                raise SvcodecError(f"level-2 node {key}: child dict/mask mismatch")
            for idx2, node1 in node2.children.items():
                both = node1.child_mask.bits & node1.active_mask.bits
                if both.any():
                    raise SvcodecError(
                        f"level-1 node {node1.origin}: slot with child and active tile"
                    )
                if set(node1.children) != set(int(i) for i in node1.child_mask.indices()):
                    raise SvcodecError(f"level-1 node {node1.origin}: child dict/mask mismatch")
                if self.grid_class == GRID_CLASS_SDF:
                    band = self.half_width * self.voxel_size
                    for leaf in node1.children.values():
                        vals = leaf.values[leaf.active.bits]
                        if vals.size and float(np.max(np.abs(vals))) > band + 1e-5:
                            raise SvcodecError(
                                f"leaf {leaf.origin}: active SDF value outside +-{band}"
                            )


class Accessor:
    """Cached bottom-up reader over one grid; bit-identical to get_value.

    Single-owner: create one per worker.
    """

    __slots__ = ("_grid", "_leaf", "_leaf_org", "_node1", "_node1_org",
                 "_node2", "_node2_org")

    def __init__(self, grid: VdbGrid):
        self._grid = grid
        self._leaf = None
        self._leaf_org = None
        self._node1 = None
        self._node1_org = None
        self._node2 = None
        self._node2_org = None

    def get(self, c: Coord) -> Tuple[float, bool]:
        x, y, z = int(c[0]), int(c[1]), int(c[2])
        leaf = self._leaf
        if leaf is not None and (
            (x & ~(LEAF_SPAN - 1), y & ~(LEAF_SPAN - 1), z & ~(LEAF_SPAN - 1))
            == self._leaf_org
        ):
            idx0 = (
                ((x & (LEAF_SPAN - 1)) << (2 * LEAF_LOG2))
                | ((y & (LEAF_SPAN - 1)) << LEAF_LOG2)
                | (z & (LEAF_SPAN - 1))
            )
            return float(leaf.values[idx0]), bool(leaf.active.bits[idx0])
        node1 = self._node1
        if node1 is not None and (
            (x & ~(L1_SPAN - 1), y & ~(L1_SPAN - 1), z & ~(L1_SPAN - 1))
            == self._node1_org
        ):
            return self._descend_node1(node1, x, y, z)
        node2 = self._node2
        if node2 is not None and (
            (x & ~(L2_SPAN - 1), y & ~(L2_SPAN - 1), z & ~(L2_SPAN - 1))
            == self._node2_org
        ):
            return self._descend_node2(node2, x, y, z)
        root = (x & ~(L2_SPAN - 1), y & ~(L2_SPAN - 1), z & ~(L2_SPAN - 1))
        node2 = self._grid.root.get(root)
        if node2 is None:
            tile = self._grid.root_tiles.get(root)
            if tile is not None:
                return tile
            return self._grid.background, False
        self._node2 = node2
        self._node2_org = root
        return self._descend_node2(node2, x, y, z)

    def _descend_node2(self, node2, x, y, z):
        idx2 = (
            (((x & (L2_SPAN - 1)) >> 7) << (2 * L2_LOG2))
            | (((y & (L2_SPAN - 1)) >> 7) << L2_LOG2)
            | ((z & (L2_SPAN - 1)) >> 7)
        )
        if not node2.child_mask.bits[idx2]:
            return float(node2.tiles[idx2]), bool(node2.active_mask.bits[idx2])
        node1 = node2.children[idx2]
        self._node1 = node1
        self._node1_org = (x & ~(L1_SPAN - 1), y & ~(L1_SPAN - 1), z & ~(L1_SPAN - 1))
        return self._descend_node1(node1, x, y, z)

    def _descend_node1(self, node1, x, y, z):
        idx1 = (
            (((x & (L1_SPAN - 1)) >> 3) << (2 * L1_LOG2))
            | (((y & (L1_SPAN - 1)) >> 3) << L1_LOG2)
            | ((z & (L1_SPAN - 1)) >> 3)
        )
        if not node1.child_mask.bits[idx1]:
            return float(node1.tiles[idx1]), bool(node1.active_mask.bits[idx1])
        leaf = node1.children[idx1]
        self._leaf = leaf
        self._leaf_org = (x & ~(LEAF_SPAN - 1), y & ~(LEAF_SPAN - 1), z & ~(LEAF_SPAN - 1))
        idx0 = (
            ((x & (LEAF_SPAN - 1)) << (2 * LEAF_LOG2))
            | ((y & (LEAF_SPAN - 1)) << LEAF_LOG2)
            | (z & (LEAF_SPAN - 1))
        )
        return float(leaf.values[idx0]), bool(leaf.active.bits[idx0])


class GridBuilder:
    """Single-threaded constructor; detects conflicting duplicate samples."""

    def __init__(self, background: float, grid_class: str = GRID_CLASS_SDF,
                 voxel_size: float = 1.0, half_width: float = 3.0):
        self.grid = VdbGrid(background, grid_class, voxel_size, half_width)
        self._inserted: Dict[Coord, np.ndarray] = {}   # leaf origin -> seen bits
        self._tile_marks = set()

    def _get_leaf(self, root: Coord, idx2: int, idx1: int) -> LeafNode:
        grid = self.grid
        node2 = grid.root.get(root)
        if node2 is None:
            if root in grid.root_tiles:
                raise DuplicateSampleError(root)
            node2 = InternalNode(root, L2_LOG2, grid.background)
            grid.root[root] = node2
        if not node2.child_mask.bits[idx2]:
            if node2.active_mask.bits[idx2] or ("t2", root, idx2) in self._tile_marks:
                raise DuplicateSampleError(node2.slot_origin(idx2))
            node1 = InternalNode(node2.slot_origin(idx2), L1_LOG2, grid.background)
            node2.children[idx2] = node1
            node2.child_mask.set(idx2)
            node2.tiles[idx2] = grid.background
        else:
            node1 = node2.children[idx2]
        if not node1.child_mask.bits[idx1]:
            if node1.active_mask.bits[idx1] or ("t1", node1.origin, idx1) in self._tile_marks:
                raise DuplicateSampleError(node1.slot_origin(idx1))
            leaf = LeafNode(node1.slot_origin(idx1), grid.background)
            node1.children[idx1] = leaf
            node1.child_mask.set(idx1)
            node1.tiles[idx1] = grid.background
        else:
            leaf = node1.children[idx1]
        return leaf

    def add_voxel(self, c: Coord, value: float, active: bool = True) -> None:
        root, idx2, idx1, idx0 = coord_to_keys(c)
        leaf = self._get_leaf(root, idx2, idx1)
        seen = self._inserted.get(leaf.origin)
        if seen is None:
            seen = np.zeros(LEAF_SIZE, dtype=bool)
            self._inserted[leaf.origin] = seen
        if seen[idx0]:
            if (float(leaf.values[idx0]) != float(value)
                    or bool(leaf.active.bits[idx0]) != bool(active)):
                raise DuplicateSampleError(c)
            return
        seen[idx0] = True
        leaf.values[idx0] = value
        leaf.active.set(idx0, bool(active))

    def add_leaf_block(self, origin: Coord, values: np.ndarray, active: np.ndarray) -> None:
        """Insert a whole 8^3 block at once (values/active in slot order)."""
        root, idx2, idx1, _ = coord_to_keys(origin)
        leaf = self._get_leaf(root, idx2, idx1)
        seen = self._inserted.get(leaf.origin)
        values = np.asarray(values, dtype=np.float32).reshape(LEAF_SIZE)
        active = np.asarray(active, dtype=bool).reshape(LEAF_SIZE)
        if seen is not None and seen.any():
            clash = seen & ((leaf.values != values) | (leaf.active.bits != active))
            if clash.any():
                idx0 = int(np.flatnonzero(clash)[0])
                raise DuplicateSampleError(keys_to_coord(root, idx2, idx1, idx0))
        self._inserted[leaf.origin] = np.ones(LEAF_SIZE, dtype=bool)
        leaf.values[:] = values
        leaf.active.bits[:] = active

    def add_tile(self, origin: Coord, value: float, active: bool, extent: int) -> None:
        grid = self.grid
        root, idx2, idx1, idx0 = coord_to_keys(origin)
        if extent == L2_SPAN:
            if origin != root or origin in grid.root or origin in grid.root_tiles:
                raise DuplicateSampleError(origin)
            grid.root_tiles[origin] = (float(np.float32(value)), bool(active))
            return
        if extent == L1_SPAN:
            node2 = grid.root.get(root)
            if node2 is None:
                if root in grid.root_tiles:
                    raise DuplicateSampleError(origin)
                node2 = InternalNode(root, L2_LOG2, grid.background)
                grid.root[root] = node2
            if idx1 or idx0 or node2.child_mask.bits[idx2] or ("t2", root, idx2) in self._tile_marks:
                raise DuplicateSampleError(origin)
            node2.tiles[idx2] = value
            node2.active_mask.set(idx2, bool(active))
            self._tile_marks.add(("t2", root, idx2))
            return
        if extent == LEAF_SPAN:
            node2 = grid.root.get(root)
            if node2 is None:
                if root in grid.root_tiles:
                    raise DuplicateSampleError(origin)
                node2 = InternalNode(root, L2_LOG2, grid.background)
                grid.root[root] = node2
            if not node2.child_mask.bits[idx2]:
                if node2.active_mask.bits[idx2] or ("t2", root, idx2) in self._tile_marks:
                    raise DuplicateSampleError(origin)
                node1 = InternalNode(node2.slot_origin(idx2), L1_LOG2, grid.background)
                node2.children[idx2] = node1
                node2.child_mask.set(idx2)
            else:
                node1 = node2.children[idx2]
            if idx0 or node1.child_mask.bits[idx1] or ("t1", node1.origin, idx1) in self._tile_marks:
                raise DuplicateSampleError(origin)
            node1.tiles[idx1] = value
            node1.active_mask.set(idx1, bool(active))
            self._tile_marks.add(("t1", node1.origin, idx1))
            return
        raise ValueError(f"unsupported tile extent {extent}")

    def finalize(self) -> VdbGrid:
        grid = self.grid
        self._inserted = {}
        self._tile_marks = set()
        return grid


def build_grid(samples: Iterable, background: float,
               grid_class: str = GRID_CLASS_SDF, voxel_size: float = 1.0,
               half_width: float = 3.0) -> VdbGrid:
    """Build a grid from (coord, value, active[, extent]) samples.

    ``extent`` defaults to 1 (a voxel); 8/128/4096 insert tiles, so the
    output of :meth:`VdbGrid.iter_active` can be replayed directly.
    Conflicting duplicates raise :class:`DuplicateSampleError` naming the
    coordinate.
    """
    b = GridBuilder(background, grid_class, voxel_size, half_width)
    for sample in samples:
        if len(sample) == 3:
            coord, value, active = sample
            extent = 1
        else:
            coord, value, active, extent = sample
        coord = tuple(int(v) for v in coord)
        if extent == 1:
            b.add_voxel(coord, float(value), bool(active))
        else:
            b.add_tile(coord, float(value), bool(active), int(extent))
    return b.finalize()
