"""NVGR: the explicit sparse-grid binary format (bit-exact round trip).

Little-endian layout:

* header: magic ``NVGR``, version u32 = 1, gridClass u8 (0 sdf / 1 fog),
  background f32, voxel size f64, half width f32, root entry count u64.
* per root entry, sorted by key: origin i32x3, kind u8.  Kind 1 is a root
  tile (value f32, active u8).  Kind 0 is a level-2 node serialized depth
  first: child mask and active mask as packed u64 words, all 32768 tile
  slots as f32, then every child level-1 node (ascending slot index) with
  its origin, masks, 4096 tile slots, then every leaf (origin, active mask,
  512 voxel values).
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import BadMagicError, SvcodecError, TruncationError, VersionError
from .grid import (
    GRID_CLASS_FOG,
    GRID_CLASS_SDF,
    InternalNode,
    L1_LOG2,
    L1_SIZE,
    L2_LOG2,
    L2_SIZE,
    LEAF_SIZE,
    LeafNode,
    NodeMask,
    VdbGrid,
)

MAGIC = b"NVGR"
VERSION = 1

_CLASS_CODES = {GRID_CLASS_SDF: 0, GRID_CLASS_FOG: 1}
_CLASS_NAMES = {v: k for k, v in _CLASS_CODES.items()}


def serialize_grid(grid: VdbGrid) -> bytes:
    parts = [MAGIC]
    pack = lambda fmt, *v: parts.append(struct.pack("<" + fmt, *v))
    keys = sorted(set(grid.root) | set(grid.root_tiles))
    pack("I", VERSION)
    pack("B", _CLASS_CODES[grid.grid_class])
    pack("f", grid.background)
    pack("d", grid.voxel_size)
    pack("f", grid.half_width)
    pack("Q", len(keys))
    for key in keys:
        pack("iii", *key)
        tile = grid.root_tiles.get(key)
        if tile is not None:
            pack("B", 1)
            pack("fB", tile[0], int(tile[1]))
            continue
        pack("B", 0)
        node2 = grid.root[key]
        parts.append(node2.child_mask.packed_words())
        parts.append(node2.active_mask.packed_words())
        parts.append(np.ascontiguousarray(node2.tiles, dtype=np.float32).tobytes())
        for idx2 in node2.child_mask.indices():
            node1 = node2.children[int(idx2)]
            pack("iii", *node1.origin)
            parts.append(node1.child_mask.packed_words())
            parts.append(node1.active_mask.packed_words())
            parts.append(np.ascontiguousarray(node1.tiles, dtype=np.float32).tobytes())
            for idx1 in node1.child_mask.indices():
                leaf = node1.children[int(idx1)]
                pack("iii", *leaf.origin)
                parts.append(leaf.active.packed_words())
                parts.append(np.ascontiguousarray(leaf.values, dtype=np.float32).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0
        self.section = "header"

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncationError(self.section)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt)))


def deserialize_grid(data: bytes) -> VdbGrid:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise BadMagicError("not a NVGR grid (bad magic)")
    (version,) = r.unpack("I")
    if version != VERSION:
        raise VersionError(f"unsupported grid format version {version}")
    (class_code,) = r.unpack("B")
    if class_code not in _CLASS_NAMES:
        raise SvcodecError(f"bad grid class code {class_code}")
    (background,) = r.unpack("f")
    (voxel_size,) = r.unpack("d")
    (half_width,) = r.unpack("f")
    (n_entries,) = r.unpack("Q")
    grid = VdbGrid(background, _CLASS_NAMES[class_code], voxel_size, half_width)
    for _ in range(n_entries):
        r.section = "root entry"
        key = tuple(r.unpack("iii"))
        (kind,) = r.unpack("B")
        if kind == 1:
            value, active = r.unpack("fB")
            grid.root_tiles[key] = (value, bool(active))
            continue
        if kind != 0:
            raise SvcodecError(f"bad root entry kind {kind}")
        r.section = "level-2 node"
        node2 = InternalNode(key, L2_LOG2, background)
        node2.child_mask = NodeMask.from_packed(r.take(L2_SIZE // 8), L2_SIZE)
        node2.active_mask = NodeMask.from_packed(r.take(L2_SIZE // 8), L2_SIZE)
        node2.tiles = np.frombuffer(r.take(L2_SIZE * 4), dtype=np.float32).copy()
        grid.root[key] = node2
        for idx2 in node2.child_mask.indices():
            r.section = "level-1 node"
            origin = tuple(r.unpack("iii"))
            if origin != node2.slot_origin(int(idx2)):
                raise SvcodecError(
                    f"level-1 origin {origin} does not match its slot")
            node1 = InternalNode(origin, L1_LOG2, background)
            node1.child_mask = NodeMask.from_packed(r.take(L1_SIZE // 8), L1_SIZE)
            node1.active_mask = NodeMask.from_packed(r.take(L1_SIZE // 8), L1_SIZE)
            node1.tiles = np.frombuffer(r.take(L1_SIZE * 4), dtype=np.float32).copy()
            node2.children[int(idx2)] = node1
            for idx1 in node1.child_mask.indices():
                r.section = "leaf node"
                lorigin = tuple(r.unpack("iii"))
                if lorigin != node1.slot_origin(int(idx1)):
                    raise SvcodecError(
                        f"leaf origin {lorigin} does not match its slot")
                leaf = LeafNode(lorigin, background)
                leaf.active = NodeMask.from_packed(r.take(LEAF_SIZE // 8), LEAF_SIZE)
                leaf.values = np.frombuffer(r.take(LEAF_SIZE * 4), dtype=np.float32).copy()
                node1.children[int(idx1)] = leaf
    if r.pos != len(data):
        raise SvcodecError("trailing bytes after last root entry")
    return grid


def write_grid(grid: VdbGrid, path) -> int:
    data = serialize_grid(grid)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def read_grid(path) -> VdbGrid:
    with open(path, "rb") as fh:
        return deserialize_grid(fh.read())
