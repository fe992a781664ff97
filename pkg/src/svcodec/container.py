"""The neural-grid container: in-memory model and binary file format.

File layout (all integers little-endian):

* header: magic ``NVDB``, version u32 = 1, flags u32, stage id u8.
  Flag bit 0 marks an applied lossless stage; bits 1-2 encode the weight
  precision (0 -> 32-bit, 1 -> 16-bit).  Stage id 0 is the mandatory
  identity codec; id 1 is zlib over the whole payload (prefixed with the
  raw length as u64).
* payload sections, in order: grid meta, upper tree, layout, experts,
  config echo.
* trailing CRC-32 of every preceding byte.  The checksum is verified before
  any payload section is interpreted.

Each network blob stores layer count, dims, activation kind/frequency, the
feature-map seed/scale/size and the weights; the feature matrix itself is
regenerated from the seed, never stored.  Weights are rounded to IEEE
half precision when the 16-bit flag is set.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import TrainConfig, format_config, parse_config
from .errors import (
    BadMagicError,
    ChecksumError,
    SvcodecError,
    TruncationError,
    VersionError,
)
from .grid import (
    GRID_CLASS_FOG,
    GRID_CLASS_SDF,
    L2_SIZE,
    NodeMask,
)
from .neural import Activation, FourierFeatures, MlpParams
from .partition import Subdomain, SubdomainLayout

MAGIC = b"NVDB"
VERSION = 1
STAGE_NONE = 0
STAGE_ZLIB = 1

_ACT_CODES = {"relu": 0, "tanh": 1, "sine": 2}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}
_CLASS_CODES = {GRID_CLASS_SDF: 0, GRID_CLASS_FOG: 1}
_CLASS_NAMES = {v: k for k, v in _CLASS_CODES.items()}

L1_CLASS_CHILD = 0
L1_CLASS_ACTIVE_TILE = 1
L1_CLASS_INACTIVE_TILE = 2


@dataclass
class GridMeta:
    grid_class: str
    background: float
    voxel_size: float
    half_width: float
    value_scale: float


@dataclass
class L2NodeRecord:
    """Explicit level-2 node: masks plus sparse non-background tiles."""

    origin: Tuple[int, int, int]
    child_mask: NodeMask
    active_mask: NodeMask
    tiles: Dict[int, float] = field(default_factory=dict)


@dataclass
class UpperTree:
    """Root and level-2 content kept explicit, plus level-1 node origins.

    ``l1_tiles`` carries the non-background INACTIVE level-1 tile values
    (for example the signed interior of a narrow-band SDF) so the decoder
    can reproduce far-field signs exactly; active level-1 tile values stay
    neural via the tile regressor.
    """

    root_tiles: Dict[Tuple[int, int, int], Tuple[float, bool]] = field(default_factory=dict)
    l2_nodes: List[L2NodeRecord] = field(default_factory=list)
    l1_origins: List[Tuple[int, int, int]] = field(default_factory=list)
    l1_tiles: Dict[Tuple[int, int, int], Dict[int, float]] = field(default_factory=dict)
    # per-leaf bitmasks of inactive voxels holding the negative band limit
    leaf_negative_fill: Dict[Tuple[int, int, int], np.ndarray] = field(default_factory=dict)


@dataclass
class PatchList:
    """Explicit corrections for classifier misclassifications."""

    l1: List[Tuple[Tuple[int, int, int], int]] = field(default_factory=list)
    l0: List[Tuple[Tuple[int, int, int], bool, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.l1) + len(self.l0)


@dataclass
class NetRecord:
    params: MlpParams
    ff: FourierFeatures
    final_loss: float = 0.0
    epochs: int = 0


@dataclass
class EncodedSubdomain:
    """Per-subdomain networks, input normalization and correction patches."""

    id: int
    cell: Tuple[int, int, int]
    cluster_id: int
    norm_origin: np.ndarray          # (3,) float64; inputs are (center-origin)/scale
    norm_scale: float
    value_scale: float
    l1_classifier: Optional[NetRecord] = None
    tile_regressor: Optional[NetRecord] = None
    l0_classifier: Optional[NetRecord] = None
    voxel_regressor: Optional[NetRecord] = None

    patches: PatchList = field(default_factory=PatchList)

    @property
    def final_loss(self) -> float:
        if self.voxel_regressor is not None:
            return self.voxel_regressor.final_loss
        losses = [n.final_loss for n in (self.l1_classifier, self.tile_regressor,
                                         self.l0_classifier) if n is not None]
        return max(losses) if losses else 0.0

    def nets(self) -> List[Tuple[str, Optional[NetRecord]]]:
        return [("l1", self.l1_classifier), ("tile", self.tile_regressor),
                ("l0", self.l0_classifier), ("voxel", self.voxel_regressor)]

    def normalize(self, centers: np.ndarray) -> np.ndarray:
        """Map continuous index-space points into the expert's input cube."""
        return ((np.asarray(centers, dtype=np.float64) - self.norm_origin)
                / self.norm_scale).astype(np.float32)

    def parameter_count(self) -> int:
        return sum(n.params.parameter_count() for _, n in self.nets() if n is not None)


@dataclass
class NeuralGridContainer:
    """Serialized-form model: explicit upper tree plus per-subdomain experts."""

    grid_meta: GridMeta
    upper_tree: UpperTree
    layout: SubdomainLayout
    experts: List[EncodedSubdomain]
    config: TrainConfig
    weight_precision: int = 32

    def payload_bytes(self) -> int:
        """Serialized payload size at the container's precision, stage 0."""
        return len(_build_payload(self))

    def parameter_count(self) -> int:
        return sum(e.parameter_count() for e in self.experts)

    def patch_count(self) -> int:
        return sum(len(e.patches) for e in self.experts)


# -- low-level writer/reader ---------------------------------------------------


class _Writer:
    def __init__(self):
        self.parts: List[bytes] = []

    def raw(self, data: bytes):
        self.parts.append(data)

    def pack(self, fmt: str, *vals):
        self.parts.append(struct.pack("<" + fmt, *vals))

    def coords(self, c):
        self.pack("iii", int(c[0]), int(c[1]), int(c[2]))

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, section: str = "header"):
        self.data = data
        self.pos = 0
        self.section = section

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncationError(self.section)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize("<" + fmt)
        return struct.unpack("<" + fmt, self.take(size))

    def coords(self) -> Tuple[int, int, int]:
        x, y, z = self.unpack("iii")
        return (x, y, z)

    def done(self) -> bool:
        return self.pos >= len(self.data)


def _write_net(w: _Writer, net: NetRecord, precision: int) -> None:
    params = net.params
    ff = net.ff
    dims = params.dims
    w.pack("H", len(params.layers))
    for d in dims:
        w.pack("H", d)
    head_code = {"linear": 0, "logits": 1, "binary": 2}[params.head]
    w.pack("B", head_code)
    w.pack("B", _ACT_CODES[params.activation.kind])
    w.pack("f", params.activation.frequency)
    w.pack("Q", ff.seed)
    w.pack("f", ff.scale)
    w.pack("I", ff.m)
    w.pack("f", ff.amplitude)
    w.pack("B", precision)
    w.pack("f", net.final_loss)
    w.pack("I", net.epochs)
    dtype = np.float16 if precision == 16 else np.float32
    for wgt, bias in params.layers:
        w.raw(np.ascontiguousarray(wgt, dtype=np.float32).astype(dtype).tobytes())
        w.raw(np.ascontiguousarray(bias, dtype=np.float32).astype(dtype).tobytes())


def _read_net(r: _Reader) -> NetRecord:
    (nlayers,) = r.unpack("H")
    dims = [r.unpack("H")[0] for _ in range(nlayers + 1)]
    (head_code,) = r.unpack("B")
    head = {0: "linear", 1: "logits", 2: "binary"}.get(head_code)
    if head is None:
        raise SvcodecError(f"bad head code {head_code}")
    (act_code,) = r.unpack("B")
    if act_code not in _ACT_NAMES:
        raise SvcodecError(f"bad activation code {act_code}")
    (freq,) = r.unpack("f")
    (ffm_seed,) = r.unpack("Q")
    (ffm_scale,) = r.unpack("f")
    (m,) = r.unpack("I")
    (amp,) = r.unpack("f")
    (precision,) = r.unpack("B")
    if precision not in (16, 32):
        raise SvcodecError(f"bad weight precision {precision}")
    (final_loss,) = r.unpack("f")
    (epochs,) = r.unpack("I")
    dtype = np.float16 if precision == 16 else np.float32
    itemsize = 2 if precision == 16 else 4
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        wdata = r.take(fan_out * fan_in * itemsize)
        bdata = r.take(fan_out * itemsize)
        wgt = np.frombuffer(wdata, dtype=dtype).astype(np.float32).reshape(fan_out, fan_in)
        bias = np.frombuffer(bdata, dtype=dtype).astype(np.float32)
        layers.append((wgt.copy(), bias.copy()))
    act = Activation(_ACT_NAMES[act_code], freq if freq > 0 else 1.0)
    ff = FourierFeatures(m, ffm_scale, ffm_seed, amplitude=amp)
    params = MlpParams(layers, act, head)
    return NetRecord(params, ff, final_loss=final_loss, epochs=epochs)


def _build_payload(c: NeuralGridContainer) -> bytes:
    w = _Writer()
    # grid meta
    meta = c.grid_meta
    w.pack("B", _CLASS_CODES[meta.grid_class])
    w.pack("f", meta.background)
    w.pack("d", meta.voxel_size)
    w.pack("f", meta.half_width)
    w.pack("f", meta.value_scale)
    # upper tree
    tree = c.upper_tree
    w.pack("Q", len(tree.root_tiles))
    for key in sorted(tree.root_tiles):
        value, active = tree.root_tiles[key]
        w.coords(key)
        w.pack("fB", value, int(active))
    w.pack("Q", len(tree.l2_nodes))
    for node in tree.l2_nodes:
        w.coords(node.origin)
        w.raw(node.child_mask.packed_words())
        w.raw(node.active_mask.packed_words())
        w.pack("I", len(node.tiles))
        for idx in sorted(node.tiles):
            w.pack("If", idx, node.tiles[idx])
    w.pack("Q", len(tree.l1_origins))
    for org in tree.l1_origins:
        w.coords(org)
        tiles = tree.l1_tiles.get(org, {})
        w.pack("I", len(tiles))
        for idx in sorted(tiles):
            w.pack("If", idx, tiles[idx])
    fill = _Writer()
    fill.pack("Q", len(tree.leaf_negative_fill))
    for org in sorted(tree.leaf_negative_fill):
        fill.coords(org)
        fill.raw(np.packbits(tree.leaf_negative_fill[org],
                             bitorder="little").tobytes())
    packed = zlib.compress(fill.getvalue(), 6)
    w.pack("Q", len(fill.getvalue()))
    w.pack("Q", len(packed))
    w.raw(packed)
    # layout
    w.pack("I", c.layout.size)
    w.pack("I", c.layout.halo)
    w.pack("I", c.layout.cluster_count)
    w.pack("I", len(c.layout.subdomains))
    for sub in c.layout.subdomains:
        w.coords(sub.cell)
        w.pack("I", sub.cluster_id)
    # experts
    w.pack("I", len(c.experts))
    for e in c.experts:
        w.pack("I", e.id)
        w.coords(e.cell)
        w.pack("I", e.cluster_id)
        w.pack("ddd", *np.asarray(e.norm_origin, dtype=np.float64))
        w.pack("d", e.norm_scale)
        w.pack("f", e.value_scale)
        for _, net in e.nets():
            w.pack("B", int(net is not None))
            if net is not None:
                _write_net(w, net, c.weight_precision)
        pw = _Writer()
        pw.pack("I", len(e.patches.l1))
        for origin, cls in e.patches.l1:
            pw.coords(origin)
            pw.pack("B", cls)
        pw.pack("I", len(e.patches.l0))
        for coord, active, value in e.patches.l0:
            pw.coords(coord)
            pw.pack("Bf", int(active), value)
        raw = pw.getvalue()
        packed = zlib.compress(raw, 6)
        w.pack("II", len(raw), len(packed))
        w.raw(packed)
    # config echo
    text = format_config(c.config).encode("utf-8")
    w.pack("I", len(text))
    w.raw(text)
    return w.getvalue()


def _parse_payload(data: bytes, precision: int) -> NeuralGridContainer:
    r = _Reader(data, "grid meta")
    (class_code,) = r.unpack("B")
    if class_code not in _CLASS_NAMES:
        raise SvcodecError(f"bad grid class code {class_code}")
    background, = r.unpack("f")
    voxel_size, = r.unpack("d")
    half_width, = r.unpack("f")
    value_scale, = r.unpack("f")
    meta = GridMeta(_CLASS_NAMES[class_code], background, voxel_size,
                    half_width, value_scale)
    r.section = "upper tree"
    tree = UpperTree()
    (n_root_tiles,) = r.unpack("Q")
    for _ in range(n_root_tiles):
        key = r.coords()
        value, active = r.unpack("fB")
        tree.root_tiles[key] = (value, bool(active))
    (n_nodes,) = r.unpack("Q")
    for _ in range(n_nodes):
        origin = r.coords()
        child = NodeMask.from_packed(r.take(L2_SIZE // 8), L2_SIZE)
        active = NodeMask.from_packed(r.take(L2_SIZE // 8), L2_SIZE)
        (n_tiles,) = r.unpack("I")
        tiles = {}
        for _ in range(n_tiles):
            idx, value = r.unpack("If")
            tiles[idx] = value
        tree.l2_nodes.append(L2NodeRecord(origin, child, active, tiles))
    (n_l1,) = r.unpack("Q")
    for _ in range(n_l1):
        origin = r.coords()
        tree.l1_origins.append(origin)
        (n_tiles,) = r.unpack("I")
        if n_tiles:
            tiles = {}
            for _ in range(n_tiles):
                idx, value = r.unpack("If")
                tiles[idx] = value
            tree.l1_tiles[origin] = tiles
    r.section = "leaf negative fill"
    raw_len, packed_len = r.unpack("QQ")
    try:
        fill_data = zlib.decompress(r.take(packed_len))
    except zlib.error as exc:
        raise SvcodecError(f"negative-fill section corrupt: {exc}") from exc
    if len(fill_data) != raw_len:
        raise SvcodecError("negative-fill section length mismatch")
    fr = _Reader(fill_data, "leaf negative fill")
    (n_fill,) = fr.unpack("Q")
    for _ in range(n_fill):
        org = fr.coords()
        bits = np.unpackbits(np.frombuffer(fr.take(64), dtype=np.uint8),
                             bitorder="little").astype(bool)
        tree.leaf_negative_fill[org] = bits
    r.section = "layout"
    size, halo, cluster_count, n_subs = r.unpack("IIII")
    layout = SubdomainLayout(size=size, halo=halo, cluster_count=cluster_count)
    for sid in range(n_subs):
        cell = r.coords()
        (cluster_id,) = r.unpack("I")
        layout.subdomains.append(Subdomain(id=sid, cell=cell, size=size,
                                           cluster_id=cluster_id, halo=halo))
        layout.cell_to_id[cell] = sid
    r.section = "experts"
    (n_experts,) = r.unpack("I")
    experts = []
    for _ in range(n_experts):
        (eid,) = r.unpack("I")
        cell = r.coords()
        (cluster_id,) = r.unpack("I")
        norm_origin = np.array(r.unpack("ddd"), dtype=np.float64)
        (norm_scale,) = r.unpack("d")
        (vscale,) = r.unpack("f")
        nets = []
        for _ in range(4):
            (present,) = r.unpack("B")
            nets.append(_read_net(r) if present else None)
        patches = PatchList()
        raw_len, packed_len = r.unpack("II")
        try:
            praw = zlib.decompress(r.take(packed_len))
        except zlib.error as exc:
            raise SvcodecError(f"patch section corrupt: {exc}") from exc
        if len(praw) != raw_len:
            raise SvcodecError("patch section length mismatch")
        pr = _Reader(praw, "patches")
        (n_l1p,) = pr.unpack("I")
        for _ in range(n_l1p):
            origin = pr.coords()
            (cls,) = pr.unpack("B")
            patches.l1.append((origin, cls))
        (n_l0p,) = pr.unpack("I")
        for _ in range(n_l0p):
            coord = pr.coords()
            active, value = pr.unpack("Bf")
            patches.l0.append((coord, bool(active), value))
        experts.append(EncodedSubdomain(
            id=eid, cell=cell, cluster_id=cluster_id, norm_origin=norm_origin,
            norm_scale=norm_scale, value_scale=vscale,
            l1_classifier=nets[0], tile_regressor=nets[1],
            l0_classifier=nets[2], voxel_regressor=nets[3], patches=patches,
        ))
    r.section = "config echo"
    (text_len,) = r.unpack("I")
    text = r.take(text_len).decode("utf-8")
    cfg = parse_config(text)
    if not r.done():
        raise SvcodecError("trailing bytes after config echo")
    return NeuralGridContainer(meta, tree, layout, experts, cfg,
                              weight_precision=precision)


def serialize_container(c: NeuralGridContainer, lossless_stage: bool = False) -> bytes:
    """Container bytes; deterministic for fixed inputs."""
    if c.weight_precision not in (16, 32):
        raise SvcodecError(f"unsupported weight precision {c.weight_precision}")
    flags = 0
    stage = STAGE_NONE
    if lossless_stage:
        flags |= 1
        stage = STAGE_ZLIB
    if c.weight_precision == 16:
        flags |= 1 << 1
    payload = _build_payload(c)
    if stage == STAGE_ZLIB:
        payload = struct.pack("<Q", len(payload)) + zlib.compress(payload, 6)
    head = MAGIC + struct.pack("<IIB", VERSION, flags, stage)
    body = head + payload
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def _classify_truncation(payload: bytes, flags: int, stage: int) -> None:
    """Structural dry run used only to blame truncation over corruption."""
    if stage == STAGE_ZLIB:
        pr = _Reader(payload, "lossless stage")
        (raw_len,) = pr.unpack("Q")
        payload = zlib.decompress(payload[8:])
    precision = 16 if (flags >> 1) & 1 else 32
    _parse_payload(payload, precision)


def deserialize_container(data: bytes) -> NeuralGridContainer:
    """Parse container bytes, validating magic, version and checksum first."""
    r = _Reader(data, "header")
    if r.take(4) != MAGIC:
        raise BadMagicError("not a NVDB container (bad magic)")
    version, flags, stage = r.unpack("IIB")
    if version != VERSION:
        raise VersionError(f"unsupported container version {version}")
    if len(data) < r.pos + 4:
        raise TruncationError("checksum")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        # classify the failure: a file that also ends mid-section is reported
        # as truncation (the parse attempt interprets nothing on success)
        try:
            _classify_truncation(data[r.pos:-4], flags, stage)
        except TruncationError:
            raise
        except Exception:
            pass
        raise ChecksumError("container checksum mismatch")
    payload = data[r.pos:-4]
    if stage == STAGE_ZLIB:
        if (flags & 1) == 0:
            raise SvcodecError("stage id/flag mismatch")
        pr = _Reader(payload, "lossless stage")
        (raw_len,) = pr.unpack("Q")
        try:
            payload = zlib.decompress(payload[8:])
        except zlib.error as exc:
            raise SvcodecError(f"lossless stage failed: {exc}") from exc
        if len(payload) != raw_len:
            raise SvcodecError("lossless stage length mismatch")
    elif stage != STAGE_NONE:
        raise SvcodecError(f"unknown lossless stage id {stage}")
    precision = 16 if (flags >> 1) & 1 else 32
    return _parse_payload(payload, precision)


def write_container(c: NeuralGridContainer, path, lossless_stage: bool = False
                    ) -> Tuple[int, int]:
    """Write the container; returns (payload bytes, file bytes)."""
    data = serialize_container(c, lossless_stage)
    with open(path, "wb") as fh:
        fh.write(data)
    return c.payload_bytes(), len(data)


def read_container(path) -> NeuralGridContainer:
    with open(path, "rb") as fh:
        data = fh.read()
    return deserialize_container(data)
