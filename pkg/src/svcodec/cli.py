"""Command-line tool orchestrating gen/encode/decode/query/metrics/stats.

Exit codes: 0 success, 1 usage error, 2 data error (bad files, bad config,
metric preconditions), 3 verification failure (--check-topology).
"""

from __future__ import annotations

import argparse
import logging
import struct
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import config as config_mod
from . import container as container_mod
from . import decoder as decoder_mod
from . import encoder as encoder_mod
from . import gridfile
from . import metrics as metrics_mod
from . import procgen
from .errors import ConfigError, SvcodecError, VerificationError

logger = logging.getLogger("svcodec")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="svcodec", description=__doc__)
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a procedural grid (NVGR)")
    g.add_argument("output", help="output path; use {frame} for sequences")
    g.add_argument("--spec", help="generator spec file (key = value)")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a spec key")

    e = sub.add_parser("encode", help="encode a grid into a neural container")
    e.add_argument("input")
    e.add_argument("output")
    _add_encode_args(e)
    e.add_argument("--check-topology", action="store_true",
                   help="verify decoded masks match the source (exit 3 on failure)")

    s = sub.add_parser("seq-encode", help="warm-start encode a frame sequence")
    s.add_argument("inputs", nargs="+", help="frame grids in order")
    s.add_argument("output_dir")
    _add_encode_args(s)
    s.add_argument("--manifest", help="manifest path (default OUTPUT_DIR/manifest.txt)")

    d = sub.add_parser("decode", help="reconstruct an explicit grid (NVGR)")
    d.add_argument("input")
    d.add_argument("output")
    d.add_argument("--workers", type=int, default=1)

    q = sub.add_parser("query", help="random-access lookups through the hybrid grid")
    q.add_argument("input", help="container path")
    q.add_argument("--coords", required=True, help="text file, one 'x y z' per line")
    q.add_argument("--out", default="-", help="output path (default stdout)")
    q.add_argument("--binary", action="store_true",
                   help="write little-endian records (i32 x,y,z, f32 value, u8 active)")

    m = sub.add_parser("metrics", help="compare two grids")
    m.add_argument("grid_a", help="ground truth grid")
    m.add_argument("grid_b", help="reconstructed grid")
    m.add_argument("--container", help="container for compression ratios")

    t = sub.add_parser("stats", help="per-level accounting for a grid or container")
    t.add_argument("input")
    return p


def _add_encode_args(p) -> None:
    p.add_argument("--config", help="training config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--weights16", action="store_true",
                   help="store network weights at 16-bit precision")
    p.add_argument("--lossless", action="store_true",
                   help="apply the lossless stage (zlib) when writing")


def _load_train_config(args) -> config_mod.TrainConfig:
    cfg = config_mod.TrainConfig()
    if args.config:
        cfg = config_mod.parse_config(Path(args.config).read_text(), base=cfg)
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg = config_mod.apply_key(cfg, key.strip(), value.strip())
    if args.seed is not None:
        cfg = config_mod.apply_key(cfg, "seed", str(args.seed))
    cfg.validate()
    return cfg


# -- gen --------------------------------------------------------------------


_GEN_DEFAULTS = {
    "kind": "sphere",
    "center": "64,64,64",
    "radius": "48.0",
    "voxel_size": "1.0",
    "half_width": "3.0",
    "major_radius": "30.0",
    "minor_radius": "10.0",
    "octaves": "4",
    "lacunarity": "2.0",
    "gain": "0.5",
    "base_frequency": "0.05",
    "seed": "0",
    "domain": "0,0,0:64,64,64",
    "threshold": "0.5",
    "frames": "1",
    "velocity": "1,0,0",
}


def _parse_gen_spec(args) -> dict:
    spec = dict(_GEN_DEFAULTS)
    if args.spec:
        for lineno, raw in enumerate(Path(args.spec).read_text().splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{args.spec}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in spec:
                raise ConfigError(f"{args.spec}:{lineno}: unknown key {key!r}")
            spec[key] = value
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key not in spec:
            raise ConfigError(f"unknown generator key {key!r}")
        spec[key] = value
    return spec


def _triple(text: str) -> tuple:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 3:
        raise ConfigError(f"expected three comma-separated values, got {text!r}")
    return tuple(parts)


def _cmd_gen(args) -> int:
    spec = _parse_gen_spec(args)
    kind = spec["kind"]
    dx = float(spec["voxel_size"])
    hw = float(spec["half_width"])
    if kind == "sphere" or kind == "moving-sphere":
        sphere = procgen.SphereSpec(center=_triple(spec["center"]),
                                    radius=float(spec["radius"]),
                                    voxel_size=dx, half_width=hw)
        frames = int(spec["frames"])
        if kind == "moving-sphere" or frames > 1:
            if "{frame}" not in args.output:
                raise ConfigError("sequence output path needs a {frame} placeholder")
            grids = procgen.gen_moving_sphere_sequence(
                sphere, frames, _triple(spec["velocity"]))
            for t, grid in enumerate(grids):
                path = args.output.format(frame=t)
                n = gridfile.write_grid(grid, path)
                print(f"frame {t}: {path} ({n} bytes, "
                      f"{grid.active_voxel_count()} active voxels)")
            return EXIT_OK
        grid = procgen.gen_sphere_sdf(sphere)
    elif kind == "torus":
        grid = procgen.gen_torus_sdf(float(spec["major_radius"]),
                                     float(spec["minor_radius"]), dx, hw,
                                     center=_triple(spec["center"]))
    elif kind == "fbm":
        lo_text, hi_text = spec["domain"].split(":")
        fspec = procgen.FbmSpec(
            octaves=int(spec["octaves"]), lacunarity=float(spec["lacunarity"]),
            gain=float(spec["gain"]), base_frequency=float(spec["base_frequency"]),
            seed=int(spec["seed"]),
            domain=(tuple(int(v) for v in lo_text.split(",")),
                    tuple(int(v) for v in hi_text.split(","))),
            threshold=float(spec["threshold"]), voxel_size=dx)
        grid = procgen.gen_fbm_density(fspec)
    else:
        raise ConfigError(f"unknown generator kind {kind!r}")
    n = gridfile.write_grid(grid, args.output)
    print(f"{args.output}: {n} bytes, {grid.active_voxel_count()} active voxels")
    return EXIT_OK


# -- encode / seq-encode ------------------------------------------------------


def _cmd_encode(args) -> int:
    cfg = _load_train_config(args)
    grid = gridfile.read_grid(args.input)
    container = encoder_mod.encode(
        grid, cfg, weight_precision=16 if args.weights16 else 32,
        workers=args.workers)
    payload, total = container_mod.write_container(container, args.output,
                                                   lossless_stage=args.lossless)
    print(f"{args.output}: payload {payload} bytes, file {total} bytes, "
          f"{container.parameter_count()} parameters, "
          f"{container.patch_count()} patches")
    if args.check_topology:
        decoded = decoder_mod.decode_full(container)
        if not decoder_mod.topology_equal(grid, decoded):
            raise VerificationError("decoded topology differs from the source grid")
        print("topology check: exact")
    return EXIT_OK


def _cmd_seq_encode(args) -> int:
    cfg = _load_train_config(args)
    grids = [gridfile.read_grid(path) for path in args.inputs]
    containers, reports = encoder_mod.encode_sequence(
        grids, cfg, weight_precision=16 if args.weights16 else 32,
        workers=args.workers)
    out_dir = Path(args.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = Path(args.manifest) if args.manifest else out_dir / "manifest.txt"
    lines = []
    for report, container in zip(reports, containers):
        path = out_dir / f"frame_{report.frame:04d}.nvdb"
        container_mod.write_container(container, path, lossless_stage=args.lossless)
        lines.append(f"{report.frame}, {path}, {report.epochs}, {report.final_loss:.6e}")
        print(lines[-1])
    manifest_path.write_text("\n".join(lines) + "\n")
    print(f"manifest: {manifest_path}")
    return EXIT_OK


# -- decode / query -------------------------------------------------------------


def _cmd_decode(args) -> int:
    container = container_mod.read_container(args.input)
    grid = decoder_mod.decode_full(container)
    n = gridfile.write_grid(grid, args.output)
    print(f"{args.output}: {n} bytes, {grid.active_voxel_count()} active voxels")
    return EXIT_OK


def _cmd_query(args) -> int:
    container = container_mod.read_container(args.input)
    hybrid = decoder_mod.make_hybrid(container)
    coords = []
    for lineno, raw in enumerate(Path(args.coords).read_text().splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise SvcodecError(f"{args.coords}:{lineno}: expected 'x y z'")
        coords.append([int(p) for p in parts])
    pts = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    values, active = hybrid.query(pts)
    if args.binary:
        out = sys.stdout.buffer if args.out == "-" else open(args.out, "wb")
        try:
            for (x, y, z), v, a in zip(pts, values, active):
                out.write(struct.pack("<iiifB", int(x), int(y), int(z),
                                      float(v), int(a)))
        finally:
            if out is not sys.stdout.buffer:
                out.close()
    else:
        sink = sys.stdout if args.out == "-" else open(args.out, "w")
        try:
            for (x, y, z), v, a in zip(pts, values, active):
                sink.write(f"{x} {y} {z} {v:.9g} {int(a)}\n")
        finally:
            if sink is not sys.stdout:
                sink.close()
    return EXIT_OK


# -- metrics / stats ---------------------------------------------------------------


def _cmd_metrics(args) -> int:
    a = gridfile.read_grid(args.grid_a)
    b = gridfile.read_grid(args.grid_b)
    print(f"iou = {metrics_mod.iou(a, b):.6f}")
    print(f"rmse = {metrics_mod.rmse(a, b):.6g}")
    if a.grid_class == "sdf" and b.grid_class == "sdf":
        value = metrics_mod.mcd(a, b)
        print(f"mcd = {value:.6g}")
        print(f"mcd_voxels = {value / a.voxel_size:.6g}")
    if args.container:
        c = container_mod.read_container(args.container)
        print(f"ratio_raw = {metrics_mod.compression_ratio(c, a, metrics_mod.RATIO_RAW):.3f}")
        print(f"ratio_file = {metrics_mod.compression_ratio(c, a, metrics_mod.RATIO_FILE):.3f}")
    return EXIT_OK


def _sniff(path: str) -> str:
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == gridfile.MAGIC:
        return "grid"
    if magic == container_mod.MAGIC:
        return "container"
    raise SvcodecError(f"{path}: unrecognized file magic {magic!r}")


def _cmd_stats(args) -> int:
    kind = _sniff(args.input)
    if kind == "grid":
        grid = gridfile.read_grid(args.input)
        st = grid.topology_stats()
        print(f"grid_class = {grid.grid_class}")
        print(f"voxel_size = {grid.voxel_size}")
        for name, level in (("root", st.root), ("internal2", st.internal2),
                            ("internal1", st.internal1), ("leaf", st.leaf)):
            print(f"{name}_nodes = {level.node_count}")
            print(f"{name}_active_values = {level.active_value_count}")
            print(f"{name}_bytes = {level.estimated_bytes}")
        print(f"leaf_value_bytes = {st.leaf_value_bytes}")
        print(f"total_bytes = {st.total_bytes}")
        return EXIT_OK
    c = container_mod.read_container(args.input)
    print(f"grid_class = {c.grid_meta.grid_class}")
    print(f"experts = {len(c.experts)}")
    print(f"clusters = {c.layout.cluster_count}")
    print(f"parameters = {c.parameter_count()}")
    print(f"patches = {c.patch_count()}")
    print(f"weight_precision = {c.weight_precision}")
    print(f"l1_nodes = {len(c.upper_tree.l1_origins)}")
    print(f"l2_nodes = {len(c.upper_tree.l2_nodes)}")
    print(f"payload_bytes = {c.payload_bytes()}")
    return EXIT_OK


_COMMANDS = {
    "gen": _cmd_gen,
    "encode": _cmd_encode,
    "seq-encode": _cmd_seq_encode,
    "decode": _cmd_decode,
    "query": _cmd_query,
    "metrics": _cmd_metrics,
    "stats": _cmd_stats,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SvcodecError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
