import struct

import numpy as np
import pytest

from svcodec.cli import main
from svcodec.gridfile import read_grid


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    sphere_spec = root / "sphere.cfg"
    sphere_spec.write_text(
        "kind = sphere\ncenter = 20,20,20\nradius = 12.0\n"
        "voxel_size = 1.0\nhalf_width = 3.0\n")
    train_cfg = root / "train.cfg"
    train_cfg.write_text(
        "subdomain_size = 512\nl1_net = 2x8\ntile_net = none\n"
        "l0_net = 2x16\nvoxel_net = 2x16\nactivation = sine/3.0\n"
        "ffm = 5.0/16\nlearning_rate = 0.001\nlr_decay = 0.975/100\n"
        "max_epochs = 60\nsample_interval = 1\nbatch_size = 4096\n"
        "strict_topology = true\nseed = 5\n")
    return root


def _run(*argv):
    return main([str(a) for a in argv])


def test_gen_encode_decode_metrics_pipeline(work, capsys):
    grid_path = work / "sphere.nvgr"
    assert _run("gen", grid_path, "--spec", work / "sphere.cfg") == 0
    assert grid_path.exists()
    container_path = work / "sphere.nvdb"
    assert _run("encode", grid_path, container_path, "--config",
                work / "train.cfg", "--weights16") == 0
    decoded_path = work / "decoded.nvgr"
    assert _run("decode", container_path, decoded_path) == 0
    assert _run("metrics", grid_path, decoded_path, "--container",
                container_path) == 0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if " = " in l]
    keys = [l.split(" = ")[0] for l in lines]
    assert keys[:2] == ["iou", "rmse"]
    assert "mcd" in keys and "ratio_raw" in keys
    report = dict(l.split(" = ") for l in lines)
    # strict topology: decoded active set matches, so IoU is interior-exact
    assert float(report["iou"]) > 0.9


def test_gen_rejects_unknown_key(work):
    bad = work / "bad.cfg"
    bad.write_text("kind = sphere\nwobble = 3\n")
    assert _run("gen", work / "x.nvgr", "--spec", bad) == 1


def test_usage_errors(work):
    assert _run("bogus-subcommand") == 1
    assert _run("encode") == 1
    assert _run("encode", "a", "b", "--no-such-flag") == 1


def test_missing_file_is_data_error(work):
    assert _run("decode", work / "missing.nvdb", work / "out.nvgr") == 2


def test_corrupt_container_exit_code(work):
    container_path = work / "sphere.nvdb"
    corrupt = work / "corrupt.nvdb"
    data = bytearray(container_path.read_bytes())
    data[60] ^= 0xFF
    corrupt.write_bytes(bytes(data))
    assert _run("decode", corrupt, work / "out.nvgr") == 2


def test_truncated_container_exit_code(work):
    container_path = work / "sphere.nvdb"
    trunc = work / "trunc.nvdb"
    trunc.write_bytes(container_path.read_bytes()[:50])
    assert _run("decode", trunc, work / "out.nvgr") == 2


def test_query_text_output(work, capsys):
    coords = work / "coords.txt"
    coords.write_text("20 20 32\n20 20 20\n500 500 500\n")
    assert _run("query", work / "sphere.nvdb", "--coords", coords) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 3
    first = out[0].split()
    assert first[:3] == ["20", "20", "32"]
    assert first[4] == "1"           # on-surface voxel is active
    assert out[1].split()[4] == "0"  # interior tile is inactive


def test_query_binary_output(work):
    coords = work / "coords.txt"
    coords.write_text("20 20 32\n")
    out_path = work / "q.bin"
    assert _run("query", work / "sphere.nvdb", "--coords", coords,
                "--out", out_path, "--binary") == 0
    record = out_path.read_bytes()
    assert len(record) == 17
    x, y, z, value, active = struct.unpack("<iiifB", record)
    assert (x, y, z, active) == (20, 20, 32, 1)


def test_query_preserves_duplicate_rows(work, capsys):
    coords = work / "dups.txt"
    coords.write_text("20 20 32\n20 20 32\n20 20 32\n")
    assert _run("query", work / "sphere.nvdb", "--coords", coords) == 0
    out = capsys.readouterr().out.strip().splitlines()
    assert len(out) == 3
    assert out[0] == out[1] == out[2]


def test_stats_grid_and_container(work, capsys):
    assert _run("stats", work / "sphere.nvgr") == 0
    out = capsys.readouterr().out
    assert "leaf_value_bytes" in out and "total_bytes" in out
    assert _run("stats", work / "sphere.nvdb") == 0
    out = capsys.readouterr().out
    assert "parameters" in out and "payload_bytes" in out


def test_encode_check_topology_exit_codes(work):
    # strict config: verification passes
    assert _run("encode", work / "sphere.nvgr", work / "checked.nvdb",
                "--config", work / "train.cfg", "--check-topology") == 0


def test_encode_determinism_same_bytes(work):
    a = work / "det_a.nvdb"
    b = work / "det_b.nvdb"
    assert _run("encode", work / "sphere.nvgr", a, "--config",
                work / "train.cfg", "--seed", "77") == 0
    assert _run("encode", work / "sphere.nvgr", b, "--config",
                work / "train.cfg", "--seed", "77") == 0
    assert a.read_bytes() == b.read_bytes()


def test_gen_sequence_and_seq_encode(work, capsys):
    seq_spec = work / "seq.cfg"
    seq_spec.write_text(
        "kind = moving-sphere\ncenter = 16,16,16\nradius = 9.0\n"
        "frames = 2\nvelocity = 1,0,0\n")
    pattern = str(work / "frame_{frame}.nvgr")
    assert _run("gen", pattern, "--spec", seq_spec) == 0
    out_dir = work / "seq_out"
    assert _run("seq-encode", work / "frame_0.nvgr", work / "frame_1.nvgr",
                out_dir, "--config", work / "train.cfg") == 0
    manifest = (out_dir / "manifest.txt").read_text().strip().splitlines()
    assert len(manifest) == 2
    frame0 = manifest[0].split(", ")
    assert frame0[0] == "0"
    assert (out_dir / "frame_0000.nvdb").exists()
    assert (out_dir / "frame_0001.nvdb").exists()


def test_gen_sequence_needs_placeholder(work):
    seq_spec = work / "seq2.cfg"
    seq_spec.write_text("kind = moving-sphere\nframes = 2\nradius = 9.0\n"
                        "center = 16,16,16\n")
    assert _run("gen", work / "noplaceholder.nvgr", "--spec", seq_spec) == 1
