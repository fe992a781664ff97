"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``.  The heavy fixtures are
session-scoped: criterion 4's container is shared by criteria 6 and 8, and
criterion 5's by criterion 10.
"""

import time

import numpy as np
import pytest

from svcodec.config import TrainConfig
from svcodec.container import read_container, serialize_container, write_container
from svcodec.decoder import decode_full, decode_report, make_hybrid, topology_equal
from svcodec.encoder import encode, encode_sequence
from svcodec.errors import ChecksumError, TruncationError
from svcodec.grid import GRID_CLASS_SDF, build_grid
from svcodec.metrics import compression_ratio, iou, mcd, rmse
from svcodec.neural import (
    ACT_RELU,
    ACT_SINE,
    ACT_TANH,
    Activation,
    Batch,
    FourierFeatures,
    grad_check,
    init_mlp,
)
from svcodec.partition import (
    HALO,
    Subdomain,
    SubdomainLayout,
    assign_points,
    blend_fields,
    decompose,
    gate_weight,
)
from svcodec.procgen import (
    FbmSpec,
    SphereSpec,
    fbm,
    gen_fbm_density,
    gen_moving_sphere_sequence,
    gen_sphere_sdf,
)

def _report(cid: str, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {cid}: {'PASS' if ok else 'FAIL'} - {detail}")


# -- shared volumes and runs ---------------------------------------------------


@pytest.fixture(scope="session")
def sphere128():
    """Radius-61 sphere band filling a 128^3 region."""
    return gen_sphere_sdf(SphereSpec(center=(63.5, 63.5, 63.5), radius=61.0,
                                     voxel_size=1.0, half_width=3.0))


FBM_SPEC = FbmSpec(octaves=4, lacunarity=2.0, gain=0.55, base_frequency=0.03,
                   seed=9, domain=((0, 0, 0), (96, 96, 96)), threshold=0.5,
                   voxel_size=1.0)


@pytest.fixture(scope="session")
def fbm96():
    return gen_fbm_density(FBM_SPEC)


ACCEPT_CONFIG = TrainConfig(
    subdomain_size=512, l1_net=(3, 48), tile_net=None, l0_net=(3, 96),
    voxel_net=(3, 96), activation="sine", frequency=3.0, ffm_scale=5.0,
    ffm_size=192, lr=1e-3, decay=0.975, interval=100.0, max_epochs=800,
    sample_interval=1, batch_size=65536, significance_threshold=0.0,
    strict_topology=False, seed=4242,
)

FBM_CONFIG = TrainConfig(
    subdomain_size=512, l1_net=(3, 32), tile_net=(3, 16), l0_net=(3, 64),
    voxel_net=(3, 64), activation="sine", frequency=3.0, ffm_scale=5.0,
    ffm_size=128, lr=1e-3, decay=0.975, interval=100.0, max_epochs=700,
    sample_interval=1, batch_size=65536, strict_topology=True, seed=77,
)


@pytest.fixture(scope="session")
def sphere_run(sphere128, tmp_path_factory):
    """Criterion 4's encode, written at 16-bit precision and read back."""
    path = tmp_path_factory.mktemp("accept") / "sphere.nvdb"
    t0 = time.process_time()
    container = encode(sphere128, ACCEPT_CONFIG, weight_precision=16)
    write_container(container, path)
    loaded = read_container(path)
    decoded = decode_full(loaded)
    elapsed = time.process_time() - t0
    return {"container": loaded, "decoded": decoded, "seconds": elapsed,
            "path": path}


@pytest.fixture(scope="session")
def fbm_run(fbm96):
    t0 = time.process_time()
    container = encode(fbm96, FBM_CONFIG, weight_precision=16)
    decoded = decode_full(container)
    elapsed = time.process_time() - t0
    return {"container": container, "decoded": decoded, "seconds": elapsed}


# -- criteria -------------------------------------------------------------------


def test_c1_gradient_correctness(rng):
    t0 = time.process_time()
    combos = [(act, loss) for act in (ACT_RELU, ACT_TANH, ACT_SINE)
              for loss in ("mse", "ce", "bce")]
    worst = 0.0
    checked = 0
    for i in range(20):
        act_kind, loss = combos[i % len(combos)]
        widths = [int(rng.integers(4, 33)) for _ in range(int(rng.integers(1, 4)))]
        m = int(rng.integers(2, 9))
        head = {"mse": "linear", "ce": "logits", "bce": "binary"}[loss]
        out_dim = 3 if loss == "ce" else 1
        act = Activation(act_kind, float(rng.uniform(1.0, 3.0)))
        params = init_mlp(2 * m, widths, out_dim, act, head, seed=100 + i)
        # exercise nonzero output weights too (init zeroes them)
        w_out = params.layers[-1][0]
        w_out[...] = np.random.default_rng(200 + i).uniform(
            -0.5, 0.5, w_out.shape).astype(np.float32)
        ff = FourierFeatures(m, 3.0, seed=300 + i)
        xs = rng.random((10, 3))
        if head == "linear":
            targets = rng.normal(size=10)
        elif head == "binary":
            targets = (rng.random(10) < 0.5).astype(float)
        else:
            targets = rng.integers(0, out_dim, 10)
        worst = max(worst, grad_check(params, ff, Batch(xs, targets), loss))
        checked += 1
    elapsed = time.process_time() - t0
    ok = worst < 1e-4 and elapsed < 60
    _report("C1", ok, f"{checked} nets, max relative gradient error "
                      f"{worst:.2e} (<1e-4), runtime {elapsed:.1f}s (<60s)")
    assert worst < 1e-4
    assert elapsed < 60


def test_c2_grid_differential_suite(rng):
    t0 = time.process_time()
    extent = 64
    pts = rng.integers(0, extent, size=(4000, 3))
    dense_v = np.full((extent,) * 3, 0.125, dtype=np.float32)
    dense_a = np.zeros((extent,) * 3, dtype=bool)
    samples = []
    seen = set()
    for p in pts:
        key = tuple(int(v) for v in p)
        if key in seen:
            continue
        seen.add(key)
        value = float(rng.normal())
        active = bool(rng.random() < 0.8)
        samples.append((key, value, active))
        dense_v[key] = value
        dense_a[key] = active
    g = build_grid(samples, background=0.125, grid_class="fog")
    queries = rng.integers(0, extent, size=(100_000, 3))
    vv, aa = g.get_values(queries)
    ok_dense = (np.array_equal(vv, dense_v[queries[:, 0], queries[:, 1], queries[:, 2]])
                and np.array_equal(aa, dense_a[queries[:, 0], queries[:, 1], queries[:, 2]]))
    acc = g.accessor()
    ok_acc = all(acc.get(tuple(int(v) for v in q)) == g.get_value(tuple(int(v) for v in q))
                 for q in queries[:5000])
    g2 = build_grid([(e.coord, e.value, True, e.extent) for e in g.iter_active()],
                    background=0.125, grid_class="fog")
    v2, a2 = g2.get_values(queries)
    # inactive inserted values are not part of the active stream; compare on
    # the active set plus random background probes
    ok_round = np.array_equal(vv[aa], v2[aa]) and np.array_equal(aa, a2)
    elapsed = time.process_time() - t0
    ok = ok_dense and ok_acc and ok_round and elapsed < 60
    _report("C2", ok, f"100k lookups exact vs dense oracle and accessor, "
                      f"build/iter round trip, runtime {elapsed:.1f}s (<60s)")
    assert ok_dense and ok_acc and ok_round
    assert elapsed < 60


STRICT_CONFIG = TrainConfig(
    subdomain_size=512, l1_net=(2, 16), tile_net=(2, 16), l0_net=(2, 32),
    voxel_net=(2, 32), activation="sine", frequency=3.0, ffm_scale=5.0,
    ffm_size=32, lr=1e-3, decay=0.975, interval=100.0, max_epochs=200,
    sample_interval=1, batch_size=16384, strict_topology=True, seed=5,
)


def _upper_tree_exact(source, decoded):
    if sorted(source.root) != sorted(decoded.root):
        return False
    if source.root_tiles != decoded.root_tiles:
        return False
    for key, ns in source.root.items():
        nd = decoded.root[key]
        if not (np.array_equal(ns.child_mask.bits, nd.child_mask.bits)
                and np.array_equal(ns.active_mask.bits, nd.active_mask.bits)
                and np.array_equal(ns.tiles, nd.tiles)):
            return False
    return True


def test_c3_topology_exactness(sphere128, fbm96):
    t0 = time.process_time()
    results = {}
    for name, grid in (("sphere", sphere128), ("fbm", fbm96)):
        container = encode(grid, STRICT_CONFIG)
        decoded = decode_full(container)
        results[name] = topology_equal(grid, decoded) and _upper_tree_exact(grid, decoded)
    elapsed = time.process_time() - t0
    ok = all(results.values()) and elapsed < 600
    _report("C3", ok, f"strict masks exact: sphere={results['sphere']}, "
                      f"fbm={results['fbm']}, runtime {elapsed:.0f}s (<600s)")
    assert all(results.values())
    assert elapsed < 600


def test_c4_sdf_quality(sphere128, sphere_run):
    t0 = time.process_time()
    decoded = sphere_run["decoded"]
    iou_value = iou(sphere128, decoded)
    mcd_value = mcd(sphere128, decoded)
    rmse_band = _active_rmse(sphere128, decoded)
    elapsed = sphere_run["seconds"] + (time.process_time() - t0)
    ok = iou_value >= 0.99 and mcd_value <= 0.5 and elapsed < 900
    _report("C4", ok, f"IoU={iou_value:.4f} (>=0.99), mCD={mcd_value:.4f}dx "
                      f"(<=0.5dx), band RMSE={rmse_band:.4f}dx, "
                      f"runtime {elapsed:.0f}s (<900s)")
    assert iou_value >= 0.99
    assert mcd_value <= 0.5
    assert elapsed < 900


def _active_rmse(a, b):
    coords, values = a.active_voxels()
    vb, _ = b.get_values(coords)
    return float(np.sqrt(np.mean((values.astype(np.float64) - vb) ** 2)))


def test_c5_density_quality(fbm96, fbm_run):
    value = rmse(fbm96, fbm_run["decoded"])
    elapsed = fbm_run["seconds"]
    ok = value < 0.1 and elapsed < 900
    _report("C5", ok, f"decode RMSE={value:.4f} (<0.1), "
                      f"runtime {elapsed:.0f}s (<900s)")
    assert value < 0.1
    assert elapsed < 900


def test_c6_compression(sphere128, sphere_run):
    ratio = compression_ratio(sphere_run["container"], sphere128, "rawPayload")
    payload = sphere_run["container"].payload_bytes()
    ok = ratio > 10.0
    _report("C6", ok, f"rawPayload ratio={ratio:.2f} (>10), "
                      f"payload={payload} bytes")
    assert ratio > 10.0


def test_c7_gate_blend_properties(rng):
    # partition of unity over fully covered interior points
    layout = SubdomainLayout(size=512)
    cells = [(x, y, z) for x in range(3) for y in range(3) for z in range(3)]
    for sid, cell in enumerate(sorted(cells)):
        layout.subdomains.append(Subdomain(id=sid, cell=cell, size=512))
        layout.cell_to_id[cell] = sid
    pts = rng.uniform(512 + 2 * HALO, 1024 - 2 * HALO, size=(10_000, 3))
    total = np.zeros(len(pts))
    for sub in layout.subdomains:
        total += gate_weight(sub, pts)
    pou_err = float(np.max(np.abs(total - 1.0)))
    # corner point activates eight gates
    corner = assign_points(layout, np.array([[1024.0, 1024.0, 1024.0]]))
    corner_gates = len(corner)
    # seeded two-expert boundary: sphere straddling two cells
    grid = gen_sphere_sdf(SphereSpec(center=(512.0, 64.0, 64.0), radius=40.0,
                                     voxel_size=1.0, half_width=3.0))
    cfg = TrainConfig(subdomain_size=512, l1_net=(2, 16), tile_net=None,
                      l0_net=(2, 32), voxel_net=(3, 48), activation="sine",
                      frequency=3.0, ffm_scale=5.0, ffm_size=48, lr=1e-3,
                      max_epochs=400, batch_size=16384, seed=3)
    container = encode(grid, cfg)
    assert len(container.experts) == 2
    step = 1e-3
    xs = np.arange(500.0, 524.0, step)
    line = np.stack([xs, np.full_like(xs, 64.0), np.full_like(xs, 64.0)], axis=1)
    from svcodec.inference import blended_values, eval_net
    blended, covered = blended_values(container.layout, container.experts, line)
    jumps = np.abs(np.diff(blended))
    internal = 0.0
    for e in container.experts:
        vals = eval_net(e, e.voxel_regressor, line).ravel()
        internal = max(internal, float(np.abs(np.diff(vals)).max()))
    jump_max = float(jumps[covered[1:] & covered[:-1]].max())
    ok = pou_err <= 1e-6 and corner_gates == 8 and jump_max <= internal + 1e-5
    _report("C7", ok, f"partition-of-unity max |sum-1|={pou_err:.2e} (<=1e-6), "
                      f"corner gates={corner_gates} (=8), boundary jump "
                      f"{jump_max:.2e} <= internal {internal:.2e} + 1e-5")
    assert pou_err <= 1e-6
    assert corner_gates == 8
    assert jump_max <= internal + 1e-5


def test_c8_online_offline_equivalence(sphere128, sphere_run):
    decoded = sphere_run["decoded"]
    hybrid = make_hybrid(sphere_run["container"])
    coords, _ = decoded.active_voxels()
    qv, qa = hybrid.query(coords)
    dv, da = decoded.get_values(coords)
    max_diff = float(np.max(np.abs(qv - dv)))
    # instrumented counter: every evaluation was at an active leaf voxel
    evals = hybrid.regressor_evaluations
    inactive_evals = evals - int(np.count_nonzero(qa))
    ok = max_diff <= 1e-6 and np.array_equal(qa, da) and inactive_evals == 0
    _report("C8", ok, f"query vs decode max |diff|={max_diff:.2e} (<=1e-6) over "
                      f"{len(coords)} active voxels, inactive-coordinate "
                      f"evaluations={inactive_evals} (=0)")
    assert max_diff <= 1e-6
    assert np.array_equal(qa, da)
    assert inactive_evals == 0


SEQ_CONFIG = TrainConfig(
    subdomain_size=512, l1_net=(2, 16), tile_net=None, l0_net=(2, 24),
    voxel_net=(3, 32), activation="sine", frequency=3.0, ffm_scale=5.0,
    ffm_size=32, lr=1e-3, refine_lr=1e-3, decay=0.975, interval=100.0,
    max_epochs=600, sample_interval=1, batch_size=16384, seed=6,
)


def test_c9_temporal_warm_start():
    t0 = time.process_time()
    spec = SphereSpec(center=(40, 40, 40), radius=20.0, half_width=3.0)
    frames = gen_moving_sphere_sequence(spec, 6, (2.0, 0.0, 0.0))
    containers, reports = encode_sequence(frames, SEQ_CONFIG)
    cold_epochs = reports[0].detail["cold_epochs"]
    warm_epochs = [r.epochs for r in reports[1:]]
    # every warm network early-stopped, which by construction means its epoch
    # loss reached the frame-0 target
    reached = all(net.epochs < SEQ_CONFIG.max_epochs
                  for c in containers[1:]
                  for e in c.experts
                  for _, net in e.nets() if net is not None)
    all_within = all(e <= cold_epochs for e in warm_epochs)
    speedup = cold_epochs / float(np.mean(warm_epochs))
    # weight continuity vs independent cold runs
    w = [c.experts[0].voxel_regressor.params.flatten() for c in containers]
    consec = float(np.linalg.norm(w[2] - w[1]))
    solo1 = encode(frames[1], SEQ_CONFIG)
    solo2 = encode(frames[2], SEQ_CONFIG)
    indep = float(np.linalg.norm(
        solo2.experts[0].voxel_regressor.params.flatten()
        - solo1.experts[0].voxel_regressor.params.flatten()))
    elapsed = time.process_time() - t0
    ok = all_within and speedup >= 1.0 and consec < indep and reached
    _report("C9", ok, f"warm epochs {warm_epochs} all <= cold {cold_epochs:.0f} "
                      f"with early stop on every net={reached}, cold/warm "
                      f"speedup={speedup:.2f} (>=1.0, reported), weight distance "
                      f"consecutive {consec:.2f} < independent {indep:.2f}, "
                      f"runtime {elapsed:.0f}s")
    assert reached
    assert all_within
    assert speedup >= 1.0
    assert consec < indep


def test_c10_accuracy_vs_interpolation(fbm96, fbm_run):
    container = fbm_run["container"]
    decoded = fbm_run["decoded"]
    coords, truth = fbm96.active_voxels()
    analytic = fbm(coords.astype(np.float64) * FBM_SPEC.voxel_size, FBM_SPEC)
    dv, _ = decoded.get_values(coords)
    rmse_neural = float(np.sqrt(np.mean((dv.astype(np.float64) - analytic) ** 2)))
    # explicit grid with matched payload bytes, nearest-neighbor sampled
    payload = container.payload_bytes()
    n_coarse = max(2, int(round((payload / 4) ** (1 / 3))))
    side = 96
    stride = side / n_coarse
    centers = (np.arange(n_coarse) + 0.5) * stride
    cx, cy, cz = np.meshgrid(centers, centers, centers, indexing="ij")
    coarse_pts = np.stack([cx.ravel(), cy.ravel(), cz.ravel()], axis=1)
    coarse_vals = fbm(coarse_pts * FBM_SPEC.voxel_size, FBM_SPEC).reshape(
        n_coarse, n_coarse, n_coarse)
    idx = np.clip((coords / stride).astype(int), 0, n_coarse - 1)
    nn_vals = coarse_vals[idx[:, 0], idx[:, 1], idx[:, 2]]
    rmse_nn = float(np.sqrt(np.mean((nn_vals - analytic) ** 2)))
    ok = rmse_neural <= rmse_nn
    _report("C10", ok, f"neural RMSE={rmse_neural:.4f} <= nearest-neighbor "
                       f"RMSE={rmse_nn:.4f} at matched payload "
                       f"({payload} bytes ~ {n_coarse}^3 voxels)")
    assert rmse_neural <= rmse_nn


def test_c11_format_robustness(sphere_run, tmp_path):
    container = sphere_run["container"]
    blob = serialize_container(container)
    ok_round = blob == serialize_container(read_container(sphere_run["path"]))
    corrupt = bytearray(blob)
    corrupt[len(blob) // 2] ^= 0xFF
    from svcodec.container import deserialize_container
    try:
        deserialize_container(bytes(corrupt))
        corrupted_ok = False
    except (ChecksumError, TruncationError):
        corrupted_ok = True
    # CLI exit codes for the same cases
    from svcodec.cli import main as cli_main
    bad = tmp_path / "bad.nvdb"
    bad.write_bytes(bytes(corrupt))
    code_corrupt = cli_main(["decode", str(bad), str(tmp_path / "o.nvgr")])
    trunc = tmp_path / "trunc.nvdb"
    trunc.write_bytes(blob[:97])
    code_trunc = cli_main(["decode", str(trunc), str(tmp_path / "o2.nvgr")])
    ok = ok_round and corrupted_ok and code_corrupt == 2 and code_trunc == 2
    _report("C11", ok, f"round trip byte-identical={ok_round}, corrupted byte "
                       f"exit={code_corrupt} (=2), truncation exit={code_trunc} (=2)")
    assert ok_round and corrupted_ok
    assert code_corrupt == 2
    assert code_trunc == 2
