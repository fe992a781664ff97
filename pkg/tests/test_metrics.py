import numpy as np
import pytest

from svcodec.errors import MetricError
from svcodec.grid import build_grid
from svcodec.metrics import (
    compression_ratio,
    extract_surface_samples,
    iou,
    mcd,
    rmse,
    sample_trilinear,
)
from svcodec.procgen import FbmSpec, SphereSpec, gen_fbm_density, gen_sphere_sdf


@pytest.fixture(scope="module")
def sphere_pair():
    a = gen_sphere_sdf(SphereSpec(center=(24, 24, 24), radius=16.0))
    b = gen_sphere_sdf(SphereSpec(center=(24, 24, 24), radius=17.0))
    return a, b


def _dense_occupancy_iou(a, b, lo, hi):
    ii = np.arange(lo, hi)
    x, y, z = np.meshgrid(ii, ii, ii, indexing="ij")
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)
    va, _ = a.get_values(pts)
    vb, _ = b.get_values(pts)
    occ_a = va <= 0
    occ_b = vb <= 0
    return np.count_nonzero(occ_a & occ_b) / np.count_nonzero(occ_a | occ_b)


def test_iou_self_is_one(small_sphere):
    assert iou(small_sphere, small_sphere) == 1.0


def test_iou_disjoint_spheres_zero():
    a = gen_sphere_sdf(SphereSpec(center=(20, 20, 20), radius=10.0))
    b = gen_sphere_sdf(SphereSpec(center=(120, 20, 20), radius=10.0))
    assert iou(a, b) == 0.0


def test_iou_matches_dense_scan(sphere_pair):
    a, b = sphere_pair
    assert iou(a, b) == pytest.approx(_dense_occupancy_iou(a, b, -4, 52), abs=1e-12)


def test_iou_mismatched_voxel_size():
    a = gen_sphere_sdf(SphereSpec(radius=10.0, voxel_size=1.0))
    b = gen_sphere_sdf(SphereSpec(radius=10.0, voxel_size=0.5))
    with pytest.raises(MetricError):
        iou(a, b)


def test_iou_fog_active_bits():
    spec = FbmSpec(seed=2, domain=((0, 0, 0), (32, 32, 32)), threshold=0.5)
    g = gen_fbm_density(spec)
    assert iou(g, g) == 1.0
    other = gen_fbm_density(FbmSpec(seed=2, domain=((0, 0, 0), (32, 32, 32)),
                                    threshold=0.55))
    value = iou(g, other)
    # the 0.55-thresholded active set is a strict subset
    assert 0 < value < 1
    assert value == other.active_voxel_count() / g.active_voxel_count()


def test_rmse_identical_zero(small_sphere):
    assert rmse(small_sphere, small_sphere) == 0.0


def test_rmse_constant_offset():
    coords = [((x, y, z), 0.5, True) for x in range(4) for y in range(4)
              for z in range(4)]
    a = build_grid(coords, background=0.0, grid_class="fog")
    b = build_grid([(c, 0.6, True) for c, _, _ in coords], background=0.0,
                   grid_class="fog")
    assert rmse(a, b) == pytest.approx(0.1, abs=1e-6)


def test_rmse_random_perturbation_matches_sigma(rng):
    n = 24
    coords = [(x, y, z) for x in range(n) for y in range(n) for z in range(n)]
    base = rng.random(len(coords)) * 0.5 + 0.25
    noise = rng.normal(0, 0.05, len(coords))
    a = build_grid([(c, float(v), True) for c, v in zip(coords, base)],
                   background=0.0, grid_class="fog")
    b = build_grid([(c, float(v + e), True) for c, v, e in zip(coords, base, noise)],
                   background=0.0, grid_class="fog")
    measured = rmse(a, b)
    assert abs(measured - 0.05) / 0.05 < 0.05


def test_rmse_empty_union_raises():
    a = build_grid([], background=0.0, grid_class="fog")
    b = build_grid([], background=0.0, grid_class="fog")
    with pytest.raises(MetricError):
        rmse(a, b)


def test_surface_samples_radii(small_sphere):
    samples = extract_surface_samples(small_sphere)
    assert len(samples) > 500
    radii = np.linalg.norm(samples.points - 20.0, axis=1)
    assert np.max(np.abs(radii - 12.0)) < 0.5


def test_surface_samples_interpolated_sdf_near_zero(small_sphere):
    samples = extract_surface_samples(small_sphere)
    vals = sample_trilinear(small_sphere, samples.points)
    assert np.max(np.abs(vals)) < 1e-3


def test_surface_samples_all_positive_grid_empty():
    g = build_grid([((x, 0, 0), 1.0, True) for x in range(8)],
                   background=3.0, grid_class="sdf")
    assert len(extract_surface_samples(g)) == 0


def test_surface_sample_count_scales_with_area():
    small = gen_sphere_sdf(SphereSpec(center=(20, 20, 20), radius=12.0))
    big = gen_sphere_sdf(SphereSpec(center=(40, 40, 40), radius=24.0))
    ratio = len(extract_surface_samples(big)) / len(extract_surface_samples(small))
    assert abs(ratio - 4.0) / 4.0 < 0.15


def test_mcd_self_distance_tiny(small_sphere):
    assert mcd(small_sphere, small_sphere) < 1e-3


def test_mcd_offset_spheres(sphere_pair):
    a, b = sphere_pair
    value = mcd(a, b)
    assert abs(value - 1.0) / 1.0 < 0.10


def test_mcd_symmetry(sphere_pair):
    a, b = sphere_pair
    assert mcd(a, b) == mcd(b, a)


def test_mcd_triangleish_sanity():
    a = gen_sphere_sdf(SphereSpec(center=(24, 24, 24), radius=14.0))
    b = gen_sphere_sdf(SphereSpec(center=(24, 24, 24), radius=15.0))
    c = gen_sphere_sdf(SphereSpec(center=(24, 24, 24), radius=16.0))
    assert mcd(a, c) <= mcd(a, b) + mcd(b, c) + 2.0


def test_compression_ratio_modes(small_sphere, tiny_config):
    from svcodec.encoder import encode
    container = encode(small_sphere, tiny_config)
    raw = compression_ratio(container, small_sphere, "rawPayload")
    file_ratio = compression_ratio(container, small_sphere, "filePayload")
    assert raw > 0
    assert file_ratio >= 0.5 * raw
    with pytest.raises(MetricError):
        compression_ratio(container, small_sphere, "bogus")


def test_compression_ratio_identity_scale(small_sphere, tiny_config):
    from svcodec.encoder import encode
    container = encode(small_sphere, tiny_config)
    payload = container.payload_bytes()
    total = small_sphere.topology_stats().total_bytes
    assert compression_ratio(container, small_sphere) == pytest.approx(total / payload)
