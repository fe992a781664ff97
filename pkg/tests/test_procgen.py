import math

import numpy as np
import pytest

from svcodec.errors import GenerationError
from svcodec.grid import GRID_CLASS_FOG, GRID_CLASS_SDF
from svcodec.procgen import (
    FbmSpec,
    K1,
    K2,
    K3,
    K4,
    K5,
    SphereSpec,
    fbm,
    gen_fbm_density,
    gen_moving_sphere_sequence,
    gen_sphere_sdf,
    gen_torus_sdf,
)


def test_sphere_center_is_inside_and_clamped(small_sphere):
    v, a = small_sphere.get_value((20, 20, 20))
    assert not a
    assert v == -3.0


def test_sphere_surface_voxel_active(small_sphere):
    # (32, 20, 20) lies exactly on the radius-12 surface
    v, a = small_sphere.get_value((32, 20, 20))
    assert a
    assert abs(v) <= 0.5


def test_sphere_band_count_matches_area_estimate():
    g = gen_sphere_sdf(SphereSpec(center=(48, 48, 48), radius=40.0,
                                  voxel_size=1.0, half_width=3.0))
    # brute-force scan of the bounding box
    n = 96
    ii = np.arange(n)
    x, y, z = np.meshgrid(ii, ii, ii, indexing="ij")
    d = np.sqrt((x - 48.0) ** 2 + (y - 48.0) ** 2 + (z - 48.0) ** 2) - 40.0
    expected = int(np.count_nonzero(np.abs(d) < 3.0))
    assert g.active_voxel_count() == expected
    estimate = 4 * math.pi * 40.0**2 * 6
    assert abs(g.active_voxel_count() - estimate) / estimate < 0.10


def test_sphere_active_values_within_band(small_sphere):
    small_sphere.check_invariants()
    coords, values = small_sphere.active_voxels()
    assert np.all(np.abs(values) < 3.0)


def test_sphere_degenerate_radius():
    with pytest.raises(GenerationError):
        gen_sphere_sdf(SphereSpec(radius=-1.0))
    with pytest.raises(GenerationError):
        gen_sphere_sdf(SphereSpec(radius=5.0, half_width=3.0))  # band self-intersects


def test_sphere_eikonal_central_differences(small_sphere):
    coords, values = small_sphere.active_voxels()
    # interior-band voxels: all six neighbors still active
    shifted = []
    for axis in range(3):
        for sign in (-1, 1):
            nb = coords.copy()
            nb[:, axis] += sign
            v, a = small_sphere.get_values(nb)
            shifted.append((v, a))
    all_active = np.logical_and.reduce([a for _, a in shifted])
    grads = np.stack([
        (shifted[1][0] - shifted[0][0]) * 0.5,
        (shifted[3][0] - shifted[2][0]) * 0.5,
        (shifted[5][0] - shifted[4][0]) * 0.5,
    ], axis=1)
    norms = np.linalg.norm(grads[all_active], axis=1)
    assert norms.min() > 0.95 and norms.max() < 1.05


def test_fbm_determinism():
    spec = FbmSpec(seed=7, domain=((0, 0, 0), (32, 32, 32)), threshold=0.45)
    a = gen_fbm_density(spec)
    b = gen_fbm_density(spec)
    ca, va = a.active_voxels()
    cb, vb = b.active_voxels()
    assert np.array_equal(ca, cb)
    assert np.array_equal(va, vb)


def test_fbm_threshold_zero_fills_domain():
    spec = FbmSpec(seed=1, domain=((0, 0, 0), (16, 16, 16)), threshold=0.0)
    g = gen_fbm_density(spec)
    assert g.active_voxel_count() == 16**3
    assert g.grid_class == GRID_CLASS_FOG


def test_fbm_values_in_unit_range():
    spec = FbmSpec(seed=3, domain=((0, 0, 0), (32, 32, 32)), threshold=0.4)
    g = gen_fbm_density(spec)
    _, values = g.active_voxels()
    assert values.min() > 0.4
    assert values.max() <= 1.0


def test_fbm_empty_result_reported(caplog):
    spec = FbmSpec(seed=3, domain=((0, 0, 0), (16, 16, 16)), threshold=1.0)
    with caplog.at_level("WARNING"):
        g = gen_fbm_density(spec)
    assert g.active_voxel_count() == 0
    assert any("empty" in rec.message for rec in caplog.records)


# -- independent scalar re-evaluation of the documented noise formula --------


def _hash01(ix, iy, iz, seed):
    mask = (1 << 64) - 1
    h = ((ix & mask) * int(K1)) & mask
    h ^= ((iy & mask) * int(K2)) & mask
    h ^= ((iz & mask) * int(K3)) & mask
    h ^= ((seed & mask) * int(K4)) & mask
    h ^= h >> 30
    h = (h * int(K2)) & mask
    h ^= h >> 27
    h = (h * int(K3)) & mask
    h ^= h >> 31
    return (h >> 40) / float(1 << 24)


def _quintic_s(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def _value_noise_s(px, py, pz, seed):
    ix, iy, iz = math.floor(px), math.floor(py), math.floor(pz)
    fx, fy, fz = px - ix, py - iy, pz - iz
    wx, wy, wz = _quintic_s(fx), _quintic_s(fy), _quintic_s(fz)
    def c(dx, dy, dz):
        return _hash01(ix + dx, iy + dy, iz + dz, seed)
    c00 = c(0, 0, 0) + wz * (c(0, 0, 1) - c(0, 0, 0))
    c01 = c(0, 1, 0) + wz * (c(0, 1, 1) - c(0, 1, 0))
    c10 = c(1, 0, 0) + wz * (c(1, 0, 1) - c(1, 0, 0))
    c11 = c(1, 1, 0) + wz * (c(1, 1, 1) - c(1, 1, 0))
    c0 = c00 + wy * (c01 - c00)
    c1 = c10 + wy * (c11 - c10)
    return c0 + wx * (c1 - c0)


def _fbm_s(px, py, pz, spec):
    total, amp, freq, norm = 0.0, 1.0, spec.base_frequency, 0.0
    for octave in range(spec.octaves):
        seed = (spec.seed ^ ((octave * int(K5)) & ((1 << 64) - 1))) & ((1 << 64) - 1)
        total += amp * _value_noise_s(px * freq, py * freq, pz * freq, seed)
        norm += amp
        amp *= spec.gain
        freq *= spec.lacunarity
    return min(max(total / norm, 0.0), 1.0)


def test_fbm_matches_independent_scalar_oracle(rng):
    spec = FbmSpec(seed=7, octaves=3, base_frequency=0.07,
                   domain=((0, 0, 0), (48, 48, 48)), threshold=0.5)
    g = gen_fbm_density(spec)
    coords, values = g.active_voxels()
    take = rng.integers(0, len(coords), 200)
    for i in take:
        x, y, z = (float(v) for v in coords[i])
        assert values[i] == pytest.approx(_fbm_s(x, y, z, spec), abs=1e-6)
    # and the mean over all active voxels agrees
    mean_oracle = np.mean([_fbm_s(*map(float, coords[i]), spec)
                           for i in take])
    assert np.mean(values[take]) == pytest.approx(mean_oracle, abs=1e-6)


def test_torus_self_iou_and_interior():
    g = gen_torus_sdf(20.0, 8.0, 1.0, 3.0, center=(40, 40, 40))
    from svcodec.metrics import iou
    assert iou(g, g) == 1.0
    # center of the tube (on the major circle) is deep interior
    v, a = g.get_value((60, 40, 40))
    assert not a and v == -3.0


def test_torus_ray_through_hole_crosses_four_times():
    g = gen_torus_sdf(20.0, 8.0, 1.0, 3.0, center=(40, 40, 40))
    # march along x through the torus center plane: enter/exit tube twice
    crossings = 0
    prev = None
    for x in range(0, 81):
        v, _ = g.get_value((x, 40, 40))
        sign = v <= 0
        if prev is not None and sign != prev:
            crossings += 1
        prev = sign
    assert crossings == 4


def test_torus_degenerate_radii():
    with pytest.raises(GenerationError):
        gen_torus_sdf(10.0, 0.0, 1.0, 3.0)
    with pytest.raises(GenerationError):
        gen_torus_sdf(10.0, 5.0, 1.0, 3.0)


def test_moving_sequence_zero_velocity_identical():
    spec = SphereSpec(center=(16, 16, 16), radius=9.0, half_width=3.0)
    frames = gen_moving_sphere_sequence(spec, 3, (0.0, 0.0, 0.0))
    c0, v0 = frames[0].active_voxels()
    for f in frames[1:]:
        c, v = f.active_voxels()
        assert np.array_equal(c, c0)
        assert np.array_equal(v, v0)


def test_moving_sequence_integer_velocity_translates():
    spec = SphereSpec(center=(16, 16, 16), radius=9.0, half_width=3.0)
    frames = gen_moving_sphere_sequence(spec, 3, (2.0, 0.0, 0.0))
    c0, _ = frames[0].active_voxels()
    for t, f in enumerate(frames):
        c, _ = f.active_voxels()
        shifted = c0.copy()
        shifted[:, 0] += 2 * t
        assert np.array_equal(np.unique(c, axis=0), np.unique(shifted, axis=0))


def test_moving_sequence_overlap():
    from svcodec.metrics import iou
    spec = SphereSpec(center=(24, 24, 24), radius=16.0, half_width=3.0)
    frames = gen_moving_sphere_sequence(spec, 3, (1.0, 0.0, 0.0))
    assert iou(frames[0], frames[1]) > 0.8


def test_moving_sequence_needs_two_frames():
    with pytest.raises(GenerationError):
        gen_moving_sphere_sequence(SphereSpec(), 1, (1, 0, 0))
