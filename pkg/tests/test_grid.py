import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svcodec.errors import DuplicateSampleError
from svcodec.grid import (
    Accessor,
    GridBuilder,
    LEAF_SIZE,
    VdbGrid,
    build_grid,
    coord_to_keys,
    keys_to_coord,
)

coord_component = st.integers(min_value=-(2**30) + 1, max_value=2**30 - 1)
coords = st.tuples(coord_component, coord_component, coord_component)


def test_coord_to_keys_origin():
    assert coord_to_keys((0, 0, 0)) == ((0, 0, 0), 0, 0, 0)


def test_coord_to_keys_4096():
    # 4096 = 2^(5+4+3) starts the next root entry with all-zero local indices
    root, i2, i1, i0 = coord_to_keys((4096, 0, 0))
    assert root == (4096, 0, 0)
    assert (i2, i1, i0) == (0, 0, 0)


def test_coord_to_keys_negative_selects_last_slots():
    root, i2, i1, i0 = coord_to_keys((-1, -1, -1))
    assert root == (-4096, -4096, -4096)
    assert (i2, i1, i0) == (32767, 4095, 511)
    # brute-force oracle: a grid holding only that voxel resolves it exactly
    g = build_grid([((-1, -1, -1), 2.5, True)], background=0.0)
    assert g.get_value((-1, -1, -1)) == (2.5, True)
    assert g.get_value((-2, -1, -1)) == (0.0, False)


@given(coords)
@settings(max_examples=300, deadline=None)
def test_key_decomposition_bijective(c):
    root, i2, i1, i0 = coord_to_keys(c)
    assert keys_to_coord(root, i2, i1, i0) == c
    assert all(v % 4096 == 0 for v in root)


def test_key_decomposition_bijective_bulk(rng):
    pts = rng.integers(-(2**30) + 1, 2**30 - 1, size=(100_000, 3))
    for c in pts[rng.integers(0, len(pts), 50)]:
        c = tuple(int(v) for v in c)
        root, i2, i1, i0 = coord_to_keys(c)
        assert keys_to_coord(root, i2, i1, i0) == c


def test_build_grid_empty():
    g = build_grid([], background=7.0)
    assert g.get_value((3, 4, 5)) == (7.0, False)
    st_ = g.topology_stats()
    assert st_.leaf.node_count == 0
    assert st_.total_bytes == 0


def test_build_grid_single_voxel_node_counts():
    g = build_grid([((0, 0, 0), 1.0, True)], background=0.0)
    st_ = g.topology_stats()
    assert st_.leaf.node_count == 1
    assert st_.internal1.node_count == 1
    assert st_.internal2.node_count == 1
    assert st_.leaf_value_bytes == LEAF_SIZE * 4


def test_build_grid_one_leaf_for_eight_voxels():
    samples = [((x, y, z), 1.0, True) for x in (0, 1) for y in (0, 1) for z in (0, 1)]
    g = build_grid(samples, background=0.0)
    assert g.topology_stats().leaf.node_count == 1


def test_build_grid_conflicting_duplicate():
    with pytest.raises(DuplicateSampleError) as err:
        build_grid([((1, 2, 3), 1.0, True), ((1, 2, 3), 2.0, True)], background=0.0)
    assert err.value.coord == (1, 2, 3)


def test_build_grid_identical_duplicate_ok():
    g = build_grid([((1, 2, 3), 1.0, True), ((1, 2, 3), 1.0, True)], background=0.0)
    assert g.get_value((1, 2, 3)) == (1.0, True)


def test_get_value_tile_covers_all_coordinates():
    b = GridBuilder(0.0)
    b.add_tile((8, 0, 0), 4.5, True, 8)
    g = b.finalize()
    for dx in range(8):
        for dy in range(8):
            for dz in range(8):
                assert g.get_value((8 + dx, dy, dz)) == (4.5, True)
    assert g.get_value((16, 0, 0)) == (0.0, False)


def test_mask_slot_consistency_checked(small_sphere):
    small_sphere.check_invariants()


def _dense_oracle(samples, background, extent):
    dense_v = np.full((extent, extent, extent), background, dtype=np.float32)
    dense_a = np.zeros((extent, extent, extent), dtype=bool)
    for (x, y, z), v, a in samples:
        dense_v[x, y, z] = v
        dense_a[x, y, z] = a
    return dense_v, dense_a


def test_differential_random_coords_vs_dense(rng):
    extent = 64
    n = 3000
    pts = rng.integers(0, extent, size=(n, 3))
    vals = rng.normal(size=n).astype(np.float32)
    act = rng.random(n) < 0.7
    seen = {}
    samples = []
    for p, v, a in zip(pts, vals, act):
        key = tuple(int(x) for x in p)
        if key in seen:
            continue
        seen[key] = True
        samples.append((key, float(v), bool(a)))
    g = build_grid(samples, background=0.5)
    dense_v, dense_a = _dense_oracle(samples, 0.5, extent)
    queries = rng.integers(0, extent, size=(100_000, 3))
    vv, aa = g.get_values(queries)
    assert np.array_equal(vv, dense_v[queries[:, 0], queries[:, 1], queries[:, 2]])
    assert np.array_equal(aa, dense_a[queries[:, 0], queries[:, 1], queries[:, 2]])
    acc = g.accessor()
    for q in queries[:2000]:
        q = tuple(int(x) for x in q)
        assert acc.get(q) == g.get_value(q)


def test_accessor_alternating_leaves(small_sphere, rng):
    acc = small_sphere.accessor()
    a = (20, 20, 8)   # bottom of the band
    b = (20, 20, 32)  # top of the band
    for _ in range(50):
        for q in (a, b):
            assert acc.get(q) == small_sphere.get_value(q)


def test_accessor_repeated_query_identical(small_sphere):
    acc = small_sphere.accessor()
    assert acc.get((20, 20, 32)) == acc.get((20, 20, 32))


def test_accessor_space_filling_sweep(small_sphere):
    acc = small_sphere.accessor()
    # serpentine sweep across leaf boundaries, compared pointwise
    for x in range(6, 14):
        for y in range(6, 36, 3):
            for z in range(6, 36, 2):
                q = (x, y, z)
                assert acc.get(q) == small_sphere.get_value(q)


def test_iter_active_counts(small_sphere):
    entries = list(small_sphere.iter_active())
    voxels = [e for e in entries if e.extent == 1]
    assert len(voxels) == small_sphere.active_voxel_count()


def test_iter_active_empty():
    assert list(build_grid([], background=0.0).iter_active()) == []


def test_build_iter_round_trip(rng):
    pts = rng.integers(-40, 40, size=(500, 3))
    seen = set()
    samples = []
    for p in pts:
        key = tuple(int(x) for x in p)
        if key in seen:
            continue
        seen.add(key)
        samples.append((key, float(rng.normal()), True))
    g = build_grid(samples, background=0.0)
    g2 = build_grid(
        [(e.coord, e.value, True, e.extent) for e in g.iter_active()],
        background=0.0)
    queries = rng.integers(-48, 48, size=(20_000, 3))
    v1, a1 = g.get_values(queries)
    v2, a2 = g2.get_values(queries)
    assert np.array_equal(v1, v2)
    assert np.array_equal(a1, a2)


def test_topology_stats_sphere_leaf_values_dominate():
    # needs a production-sized band; a tiny sphere is dominated by the
    # fixed level-2 node overhead
    from svcodec.procgen import SphereSpec, gen_sphere_sdf
    g = gen_sphere_sdf(SphereSpec(center=(48, 48, 48), radius=40.0,
                                  voxel_size=1.0, half_width=3.0))
    st_ = g.topology_stats()
    assert st_.leaf_value_bytes / st_.total_bytes > 0.8


def test_stats_hybrid_mode_excludes_values(small_sphere):
    full = small_sphere.topology_stats()
    topo = small_sphere.topology_stats(include_leaf_values=False)
    per_leaf = LEAF_SIZE * 4
    assert full.leaf.estimated_bytes - topo.leaf.estimated_bytes == \
        per_leaf * full.leaf.node_count


def test_get_values_with_kind(small_sphere):
    coords = np.array([[20, 20, 20], [20, 20, 32], [5000, 5000, 5000]])
    v, a, k = small_sphere.get_values(coords, with_kind=True)
    assert k[0] == 1        # interior tile
    assert k[1] == 2        # band leaf voxel
    assert k[2] == 0        # outside every root entry
