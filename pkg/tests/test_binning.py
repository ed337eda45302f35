import math

import numpy as np
import pytest

from fastsplat import binning as bn
from fastsplat.raster_forward import RenderSettings, bound_splats, geometry_3d, project_gaussians

from conftest import orbit_camera, random_store


def test_bound_square_examples():
    box = bn.bound_square([32, 32], np.eye(2), 64, 64)
    assert box.half_extent == (3.0, 3.0)
    box = bn.bound_square([32, 32], np.diag([4.0, 1.0]), 64, 64)
    assert box.half_extent == (6.0, 6.0)
    assert bn.bound_square([500, 500], np.eye(2), 64, 64).empty


def test_bound_rect_examples():
    # sqrt(2 ln 255) = 3.32904; the often quoted 3.3297 is a rounding slip
    assert abs(bn.opacity_bound_factor(1.0) - math.sqrt(2 * math.log(255))) < 1e-12
    assert abs(bn.opacity_bound_factor(1.0) - 3.32904) < 1e-5
    assert bn.bound_rect([32, 32], np.eye(2), 1 / 255, 64, 64).empty
    k = bn.opacity_bound_factor(0.5)
    assert abs(k - math.sqrt(-2 * math.log(1 / 127.5))) < 1e-12
    # brute-force: farthest pixel offset along x where 0.5 * G still reaches 1/255
    xs = np.linspace(0, 5, 500001)
    alive = xs[0.5 * np.exp(-0.5 * xs ** 2) >= 1 / 255]
    assert abs(alive.max() - k) < 1e-4
    box = bn.bound_rect([32, 32], np.diag([4.0, 1.0]), 1.0, 64, 64)
    assert np.allclose(box.half_extent, (2 * 3.32904, 3.32904), atol=1e-3)
    plain = bn.bound_rect([32, 32], np.eye(2), 0.05, 64, 64, opacity_aware=False)
    aware = bn.bound_rect([32, 32], np.eye(2), 0.05, 64, 64)
    assert aware.half_extent[0] < plain.half_extent[0]


def test_tile_cull_single_tile():
    grid = bn.TileGrid(64, 64)
    box = bn.bound_rect([24, 24], np.eye(2), 1.0, 64, 64)
    assert bn.tile_cull_exact([24, 24], [1, 0, 1], 1.0, box, grid) == [grid.tiles_x + 1]


def test_tile_cull_isotropic_geometric_oracle(rng):
    grid = bn.TileGrid(128, 128)
    for _ in range(20):
        m = rng.uniform(20, 108, 2)
        sigma = rng.uniform(2, 12)
        conic = [1 / sigma ** 2, 0, 1 / sigma ** 2]
        box = bn.bound_rect(m, sigma ** 2 * np.eye(2), 1.0, 128, 128)
        kept = set(bn.tile_cull_exact(m, conic, 1.0, box, grid))
        expect = set()
        for ty in range(grid.tiles_y):
            for tx in range(grid.tiles_x):
                # nearest pixel centre of the tile to the mean
                px = np.clip(m[0], tx * 16 + 0.5, tx * 16 + 15.5)
                py = np.clip(m[1], ty * 16 + 0.5, ty * 16 + 15.5)
                if np.hypot(px - m[0], py - m[1]) <= 3.32904 * sigma * (1 + 1e-6):
                    expect.add(ty * grid.tiles_x + tx)
        assert kept == expect


def _brute_force_tiles(m, conic, o, grid):
    ys, xs = np.mgrid[0:grid.height, 0:grid.width] + 0.5
    dx, dy = xs - m[0], ys - m[1]
    q = conic[0] * dx * dx + 2 * conic[1] * dx * dy + conic[2] * dy * dy
    hit = o * np.exp(-0.5 * q) >= bn.TAU_ALPHA
    tiles = (ys[hit] // 16).astype(int) * grid.tiles_x + (xs[hit] // 16).astype(int)
    return set(tiles.tolist())


def test_tile_cull_thin_diagonal_matches_pixel_brute_force():
    grid = bn.TileGrid(64, 64)
    cov = np.array([[120.0, 118.0], [118.0, 120.0]])
    inv = np.linalg.inv(cov)
    conic = [inv[0, 0], inv[0, 1], inv[1, 1]]
    m = [32.0, 32.0]
    box = bn.bound_rect(m, cov, 0.9, 64, 64)
    assert box.x1 // 16 - box.x0 // 16 == 3 and box.y1 // 16 - box.y0 // 16 == 3
    kept = set(bn.tile_cull_exact(m, conic, 0.9, box, grid))
    assert kept == _brute_force_tiles(m, conic, 0.9, grid)
    assert len(kept) < 16


def _view(rng, n, size=64, opacity=(0.5, 1.5)):
    store = random_store(rng, n, opacity=opacity)
    cam = orbit_camera(rng, size)
    s = RenderSettings()
    geom, _ = geometry_3d(store, s)
    return cam, project_gaussians(cam, geom, s), bn.TileGrid(size, size)


def _instances(splats, grid, mode):
    rects, q = bound_splats(splats, grid, RenderSettings(bounding=mode))
    return bn.build_instances(splats.mean2d, splats.conic, q, rects, splats.depth, grid,
                              mode == "exact")


def test_exact_culling_is_sound_over_random_splats(rng):
    cam, sp, grid = _view(rng, 100)
    inst = _instances(sp, grid, "exact")
    for g in np.flatnonzero(sp.visible):
        kept = set(inst.tile_key[inst.gaussian_index == g].tolist())
        truth = _brute_force_tiles(sp.mean2d[g], sp.conic[g], sp.eff_opacity[g], grid)
        assert truth <= kept


def test_instance_counts_are_monotone(rng):
    for _ in range(5):
        _, sp, grid = _view(rng, 80)
        n = {m: len(_instances(sp, grid, m)) for m in bn.BOUNDING_MODES}
        assert n["exact"] <= n["rect_opacity"] <= n["rect"]


def test_build_instances_examples():
    grid = bn.TileGrid(64, 64)
    m = np.array([[32.0, 32.0]])
    conic = np.array([[1.0, 0, 1.0]])
    q = np.array([100.0])
    rects = np.array([[20, 40, 20, 40]])
    inst = bn.build_instances(m, conic, q, rects, np.array([1.0], np.float32), grid, False)
    assert len(inst) == 4
    m = np.array([[8.0, 8.0], [24.0, 8.0], [8.0, 24.0]])
    rects = np.array([[6, 10, 6, 10], [22, 26, 6, 10], [6, 10, 22, 26]])
    inst = bn.build_instances(m, np.repeat(conic, 3, 0), np.full(3, 9.0), rects,
                              np.ones(3, np.float32), grid, True)
    assert inst.gaussian_index.tolist() == [0, 1, 2]


def test_sort_examples():
    # already sorted: identity permutation
    inst = bn.TileInstanceList(np.arange(4), np.array([0, 0, 1, 1], np.uint32),
                               bn.depth_keys(np.array([1.0, 2.0, 1.0, 2.0], np.float32)))
    _, perm, _ = bn.sort_two_stage(inst)
    assert perm.tolist() == [0, 1, 2, 3]
    # 2 tiles x 2 depths crossed
    inst = bn.TileInstanceList(np.array([0, 0, 1, 1]), np.array([1, 0, 1, 0], np.uint32),
                               bn.depth_keys(np.array([2.0, 2.0, 1.0, 1.0], np.float32)))
    a, pa, _ = bn.sort_two_stage(inst)
    b, pb, _ = bn.sort_combined(inst)
    assert pa.tolist() == pb.tolist() == [3, 1, 2, 0]
    # equal depths keep their original order
    inst = bn.TileInstanceList(np.array([0, 1, 2]), np.zeros(3, np.uint32),
                               bn.depth_keys(np.full(3, 1.5, np.float32)))
    assert bn.sort_two_stage(inst)[1].tolist() == [0, 1, 2]


def test_two_stage_sort_equals_combined_on_random_instances(rng):
    g = np.sort(rng.integers(0, 3000, 20000))
    tiles = rng.integers(0, 300, g.size).astype(np.uint32)
    depth = rng.uniform(0.2, 50, 3000).astype(np.float32)
    depth[::7] = depth[0]  # ties across Gaussians
    inst = bn.TileInstanceList(g, tiles, bn.depth_keys(depth)[g])
    assert np.array_equal(bn.sort_two_stage(inst)[1], bn.sort_combined(inst)[1])
    keys = (tiles.astype(np.uint64) << np.uint64(32)) | inst.depth_key.astype(np.uint64)
    assert np.array_equal(bn.sort_combined(inst)[1], np.argsort(keys, kind="stable"))


def test_two_stage_rejects_interleaved_input():
    inst = bn.TileInstanceList(np.array([0, 1, 0]), np.zeros(3, np.uint32), np.zeros(3, np.uint32))
    with pytest.raises(ValueError):
        bn.sort_two_stage(inst)


def test_depth_keys_preserve_order(rng):
    d = np.sort(rng.uniform(0.01, 1e4, 1000)).astype(np.float32)
    k = bn.depth_keys(d)
    assert np.all(np.diff(k.astype(np.int64)) >= 0)


def test_tile_ranges_examples(rng):
    grid = bn.TileGrid(64, 64)
    empty = bn.TileInstanceList(np.zeros(0, np.int64), np.zeros(0, np.uint32), np.zeros(0, np.uint32))
    r = bn.build_tile_ranges(empty, grid)
    assert np.all(r[:, 0] == r[:, 1])
    inst = bn.TileInstanceList(np.arange(5), np.zeros(5, np.uint32), np.zeros(5, np.uint32))
    r = bn.build_tile_ranges(inst, grid)
    assert r[0].tolist() == [0, 5] and np.all(r[1:, 1] - r[1:, 0] == 0)
    tiles = np.sort(rng.integers(0, grid.n_tiles, 500)).astype(np.uint32)
    inst = bn.TileInstanceList(np.arange(500), tiles, np.zeros(500, np.uint32))
    r = bn.build_tile_ranges(inst, grid)
    assert (r[:, 1] - r[:, 0]).sum() == 500


def test_morton_examples(rng):
    assert bn.morton_encode(np.array([[1, 1, 1]])).tolist() == [7]
    assert bn.morton_encode(np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [2, 0, 0]])).tolist() == [1, 2, 4, 8]
    pts = np.vstack([rng.uniform(0, 1, (20, 3)), [[0, 0, 0]], [[1, 1, 1]]])
    codes = bn.morton_codes(pts)
    assert codes[20] == 0 and np.argsort(codes, kind="stable")[0] == 20


def test_morton_reorder_permutes_companions(rng):
    store = random_store(rng, 50)

    class Tag:
        def __init__(self):
            self.values = np.arange(50)

        def reindex(self, idx):
            self.values = self.values[idx]

    tag = Tag()
    before = store.copy()
    perm = bn.morton_reorder(store, tag, None)
    assert np.array_equal(tag.values, perm)
    assert np.array_equal(store.means, before.means[perm])
    codes = bn.morton_codes(store.means)
    assert np.all(np.diff(codes.astype(np.float64)) >= 0)
