"""Splat bounding, tile culling, instance generation, sorting and z-ordering."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

TILE_SIZE = 16
TAU_ALPHA = 1.0 / 255.0
# conservative slack so float32 blending never sees a fragment the
# float64 bounding/culling tests rejected
_EXTENT_SLACK = 1e-6
_PIXEL_SLACK = 1e-4

BOUNDING_MODES = ("square", "rect", "rect_opacity", "exact")


@dataclass(frozen=True)
class TileGrid:
    width: int
    height: int
    tile_size: int = TILE_SIZE

    @property
    def tiles_x(self) -> int:
        return -(-self.width // self.tile_size)

    @property
    def tiles_y(self) -> int:
        return -(-self.height // self.tile_size)

    @property
    def n_tiles(self) -> int:
        return self.tiles_x * self.tiles_y

    @property
    def tile_key_bits(self) -> int:
        return 16 if self.n_tiles < 2 ** 16 else 32


@dataclass
class TileInstanceList:
    gaussian_index: np.ndarray   # int64 per instance
    tile_key: np.ndarray         # uint32 per instance
    depth_key: np.ndarray        # uint32 per instance
    tile_ranges: np.ndarray | None = None   # (n_tiles, 2) half-open
    key_bits_tile: int = 16

    def __len__(self) -> int:
        return self.gaussian_index.shape[0]


@dataclass
class SortStats:
    passes: int
    key_bytes: int


# truncation thresholds -----------------------------------------------------

def truncation_limit(opacity, tau_alpha=TAU_ALPHA, truncation="classic", sigma_cut=3.33,
                     opacity_aware=True):
    """Squared Mahalanobis radius ``k^2`` of the region a splat may contribute to.

    Negative where the splat cannot produce any fragment (o < tau_alpha).
    """
    opacity = np.asarray(opacity, dtype=np.float64)
    if truncation == "response":
        return np.full_like(opacity, sigma_cut * sigma_cut)
    if not opacity_aware:
        return np.full_like(opacity, -2.0 * math.log(tau_alpha))
    with np.errstate(divide="ignore"):
        q = 2.0 * np.log(np.maximum(opacity, 1e-300) / tau_alpha)
    return np.where(opacity >= tau_alpha, q, -1.0)


def opacity_bound_factor(opacity, tau_alpha=TAU_ALPHA) -> float:
    """k = sqrt(-2 ln(tau/o)); 0 when the splat is fully suppressed."""
    q = truncation_limit(np.float64(opacity), tau_alpha)
    return float(np.sqrt(q)) if q >= 0 else 0.0


# pixel and tile rectangles -------------------------------------------------

def _pixel_range(center, half, size):
    lo = np.ceil(center - half - 0.5).astype(np.int64)
    hi = np.floor(center + half - 0.5).astype(np.int64)
    return np.maximum(lo, 0), np.minimum(hi, size - 1)


def pixel_rects(mean2d, half_extents, width, height, empty=None) -> np.ndarray:
    """Inclusive pixel index ranges (x0, x1, y0, y1) whose centres lie in the box.

    Pixel ``i`` has its centre at ``i + 0.5``.
    """
    half = half_extents * (1 + _EXTENT_SLACK) + _PIXEL_SLACK
    x0, x1 = _pixel_range(mean2d[:, 0], half[:, 0], width)
    y0, y1 = _pixel_range(mean2d[:, 1], half[:, 1], height)
    rects = np.stack([x0, x1, y0, y1], axis=1)
    bad = (x0 > x1) | (y0 > y1)
    if empty is not None:
        bad |= empty
    rects[bad] = (0, -1, 0, -1)
    return rects


def half_extents_square(cov2d) -> np.ndarray:
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(mid * mid - (a * c - b * b), 0.0))
    r = 3.0 * np.sqrt(lam)
    return np.stack([r, r], axis=1)


def half_extents_rect(cov2d, qmax) -> np.ndarray:
    k = np.sqrt(np.maximum(qmax, 0.0))
    return np.stack([k * np.sqrt(cov2d[:, 0, 0]), k * np.sqrt(cov2d[:, 1, 1])], axis=1)


@dataclass
class PixelBox:
    x0: int
    x1: int
    y0: int
    y1: int
    half_extent: tuple[float, float]

    @property
    def empty(self) -> bool:
        return self.x0 > self.x1 or self.y0 > self.y1


def _box(mean2d, half, width, height, empty=False) -> PixelBox:
    r = pixel_rects(np.asarray(mean2d, float)[None], np.asarray(half, float)[None],
                    width, height, np.array([empty]))[0]
    return PixelBox(int(r[0]), int(r[1]), int(r[2]), int(r[3]), (float(half[0]), float(half[1])))


def bound_square(mean2d, cov2d, width, height) -> PixelBox:
    """Square of half-extent 3 sqrt(lambda_max) (the classic bound)."""
    half = half_extents_square(np.asarray(cov2d, float)[None])[0]
    return _box(mean2d, half, width, height)


def bound_rect(mean2d, cov2d, opacity, width, height, tau_alpha=TAU_ALPHA,
               opacity_aware=True) -> PixelBox:
    """Axis-aligned rectangle of the tau_alpha level set of the splat."""
    q = truncation_limit(np.array([opacity], float), tau_alpha, opacity_aware=opacity_aware)
    half = half_extents_rect(np.asarray(cov2d, float)[None], q)[0]
    return _box(mean2d, half, width, height, empty=bool(q[0] <= 0))


# tile culling --------------------------------------------------------------

@numba.njit(cache=True)
def _edge_min(a, b, c, fixed, lo, hi, fixed_is_x):
    # minimise the conic quadratic along an axis-aligned edge
    if fixed_is_x:
        t = -b * fixed / c
        t = min(max(t, lo), hi)
        return a * fixed * fixed + 2.0 * b * fixed * t + c * t * t
    t = -b * fixed / a
    t = min(max(t, lo), hi)
    return a * t * t + 2.0 * b * t * fixed + c * fixed * fixed


@numba.njit(cache=True)
def tile_min_quadratic(mx, my, a, b, c, x0, x1, y0, y1):
    """Minimum of the conic quadratic over the rectangle [x0,x1] x [y0,y1]."""
    if x0 <= mx <= x1 and y0 <= my <= y1:
        return 0.0
    lx, hx = x0 - mx, x1 - mx
    ly, hy = y0 - my, y1 - my
    q = _edge_min(a, b, c, lx, ly, hy, True)
    q = min(q, _edge_min(a, b, c, hx, ly, hy, True))
    q = min(q, _edge_min(a, b, c, ly, lx, hx, False))
    q = min(q, _edge_min(a, b, c, hy, lx, hx, False))
    return q


@numba.njit(cache=True)
def _tile_keep(g, tx, ty, mean2d, conic, qmax, width, height, ts):
    x0 = tx * ts + 0.5
    x1 = min(tx * ts + ts - 1, width - 1) + 0.5
    y0 = ty * ts + 0.5
    y1 = min(ty * ts + ts - 1, height - 1) + 0.5
    q = tile_min_quadratic(mean2d[g, 0], mean2d[g, 1], conic[g, 0], conic[g, 1], conic[g, 2],
                           x0, x1, y0, y1)
    return q <= qmax[g] * (1.0 + 1e-5) + 1e-5


@numba.njit(parallel=True, cache=True)
def _count_tiles(trect, exact, mean2d, conic, qmax, width, height, ts):
    n = trect.shape[0]
    counts = np.zeros(n, np.int64)
    for g in numba.prange(n):
        if trect[g, 0] > trect[g, 1] or trect[g, 2] > trect[g, 3]:
            continue
        cnt = 0
        for ty in range(trect[g, 2], trect[g, 3] + 1):
            for tx in range(trect[g, 0], trect[g, 1] + 1):
                if not exact or _tile_keep(g, tx, ty, mean2d, conic, qmax, width, height, ts):
                    cnt += 1
        counts[g] = cnt
    return counts


@numba.njit(parallel=True, cache=True)
def _fill_tiles(trect, exact, mean2d, conic, qmax, width, height, ts, tiles_x, offsets, out_g, out_t):
    n = trect.shape[0]
    for g in numba.prange(n):
        if trect[g, 0] > trect[g, 1] or trect[g, 2] > trect[g, 3]:
            continue
        k = offsets[g]
        for ty in range(trect[g, 2], trect[g, 3] + 1):
            for tx in range(trect[g, 0], trect[g, 1] + 1):
                if not exact or _tile_keep(g, tx, ty, mean2d, conic, qmax, width, height, ts):
                    out_g[k] = g
                    out_t[k] = ty * tiles_x + tx
                    k += 1


def tile_cull_exact(mean2d, conic, opacity, box: PixelBox, grid: TileGrid,
                    tau_alpha=TAU_ALPHA) -> list[int]:
    """Tiles of ``box`` where the splat's peak value inside the tile reaches tau_alpha."""
    if box.empty:
        return []
    q = truncation_limit(np.array([opacity], float), tau_alpha)
    trect = np.array([[box.x0 // grid.tile_size, box.x1 // grid.tile_size,
                       box.y0 // grid.tile_size, box.y1 // grid.tile_size]], np.int64)
    m = np.asarray(mean2d, np.float64)[None]
    cn = np.asarray(conic, np.float64)[None]
    counts = _count_tiles(trect, True, m, cn, q, grid.width, grid.height, grid.tile_size)
    out_g = np.empty(counts[0], np.int64)
    out_t = np.empty(counts[0], np.int64)
    _fill_tiles(trect, True, m, cn, q, grid.width, grid.height, grid.tile_size, grid.tiles_x,
                np.zeros(1, np.int64), out_g, out_t)
    return [int(t) for t in out_t]


def tile_rects(prects: np.ndarray, tile_size: int = TILE_SIZE) -> np.ndarray:
    t = prects // tile_size
    empty = prects[:, 0] > prects[:, 1]
    t[empty] = (0, -1, 0, -1)
    return t


# instances -----------------------------------------------------------------

def depth_keys(depth) -> np.ndarray:
    """Order-preserving uint32 image of positive float32 depths (sign-bit flip)."""
    bits = np.ascontiguousarray(depth, dtype=np.float32).view(np.uint32)
    return bits ^ np.uint32(0x80000000)


def build_instances(mean2d, conic, qmax, prects, depth, grid: TileGrid,
                    exact: bool) -> TileInstanceList:
    """One instance per (Gaussian, tile) pair, Gaussian-major order.

    Offsets come from an exclusive prefix sum of the per-Gaussian counts, so
    the output does not depend on the number of worker threads.
    """
    trect = tile_rects(prects, grid.tile_size)
    mean2d = np.ascontiguousarray(mean2d, np.float64)
    conic = np.ascontiguousarray(conic, np.float64)
    qmax = np.ascontiguousarray(qmax, np.float64)
    counts = _count_tiles(trect, exact, mean2d, conic, qmax, grid.width, grid.height,
                          grid.tile_size)
    offsets = np.zeros(counts.size + 1, np.int64)
    np.cumsum(counts, out=offsets[1:])
    total = int(offsets[-1])
    out_g = np.empty(total, np.int64)
    out_t = np.empty(total, np.int64)
    _fill_tiles(trect, exact, mean2d, conic, qmax, grid.width, grid.height, grid.tile_size,
                grid.tiles_x, offsets, out_g, out_t)
    dk = depth_keys(depth)
    return TileInstanceList(out_g, out_t.astype(np.uint32), dk[out_g],
                            key_bits_tile=grid.tile_key_bits)


# sorting -------------------------------------------------------------------

@numba.njit(cache=True)
def _radix_argsort(keys, n_bits):
    n = keys.shape[0]
    idx = np.arange(n)
    tmp = np.empty(n, np.int64)
    mask = np.uint64(255)
    shift = 0
    while shift < n_bits:
        s = np.uint64(shift)
        counts = np.zeros(257, np.int64)
        for i in range(n):
            counts[np.int64((keys[idx[i]] >> s) & mask) + 1] += 1
        for d in range(256):
            counts[d + 1] += counts[d]
        for i in range(n):
            d = np.int64((keys[idx[i]] >> s) & mask)
            tmp[counts[d]] = idx[i]
            counts[d] += 1
        idx, tmp = tmp, idx
        shift += 8
    return idx


def radix_argsort(keys, n_bits: int) -> np.ndarray:
    """Stable LSD radix argsort with 8-bit digits over the low ``n_bits`` bits."""
    keys = np.ascontiguousarray(keys, dtype=np.uint64)
    return _radix_argsort(keys, int(n_bits))


def _apply(inst: TileInstanceList, perm) -> TileInstanceList:
    return TileInstanceList(inst.gaussian_index[perm], inst.tile_key[perm],
                            inst.depth_key[perm], key_bits_tile=inst.key_bits_tile)


def sort_combined(inst: TileInstanceList) -> tuple[TileInstanceList, np.ndarray, SortStats]:
    """Single stable radix sort on the packed (tile << 32 | depth) key."""
    keys = (inst.tile_key.astype(np.uint64) << np.uint64(32)) | inst.depth_key.astype(np.uint64)
    bits = 32 + inst.key_bits_tile
    perm = radix_argsort(keys, bits)
    stats = SortStats(passes=bits // 8, key_bytes=len(inst) * bits // 8)
    return _apply(inst, perm), perm, stats


def sort_two_stage(inst: TileInstanceList) -> tuple[TileInstanceList, np.ndarray, SortStats]:
    """Depth sort over Gaussians (32-bit keys), then stable tile sort over instances.

    Requires Gaussian-major instance order, as produced by :func:`build_instances`.
    The resulting permutation equals that of :func:`sort_combined`.
    """
    m = len(inst)
    if m == 0:
        return _apply(inst, np.zeros(0, np.int64)), np.zeros(0, np.int64), SortStats(0, 0)
    g = inst.gaussian_index
    starts = np.flatnonzero(np.r_[True, g[1:] != g[:-1]])
    if np.unique(g[starts]).size != starts.size:
        raise ValueError("instances are not Gaussian-major")
    ends = np.r_[starts[1:], m]
    order = radix_argsort(inst.depth_key[starts], 32)
    # expand Gaussians in depth order into their instance blocks
    lengths = (ends - starts)[order]
    block_start = np.repeat(starts[order], lengths)
    within = np.arange(m) - np.repeat(np.cumsum(lengths) - lengths, lengths)
    perm1 = block_start + within
    perm2 = radix_argsort(inst.tile_key[perm1], inst.key_bits_tile)
    perm = perm1[perm2]
    stats = SortStats(passes=4 + inst.key_bits_tile // 8,
                      key_bytes=starts.size * 4 + m * inst.key_bits_tile // 8)
    return _apply(inst, perm), perm, stats


def build_tile_ranges(sorted_inst: TileInstanceList, grid: TileGrid) -> np.ndarray:
    """Half-open [begin, end) instance range per tile."""
    tiles = np.arange(grid.n_tiles, dtype=np.uint32)
    begin = np.searchsorted(sorted_inst.tile_key, tiles, side="left")
    end = np.searchsorted(sorted_inst.tile_key, tiles, side="right")
    ranges = np.stack([begin, end], axis=1).astype(np.int64)
    sorted_inst.tile_ranges = ranges
    return ranges


# z-order -------------------------------------------------------------------

def _spread_bits(v: np.ndarray) -> np.ndarray:
    x = v.astype(np.uint64) & np.uint64(0x1FFFFF)
    x = (x | (x << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    x = (x | (x << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    x = (x | (x << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    x = (x | (x << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    x = (x | (x << np.uint64(2))) & np.uint64(0x1249249249249249)
    return x


def morton_encode(cells: np.ndarray) -> np.ndarray:
    """Interleave integer cell coordinates (N, 3), x in the least significant bit."""
    cells = np.asarray(cells)
    return (_spread_bits(cells[:, 0]) | (_spread_bits(cells[:, 1]) << np.uint64(1))
            | (_spread_bits(cells[:, 2]) << np.uint64(2)))


def morton_codes(points: np.ndarray, bits: int = 21) -> np.ndarray:
    points = np.asarray(points, np.float64)
    lo = points.min(axis=0)
    hi = points.max(axis=0) + 1e-6
    span = np.maximum(hi - lo, 1e-12)
    cells = np.floor((points - lo) / span * (1 << bits))
    cells = np.clip(cells, 0, (1 << bits) - 1).astype(np.uint64)
    return morton_encode(cells)


def morton_reorder(store, *companions) -> np.ndarray:
    """Permute ``store`` and every companion (optimizer state, stats) into z-order.

    Each object must provide ``reindex(index)``; returns the permutation.
    """
    if len(store) == 0:
        return np.zeros(0, np.int64)
    perm = np.argsort(morton_codes(store.means), kind="stable")
    for obj in (store, *companions):
        if obj is not None:
            obj.reindex(perm)
    return perm
