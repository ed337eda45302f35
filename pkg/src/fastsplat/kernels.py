"""Numba kernels for tiled blending and its two backward schedules.

Kernels are generated once per float type so that the 32-bit path really
computes in 32-bit (numba would otherwise promote on every float literal).
All three kernels evaluate fragments through the same ``frag`` helper, which
makes the per-pixel and per-bucket backward passes bitwise comparable.
"""
from __future__ import annotations

import numba
import numpy as np

TILE = 16
TILE_PIXELS = TILE * TILE
BUCKET = 32
# per-instance gradient layout
GRAD_WIDTH = 9  # d mean2d (2), d conic (3), d opacity (1), d rgb (3)

_CACHE: dict = {}


def kernels(dtype):
    dtype = np.dtype(dtype).type
    if dtype not in _CACHE:
        _CACHE[dtype] = _build(dtype)
    return _CACHE[dtype]


def _build(F):
    ZERO, HALF, ONE, TWO = F(0), F(0.5), F(1), F(2)

    @numba.njit(inline="always")
    def frag(px, py, g, mean2d, conic, opac, response, tau, gcut, amax):
        dx = mean2d[g, 0] - px
        dy = mean2d[g, 1] - py
        a = conic[g, 0]
        b = conic[g, 1]
        c = conic[g, 2]
        q = a * dx * dx + TWO * b * dx * dy + c * dy * dy
        G = np.exp(-HALF * q)
        al = opac[g] * G
        if response:
            keep = G >= gcut
        else:
            keep = al >= tau
        clamped = al > amax
        if clamped:
            al = amax
        return keep, al, G, dx, dy, clamped

    @numba.njit(parallel=True)
    def forward(ranges, gidx, mean2d, conic, opac, rgb, bg, xs, ys, tiles_x,
                response, tau, gcut, amax, tmin, skip_before,
                ck_off, record, color, trans, count, ckpt):
        n_tiles = ranges.shape[0]
        height, width = trans.shape
        for t in numba.prange(n_tiles):
            tx = t % tiles_x
            ty = t // tiles_x
            start = ranges[t, 0]
            n = ranges[t, 1] - start
            nb = (n + BUCKET - 1) // BUCKET
            for p in range(TILE_PIXELS):
                x = tx * TILE + p % TILE
                y = ty * TILE + p // TILE
                if x >= width or y >= height:
                    continue
                px = xs[x]
                py = ys[y]
                C0 = ZERO
                C1 = ZERO
                C2 = ZERO
                T = ONE
                last = 0
                rec = 0
                for j in range(n):
                    if record and j % BUCKET == 0:
                        k = ck_off[t] + rec
                        ckpt[k, p, 0] = C0
                        ckpt[k, p, 1] = C1
                        ckpt[k, p, 2] = C2
                        ckpt[k, p, 3] = T
                        rec += 1
                    g = gidx[start + j]
                    keep, al, G, dx, dy, cl = frag(px, py, g, mean2d, conic, opac,
                                                   response, tau, gcut, amax)
                    if not keep:
                        continue
                    Tn = T * (ONE - al)
                    if skip_before and Tn < tmin:
                        break
                    w = al * T
                    C0 += w * rgb[g, 0]
                    C1 += w * rgb[g, 1]
                    C2 += w * rgb[g, 2]
                    T = Tn
                    last = j + 1
                    if (not skip_before) and T < tmin:
                        break
                if record:
                    for r in range(rec, nb):
                        k = ck_off[t] + r
                        ckpt[k, p, 0] = C0
                        ckpt[k, p, 1] = C1
                        ckpt[k, p, 2] = C2
                        ckpt[k, p, 3] = T
                color[y, x, 0] = C0 + T * bg[0]
                color[y, x, 1] = C1 + T * bg[1]
                color[y, x, 2] = C2 + T * bg[2]
                trans[y, x] = T
                count[y, x] = last

    @numba.njit(inline="always")
    def accumulate(i, g, al, T, G, dx, dy, cl, R0, R1, R2, d0, d1, d2,
                   conic, opac, rgb, inst):
        w = al * T
        inst[i, 6] += w * d0
        inst[i, 7] += w * d1
        inst[i, 8] += w * d2
        dal = T * ((rgb[g, 0] - R0) * d0 + (rgb[g, 1] - R1) * d1 + (rgb[g, 2] - R2) * d2)
        if not cl:
            inst[i, 5] += dal * G
            dq = -HALF * G * (dal * opac[g])
            a = conic[g, 0]
            b = conic[g, 1]
            c = conic[g, 2]
            inst[i, 0] += dq * TWO * (a * dx + b * dy)
            inst[i, 1] += dq * TWO * (b * dx + c * dy)
            inst[i, 2] += dq * dx * dx
            inst[i, 3] += dq * TWO * dx * dy
            inst[i, 4] += dq * dy * dy

    @numba.njit(parallel=True)
    def backward_pixel(ranges, gidx, mean2d, conic, opac, rgb, bg, xs, ys, tiles_x,
                       response, tau, gcut, amax, count, d_img, inst, work):
        n_tiles = ranges.shape[0]
        height, width = count.shape
        for t in numba.prange(n_tiles):
            start = ranges[t, 0]
            n = ranges[t, 1] - start
            if n == 0:
                continue
            tx = t % tiles_x
            ty = t // tiles_x
            b_al = np.empty(n, F)
            b_T = np.empty(n, F)
            b_G = np.empty(n, F)
            b_dx = np.empty(n, F)
            b_dy = np.empty(n, F)
            b_cl = np.empty(n, np.bool_)
            b_j = np.empty(n, np.int64)
            ops = 0
            for p in range(TILE_PIXELS):
                x = tx * TILE + p % TILE
                y = ty * TILE + p // TILE
                if x >= width or y >= height:
                    continue
                cnt = count[y, x]
                if cnt == 0:
                    continue
                px = xs[x]
                py = ys[y]
                T = ONE
                m = 0
                for j in range(cnt):
                    g = gidx[start + j]
                    keep, al, G, dx, dy, cl = frag(px, py, g, mean2d, conic, opac,
                                                   response, tau, gcut, amax)
                    if not keep:
                        continue
                    b_al[m] = al
                    b_T[m] = T
                    b_G[m] = G
                    b_dx[m] = dx
                    b_dy[m] = dy
                    b_cl[m] = cl
                    b_j[m] = j
                    m += 1
                    T = T * (ONE - al)
                d0 = d_img[y, x, 0]
                d1 = d_img[y, x, 1]
                d2 = d_img[y, x, 2]
                R0 = bg[0]
                R1 = bg[1]
                R2 = bg[2]
                for k in range(m - 1, -1, -1):
                    i = start + b_j[k]
                    g = gidx[i]
                    al = b_al[k]
                    accumulate(i, g, al, b_T[k], b_G[k], b_dx[k], b_dy[k], b_cl[k],
                               R0, R1, R2, d0, d1, d2, conic, opac, rgb, inst)
                    R0 = al * rgb[g, 0] + (ONE - al) * R0
                    R1 = al * rgb[g, 1] + (ONE - al) * R1
                    R2 = al * rgb[g, 2] + (ONE - al) * R2
                ops += m
            work[t] = ops

    @numba.njit(parallel=True)
    def backward_bucket(ranges, gidx, mean2d, conic, opac, rgb, bg, xs, ys, tiles_x,
                        response, tau, gcut, amax, count, d_img, ck_off, ckpt, inst, work):
        n_tiles = ranges.shape[0]
        height, width = count.shape
        for t in numba.prange(n_tiles):
            start = ranges[t, 0]
            n = ranges[t, 1] - start
            if n == 0:
                continue
            tx = t % tiles_x
            ty = t // tiles_x
            nb = (n + BUCKET - 1) // BUCKET
            # colour of everything behind the current bucket, per pixel
            R = np.empty((TILE_PIXELS, 3), F)
            for p in range(TILE_PIXELS):
                R[p, 0] = bg[0]
                R[p, 1] = bg[1]
                R[p, 2] = bg[2]
            b_al = np.empty(BUCKET, F)
            b_T = np.empty(BUCKET, F)
            b_G = np.empty(BUCKET, F)
            b_dx = np.empty(BUCKET, F)
            b_dy = np.empty(BUCKET, F)
            b_cl = np.empty(BUCKET, np.bool_)
            b_j = np.empty(BUCKET, np.int64)
            for b in range(nb - 1, -1, -1):
                lo = b * BUCKET
                hi = min(lo + BUCKET, n)
                for p in range(TILE_PIXELS):
                    x = tx * TILE + p % TILE
                    y = ty * TILE + p // TILE
                    if x >= width or y >= height:
                        continue
                    cnt = count[y, x]
                    if cnt <= lo:
                        continue
                    px = xs[x]
                    py = ys[y]
                    T = ckpt[ck_off[t] + b, p, 3]
                    m = 0
                    for j in range(lo, min(hi, cnt)):
                        g = gidx[start + j]
                        keep, al, G, dx, dy, cl = frag(px, py, g, mean2d, conic, opac,
                                                       response, tau, gcut, amax)
                        if not keep:
                            continue
                        b_al[m] = al
                        b_T[m] = T
                        b_G[m] = G
                        b_dx[m] = dx
                        b_dy[m] = dy
                        b_cl[m] = cl
                        b_j[m] = j
                        m += 1
                        T = T * (ONE - al)
                    d0 = d_img[y, x, 0]
                    d1 = d_img[y, x, 1]
                    d2 = d_img[y, x, 2]
                    R0 = R[p, 0]
                    R1 = R[p, 1]
                    R2 = R[p, 2]
                    for k in range(m - 1, -1, -1):
                        i = start + b_j[k]
                        g = gidx[i]
                        al = b_al[k]
                        accumulate(i, g, al, b_T[k], b_G[k], b_dx[k], b_dy[k], b_cl[k],
                                   R0, R1, R2, d0, d1, d2, conic, opac, rgb, inst)
                        R0 = al * rgb[g, 0] + (ONE - al) * R0
                        R1 = al * rgb[g, 1] + (ONE - al) * R1
                        R2 = al * rgb[g, 2] + (ONE - al) * R2
                    R[p, 0] = R0
                    R[p, 1] = R1
                    R[p, 2] = R2
                # one merged write per instance in this bucket
                work[t] += hi - lo

    return {"forward": forward, "backward_pixel": backward_pixel,
            "backward_bucket": backward_bucket}


@numba.njit(cache=True)
def merge_instances(gidx, inst, out):
    """Sum per-instance partial gradients per Gaussian in sorted (tile-major) order."""
    for i in range(gidx.shape[0]):
        g = gidx[i]
        for k in range(inst.shape[1]):
            out[g, k] += inst[i, k]
