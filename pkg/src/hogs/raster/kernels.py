"""Numba tile kernels: binning, front-to-back compositing and its adjoint.

Tiles are processed in parallel, but every write goes either to pixels owned by
the tile or to per-(tile, splat) pair slots, and pairs are reduced afterwards
in a fixed order. Output therefore does not depend on the thread count.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit, prange

ALPHA_MAX = 0.99


@njit(cache=True)
def bin_splats(x0, x1, y0, y1, order, n_tiles_x, n_tiles_y):
    """Per-tile splat lists in depth order.

    ``x0..y1`` are inclusive tile-index bounds per splat (empty when x0 > x1);
    ``order`` lists splat ids front to back. Returns (pair_splat, tile_start).
    """
    n_tiles = n_tiles_x * n_tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for i in order:
        for ty in range(y0[i], y1[i] + 1):
            for tx in range(x0[i], x1[i] + 1):
                counts[ty * n_tiles_x + tx + 1] += 1
    tile_start = np.cumsum(counts)
    cursor = tile_start[:-1].copy()
    pair_splat = np.empty(tile_start[-1], dtype=np.int64)
    for i in order:
        for ty in range(y0[i], y1[i] + 1):
            for tx in range(x0[i], x1[i] + 1):
                t = ty * n_tiles_x + tx
                pair_splat[cursor[t]] = i
                cursor[t] += 1
    return pair_splat, tile_start


@njit(parallel=True, cache=True)
def composite_forward(means, conic, opacity, colors, pair_splat, tile_start,
                      width, height, tile, t_min, out_rgb, out_t, out_count):
    n_tiles_x = (width + tile - 1) // tile
    n_tiles = len(tile_start) - 1
    for t in prange(n_tiles):
        tx = t % n_tiles_x
        ty = t // n_tiles_x
        s0 = tile_start[t]
        s1 = tile_start[t + 1]
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                trans = 1.0
                r = 0.0
                g = 0.0
                b = 0.0
                n = 0
                for p in range(s0, s1):
                    i = pair_splat[p]
                    dx = px - means[i, 0]
                    dy = py - means[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    a = opacity[i] * math.exp(power)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    w = a * trans
                    r += colors[i, 0] * w
                    g += colors[i, 1] * w
                    b += colors[i, 2] * w
                    trans *= 1.0 - a
                    n = p - s0 + 1
                    if trans < t_min:
                        break
                out_rgb[py, px, 0] = r
                out_rgb[py, px, 1] = g
                out_rgb[py, px, 2] = b
                out_t[py, px] = trans
                out_count[py, px] = n


@njit(parallel=True, cache=True)
def composite_backward(means, conic, opacity, colors, pair_splat, tile_start,
                       width, height, tile, count, grad_rgb, grad_alpha, out_pair):
    """Accumulate dL/d(splat attrs) into ``out_pair`` rows aligned with ``pair_splat``.

    Row layout: mean x, mean y, conic a, conic b, conic c, opacity, r, g, b.
    """
    n_tiles_x = (width + tile - 1) // tile
    n_tiles = len(tile_start) - 1
    for t in prange(n_tiles):
        tx = t % n_tiles_x
        ty = t // n_tiles_x
        s0 = tile_start[t]
        s1 = tile_start[t + 1]
        m = s1 - s0
        alphas = np.empty(m)
        gauss = np.empty(m)
        trans_before = np.empty(m)
        for py in range(ty * tile, min((ty + 1) * tile, height)):
            for px in range(tx * tile, min((tx + 1) * tile, width)):
                n = count[py, px]
                gr = grad_rgb[py, px, 0]
                gg = grad_rgb[py, px, 1]
                gb = grad_rgb[py, px, 2]
                ga = grad_alpha[py, px]
                trans = 1.0
                for k in range(n):
                    i = pair_splat[s0 + k]
                    dx = px - means[i, 0]
                    dy = py - means[i, 1]
                    power = -0.5 * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy) - conic[i, 1] * dx * dy
                    gk = math.exp(power)
                    a = opacity[i] * gk
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                        gk = -1.0  # marks a clamped sample
                    alphas[k] = a
                    gauss[k] = gk
                    trans_before[k] = trans
                    trans *= 1.0 - a
                # back to front: suffix colour and suffix transmittance
                sr = 0.0
                sg = 0.0
                sb = 0.0
                q = 1.0
                for k in range(n - 1, -1, -1):
                    p = s0 + k
                    i = pair_splat[p]
                    a = alphas[k]
                    tb = trans_before[k]
                    w = a * tb
                    out_pair[p, 6] += gr * w
                    out_pair[p, 7] += gg * w
                    out_pair[p, 8] += gb * w
                    cr = colors[i, 0]
                    cg = colors[i, 1]
                    cb = colors[i, 2]
                    dl_da = tb * (gr * (cr - sr) + gg * (cg - sg) + gb * (cb - sb)) + ga * tb * q
                    sr = cr * a + (1.0 - a) * sr
                    sg = cg * a + (1.0 - a) * sg
                    sb = cb * a + (1.0 - a) * sb
                    q *= 1.0 - a
                    gk = gauss[k]
                    if gk < 0.0:
                        continue
                    out_pair[p, 5] += dl_da * gk
                    dl_dpow = dl_da * a
                    dx = px - means[i, 0]
                    dy = py - means[i, 1]
                    out_pair[p, 0] += dl_dpow * (conic[i, 0] * dx + conic[i, 1] * dy)
                    out_pair[p, 1] += dl_dpow * (conic[i, 1] * dx + conic[i, 2] * dy)
                    out_pair[p, 2] += dl_dpow * (-0.5 * dx * dx)
                    out_pair[p, 3] += dl_dpow * (-dx * dy)
                    out_pair[p, 4] += dl_dpow * (-0.5 * dy * dy)


@njit(cache=True)
def reduce_pairs(pair_splat, pair_grads, n_splats):
    out = np.zeros((n_splats, pair_grads.shape[1]))
    for p in range(len(pair_splat)):
        i = pair_splat[p]
        for c in range(pair_grads.shape[1]):
            out[i, c] += pair_grads[p, c]
    return out
