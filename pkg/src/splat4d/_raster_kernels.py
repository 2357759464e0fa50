"""Numba kernels for per-tile front-to-back compositing and its adjoint.

Splats arrive depth-sorted.  ``entries`` lists, tile by tile, the sorted
splat ranks whose pixel rectangle touches the tile.  Every pixel only
evaluates splats whose rectangle contains it, so the per-pixel sequence does
not depend on the tile size.  Gradients are written per entry (each entry
belongs to one tile), which keeps the parallel loop free of races; the
caller reduces entries to splats in a fixed order.
"""

import math
import os

import numba
import numpy as np
from numba import njit, prange

# the bundled TBB is too old for numba; pick a layer that needs no probing
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER = "workqueue"


@njit(parallel=True, cache=True)
def composite_forward(
    tile_offsets, entries, mean_uv, conic, alpha, color, rect, background,
    height, width, tile_size, tiles_x, min_transmittance,
    out_image, out_transmittance, out_weight, out_stop,
):
    n_tiles = tile_offsets.shape[0] - 1
    for tile in prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = tile_offsets[tile]
        end = tile_offsets[tile + 1]
        for py in range(ty * tile_size, min(height, (ty + 1) * tile_size)):
            cy = py + 0.5
            for px in range(tx * tile_size, min(width, (tx + 1) * tile_size)):
                cx = px + 0.5
                trans = 1.0
                acc = 0.0
                c0 = 0.0
                c1 = 0.0
                c2 = 0.0
                stop = start
                for e in range(start, end):
                    s = entries[e]
                    if px < rect[s, 0] or px > rect[s, 1] or py < rect[s, 2] or py > rect[s, 3]:
                        continue
                    dx = cx - mean_uv[s, 0]
                    dy = cy - mean_uv[s, 1]
                    power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy
                    a = alpha[s] * math.exp(power)
                    w = a * trans
                    c0 += w * color[s, 0]
                    c1 += w * color[s, 1]
                    c2 += w * color[s, 2]
                    acc += w
                    trans *= 1.0 - a
                    stop = e + 1
                    if trans < min_transmittance:
                        break
                out_image[py, px, 0] = c0 + trans * background[0]
                out_image[py, px, 1] = c1 + trans * background[1]
                out_image[py, px, 2] = c2 + trans * background[2]
                out_transmittance[py, px] = trans
                out_weight[py, px] = acc
                out_stop[py, px] = stop


@njit(parallel=True, cache=True)
def composite_backward(
    tile_offsets, entries, mean_uv, conic, alpha, color, rect, background,
    height, width, tile_size, tiles_x, stop_index, grad_image,
    g_mean, g_conic, g_alpha, g_color,
):
    n_tiles = tile_offsets.shape[0] - 1
    for tile in prange(n_tiles):
        ty = tile // tiles_x
        tx = tile - ty * tiles_x
        start = tile_offsets[tile]
        end = tile_offsets[tile + 1]
        n = end - start
        buf_e = np.empty(n, dtype=np.int64)
        buf_a = np.empty(n)
        buf_t = np.empty(n)
        buf_g = np.empty(n)
        buf_dx = np.empty(n)
        buf_dy = np.empty(n)
        for py in range(ty * tile_size, min(height, (ty + 1) * tile_size)):
            cy = py + 0.5
            for px in range(tx * tile_size, min(width, (tx + 1) * tile_size)):
                cx = px + 0.5
                k = 0
                trans = 1.0
                for e in range(start, stop_index[py, px]):
                    s = entries[e]
                    if px < rect[s, 0] or px > rect[s, 1] or py < rect[s, 2] or py > rect[s, 3]:
                        continue
                    dx = cx - mean_uv[s, 0]
                    dy = cy - mean_uv[s, 1]
                    power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy
                    gauss = math.exp(power)
                    a = alpha[s] * gauss
                    buf_e[k] = e
                    buf_a[k] = a
                    buf_t[k] = trans
                    buf_g[k] = gauss
                    buf_dx[k] = dx
                    buf_dy[k] = dy
                    trans *= 1.0 - a
                    k += 1
                gr0 = grad_image[py, px, 0]
                gr1 = grad_image[py, px, 1]
                gr2 = grad_image[py, px, 2]
                # colour seen behind splat j, normalised by the transmittance after j
                b0 = background[0]
                b1 = background[1]
                b2 = background[2]
                for j in range(k - 1, -1, -1):
                    e = buf_e[j]
                    s = entries[e]
                    a = buf_a[j]
                    t_before = buf_t[j]
                    w = a * t_before
                    g_color[e, 0] += gr0 * w
                    g_color[e, 1] += gr1 * w
                    g_color[e, 2] += gr2 * w
                    d_a = t_before * (
                        gr0 * (color[s, 0] - b0) + gr1 * (color[s, 1] - b1) + gr2 * (color[s, 2] - b2)
                    )
                    b0 = a * color[s, 0] + (1.0 - a) * b0
                    b1 = a * color[s, 1] + (1.0 - a) * b1
                    b2 = a * color[s, 2] + (1.0 - a) * b2
                    g_alpha[e] += d_a * buf_g[j]
                    d_power = d_a * a
                    dx = buf_dx[j]
                    dy = buf_dy[j]
                    g_conic[e, 0] += -0.5 * dx * dx * d_power
                    g_conic[e, 1] += -dx * dy * d_power
                    g_conic[e, 2] += -0.5 * dy * dy * d_power
                    g_mean[e, 0] += d_power * (conic[s, 0] * dx + conic[s, 1] * dy)
                    g_mean[e, 1] += d_power * (conic[s, 1] * dx + conic[s, 2] * dy)


@njit(cache=True)
def reduce_entries(entries, values, out):
    """``out[entries[e]] += values[e]`` in entry order."""
    for e in range(entries.shape[0]):
        s = entries[e]
        for c in range(values.shape[1]):
            out[s, c] += values[e, c]
