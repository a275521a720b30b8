"""Compiled tile-parallel kernels for the BEV rasterizer.

Each tile owns a disjoint block of pixels, and every pixel composites its
splats in the globally sorted order, so the forward output is bitwise
identical for any thread count.  The backward pass accumulates gradients
into per-tile-entry buffers (one row per splat listing, so writes never
race) which the caller reduces in a fixed order.
"""

import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")
if "NUMBA_NUM_THREADS" not in os.environ:
    # allow up to 8 worker threads even on small hosts so thread-count
    # determinism can be exercised everywhere
    os.environ["NUMBA_NUM_THREADS"] = str(max(8, os.cpu_count() or 1))

import numba
import numpy as np
from numba import njit, prange

_ALPHA_CAP = 0.999


def max_threads() -> int:
    return int(numba.config.NUMBA_NUM_THREADS)


def set_threads(n: int) -> int:
    """Clamp and apply the worker thread count; returns the value in effect."""
    n = max(1, min(int(n), max_threads()))
    numba.set_num_threads(n)
    return n


@njit(parallel=True, cache=True)
def forward_kernel(
    tile_offsets,
    tile_splats,
    mean_x,
    mean_y,
    inv_a,
    inv_b,
    inv_c,
    opacity,
    feature,
    grid_h,
    grid_w,
    tiles_x,
    tile_size,
    power_max,
    term_threshold,
    out,
    aux_transmittance,
    aux_count,
):
    d_feat = feature.shape[1]
    n_tiles = tile_offsets.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t % tiles_x
        r0 = ty * tile_size
        c0 = tx * tile_size
        r1 = min(r0 + tile_size, grid_h)
        c1 = min(c0 + tile_size, grid_w)
        lo = tile_offsets[t]
        hi = tile_offsets[t + 1]
        acc = np.empty(d_feat, np.float64)
        for r in range(r0, r1):
            qy = r + 0.5
            for c in range(c0, c1):
                qx = c + 0.5
                for k in range(d_feat):
                    acc[k] = 0.0
                trans = 1.0
                n_contrib = 0
                for e in range(lo, hi):
                    s = tile_splats[e]
                    dx = qx - mean_x[s]
                    dy = qy - mean_y[s]
                    power = (
                        0.5 * (inv_a[s] * dx * dx + inv_c[s] * dy * dy)
                        + inv_b[s] * dx * dy
                    )
                    if power > power_max:
                        continue
                    alpha = opacity[s] * np.exp(-power)
                    if alpha > _ALPHA_CAP:
                        alpha = _ALPHA_CAP
                    w = alpha * trans
                    for k in range(d_feat):
                        acc[k] += feature[s, k] * w
                    trans *= 1.0 - alpha
                    n_contrib += 1
                    if trans < term_threshold:
                        break
                for k in range(d_feat):
                    out[k, r, c] = acc[k]
                aux_transmittance[r, c] = trans
                aux_count[r, c] = n_contrib


@njit(parallel=True, cache=True)
def backward_kernel(
    tile_offsets,
    tile_splats,
    mean_x,
    mean_y,
    inv_a,
    inv_b,
    inv_c,
    opacity,
    feature,
    grid_h,
    grid_w,
    tiles_x,
    tile_size,
    power_max,
    d_out,
    aux_transmittance,
    aux_count,
    grad_feature,
    grad_opacity,
    grad_mean,
    grad_cov,
):
    """Per-tile-entry gradients of the alpha compositing.

    grad_* buffers have one row per entry of ``tile_splats``; the caller sums
    rows belonging to the same splat.  grad_cov rows are (xx, xy, yy) in the
    full-matrix convention (the off-diagonal entry of dL/dSigma, counted once).
    """
    d_feat = feature.shape[1]
    n_tiles = tile_offsets.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t % tiles_x
        r0 = ty * tile_size
        c0 = tx * tile_size
        r1 = min(r0 + tile_size, grid_h)
        c1 = min(c0 + tile_size, grid_w)
        lo = tile_offsets[t]
        hi = tile_offsets[t + 1]
        n_list = hi - lo
        if n_list == 0:
            continue
        hits = np.empty(n_list, np.int64)
        suffix = np.empty(d_feat, np.float64)
        for r in range(r0, r1):
            qy = r + 0.5
            for c in range(c0, c1):
                qx = c + 0.5
                n_contrib = aux_count[r, c]
                if n_contrib == 0:
                    continue
                # rebuild the list of contributing entries, in forward order
                found = 0
                for e in range(lo, hi):
                    s = tile_splats[e]
                    dx = qx - mean_x[s]
                    dy = qy - mean_y[s]
                    power = (
                        0.5 * (inv_a[s] * dx * dx + inv_c[s] * dy * dy)
                        + inv_b[s] * dx * dy
                    )
                    if power > power_max:
                        continue
                    hits[found] = e
                    found += 1
                    if found == n_contrib:
                        break
                for k in range(d_feat):
                    suffix[k] = 0.0
                # walk contributors back to front, recovering transmittance
                trans_after = aux_transmittance[r, c]
                for j in range(n_contrib - 1, -1, -1):
                    e = hits[j]
                    s = tile_splats[e]
                    dx = qx - mean_x[s]
                    dy = qy - mean_y[s]
                    power = (
                        0.5 * (inv_a[s] * dx * dx + inv_c[s] * dy * dy)
                        + inv_b[s] * dx * dy
                    )
                    g = np.exp(-power)
                    alpha = opacity[s] * g
                    capped = alpha > _ALPHA_CAP
                    if capped:
                        alpha = _ALPHA_CAP
                    trans_i = trans_after / (1.0 - alpha)
                    trans_after = trans_i

                    # dL/dalpha = sum_k dout_k (f_k T_i - suffix_k / (1-alpha))
                    d_alpha = 0.0
                    aw = alpha * trans_i
                    for k in range(d_feat):
                        up = d_out[k, r, c]
                        grad_feature[e, k] += up * aw
                        d_alpha += up * (feature[s, k] * trans_i - suffix[k] / (1.0 - alpha))
                        suffix[k] += feature[s, k] * aw
                    if capped:
                        continue  # flat region of the cap: alpha grads vanish
                    grad_opacity[e] += d_alpha * g
                    beta = d_alpha * alpha
                    # v = Sigma^-1 (q - mu)
                    vx = inv_a[s] * dx + inv_b[s] * dy
                    vy = inv_b[s] * dx + inv_c[s] * dy
                    grad_mean[e, 0] += beta * vx
                    grad_mean[e, 1] += beta * vy
                    grad_cov[e, 0] += 0.5 * beta * vx * vx
                    grad_cov[e, 1] += 0.5 * beta * vx * vy
                    grad_cov[e, 2] += 0.5 * beta * vy * vy


def warm_up():
    """Force-compile (or load from cache) both kernels on a tiny scene."""
    offs = np.array([0, 1], dtype=np.int64)
    ids = np.array([0], dtype=np.int64)
    one = np.array([0.5])
    feat = np.array([[1.0]])
    out = np.zeros((1, 2, 2))
    aux_t = np.ones((2, 2))
    aux_n = np.zeros((2, 2), dtype=np.int64)
    forward_kernel(
        offs, ids, one, one, one, one * 0, one, one, feat,
        2, 2, 1, 16, 4.5, 1e-4, out, aux_t, aux_n,
    )
    backward_kernel(
        offs, ids, one, one, one, one * 0, one, one, feat,
        2, 2, 1, 16, 4.5, out, aux_t, aux_n,
        np.zeros((1, 1)), np.zeros(1), np.zeros((1, 2)), np.zeros((1, 3)),
    )
