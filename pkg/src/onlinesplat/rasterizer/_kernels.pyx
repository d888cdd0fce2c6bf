# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled tile rasterizer: per-pixel front-to-back compositing and its adjoint."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

cdef double QSLACK = 1.0001


def bin_tiles(int[:, ::1] bbox, int height, int width, int tile):
    """CSR lists of splat ids per tile, each list in splat (depth) order."""
    cdef int m = bbox.shape[0]
    cdef int tw = (width + tile - 1) // tile
    cdef int th = (height + tile - 1) // tile
    cdef cnp.ndarray[cnp.int64_t, ndim=1] offsets = np.zeros(tw * th + 1, dtype=np.int64)
    cdef long long[::1] off = offsets
    cdef int j, tx, ty, tx0, tx1, ty0, ty1
    for j in range(m):
        if bbox[j, 0] > bbox[j, 1] or bbox[j, 2] > bbox[j, 3]:
            continue
        tx0 = bbox[j, 0] // tile
        tx1 = bbox[j, 1] // tile
        ty0 = bbox[j, 2] // tile
        ty1 = bbox[j, 3] // tile
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                off[ty * tw + tx + 1] += 1
    for j in range(tw * th):
        off[j + 1] += off[j]
    cdef cnp.ndarray[cnp.int32_t, ndim=1] ids_arr = np.empty(off[tw * th], dtype=np.int32)
    cdef int[::1] ids = ids_arr
    cdef cnp.ndarray[cnp.int64_t, ndim=1] fill_arr = offsets[:-1].copy()
    cdef long long[::1] fill = fill_arr
    for j in range(m):
        if bbox[j, 0] > bbox[j, 1] or bbox[j, 2] > bbox[j, 3]:
            continue
        tx0 = bbox[j, 0] // tile
        tx1 = bbox[j, 1] // tile
        ty0 = bbox[j, 2] // tile
        ty1 = bbox[j, 3] // tile
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                ids[fill[ty * tw + tx]] = j
                fill[ty * tw + tx] += 1
    return offsets, ids_arr


cdef inline double _power_term(double half, double beta) nogil:
    if half > 0.0:
        return exp(beta * log(half))
    return 0.0


def forward(
    double[:, ::1] mean2d,
    double[:, ::1] conic,
    double[::1] opacity,
    double[::1] beta,
    double[:, ::1] color,
    double[::1] depth,
    double[::1] qmax,
    int[:, ::1] bbox,
    int[:, ::1] center_px,
    long long[::1] offsets,
    int[::1] ids,
    int height,
    int width,
    int tile,
    double[::1] background,
    double alpha_min,
    double alpha_max,
    double t_min,
):
    cdef int m = mean2d.shape[0]
    out_c = np.zeros((height, width, 3))
    out_d = np.zeros((height, width))
    out_T = np.ones((height, width))
    out_n = np.zeros((height, width), dtype=np.int32)
    out_last = np.zeros((height, width), dtype=np.int64)
    cw = np.zeros(m)
    cdef double[:, :, ::1] C = out_c
    cdef double[:, ::1] D = out_d
    cdef double[:, ::1] TT = out_T
    cdef int[:, ::1] NC = out_n
    cdef long long[:, ::1] LAST = out_last
    cdef double[::1] CW = cw
    cdef int tw = (width + tile - 1) // tile
    cdef int th = (height + tile - 1) // tile
    cdef int tx, ty, x, y, j, n
    cdef long long k, start, end, last
    cdef double T, dx, dy, q, w, raw, a, test_T, wgt, r, g, b, dd
    with nogil:
        for ty in range(th):
            for tx in range(tw):
                start = offsets[ty * tw + tx]
                end = offsets[ty * tw + tx + 1]
                for y in range(ty * tile, min(ty * tile + tile, height)):
                    for x in range(tx * tile, min(tx * tile + tile, width)):
                        T = 1.0
                        r = 0.0
                        g = 0.0
                        b = 0.0
                        dd = 0.0
                        n = 0
                        last = start
                        for k in range(start, end):
                            j = ids[k]
                            if x < bbox[j, 0] or x > bbox[j, 1] or y < bbox[j, 2] or y > bbox[j, 3]:
                                continue
                            dx = x - mean2d[j, 0]
                            dy = y - mean2d[j, 1]
                            q = conic[j, 0] * dx * dx + 2.0 * conic[j, 1] * dx * dy + conic[j, 2] * dy * dy
                            # cheap reject; the slack leaves borderline pixels to the exact test
                            if q > qmax[j] * QSLACK:
                                continue
                            if beta[j] == 1.0:
                                w = exp(-0.5 * q)
                            else:
                                w = exp(-_power_term(0.5 * q, beta[j]))
                            raw = opacity[j] * w
                            if raw < alpha_min:
                                continue
                            a = raw if raw < alpha_max else alpha_max
                            test_T = T * (1.0 - a)
                            if test_T < t_min:
                                break
                            wgt = a * T
                            r = r + wgt * color[j, 0]
                            g = g + wgt * color[j, 1]
                            b = b + wgt * color[j, 2]
                            dd = dd + wgt * depth[j]
                            if center_px[j, 0] == x and center_px[j, 1] == y:
                                CW[j] = wgt
                            T = test_T
                            n = n + 1
                            last = k + 1
                        C[y, x, 0] = r + T * background[0]
                        C[y, x, 1] = g + T * background[1]
                        C[y, x, 2] = b + T * background[2]
                        D[y, x] = dd
                        TT[y, x] = T
                        NC[y, x] = n
                        LAST[y, x] = last
    return out_c, out_d, out_T, out_n, out_last, cw


def backward(
    double[:, ::1] mean2d,
    double[:, ::1] conic,
    double[::1] opacity,
    double[::1] beta,
    double[:, ::1] color,
    double[::1] depth,
    double[::1] qmax,
    int[:, ::1] bbox,
    long long[::1] offsets,
    int[::1] ids,
    double[:, ::1] final_T,
    long long[:, ::1] last_idx,
    double[:, :, ::1] d_color_img,
    double[:, ::1] d_depth_img,
    int height,
    int width,
    int tile,
    double[::1] background,
    double alpha_min,
    double alpha_max,
):
    cdef int m = mean2d.shape[0]
    g_mean = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    g_op = np.zeros(m)
    g_col = np.zeros((m, 3))
    g_dep = np.zeros(m)
    g_beta = np.zeros(m)
    cdef double[:, ::1] GM = g_mean
    cdef double[:, ::1] GC = g_conic
    cdef double[::1] GO = g_op
    cdef double[:, ::1] GCOL = g_col
    cdef double[::1] GD = g_dep
    cdef double[::1] GB = g_beta
    cdef int tw = (width + tile - 1) // tile
    cdef int th = (height + tile - 1) // tile
    cdef int tx, ty, x, y, j
    cdef long long k, start
    cdef double T, dx, dy, q, half, p, w, raw, a, one_m, wgt
    cdef double acc_r, acc_g, acc_b, acc_d, gr, gg, gb, gd
    cdef double dl_da, dl_dp, dl_dq, o
    with nogil:
        for ty in range(th):
            for tx in range(tw):
                start = offsets[ty * tw + tx]
                for y in range(ty * tile, min(ty * tile + tile, height)):
                    for x in range(tx * tile, min(tx * tile + tile, width)):
                        gr = d_color_img[y, x, 0]
                        gg = d_color_img[y, x, 1]
                        gb = d_color_img[y, x, 2]
                        gd = d_depth_img[y, x]
                        if gr == 0.0 and gg == 0.0 and gb == 0.0 and gd == 0.0:
                            continue
                        T = final_T[y, x]
                        acc_r = T * background[0]
                        acc_g = T * background[1]
                        acc_b = T * background[2]
                        acc_d = 0.0
                        k = last_idx[y, x] - 1
                        while k >= start:
                            j = ids[k]
                            k = k - 1
                            if x < bbox[j, 0] or x > bbox[j, 1] or y < bbox[j, 2] or y > bbox[j, 3]:
                                continue
                            dx = x - mean2d[j, 0]
                            dy = y - mean2d[j, 1]
                            q = conic[j, 0] * dx * dx + 2.0 * conic[j, 1] * dx * dy + conic[j, 2] * dy * dy
                            if q > qmax[j] * QSLACK:
                                continue
                            half = 0.5 * q
                            if beta[j] == 1.0:
                                p = half
                            else:
                                p = _power_term(half, beta[j])
                            w = exp(-p)
                            o = opacity[j]
                            raw = o * w
                            if raw < alpha_min:
                                continue
                            a = raw if raw < alpha_max else alpha_max
                            one_m = 1.0 - a
                            T = T / one_m
                            wgt = a * T
                            dl_da = (
                                gr * (color[j, 0] * T - acc_r / one_m)
                                + gg * (color[j, 1] * T - acc_g / one_m)
                                + gb * (color[j, 2] * T - acc_b / one_m)
                                + gd * (depth[j] * T - acc_d / one_m)
                            )
                            GCOL[j, 0] += gr * wgt
                            GCOL[j, 1] += gg * wgt
                            GCOL[j, 2] += gb * wgt
                            GD[j] += gd * wgt
                            acc_r = acc_r + wgt * color[j, 0]
                            acc_g = acc_g + wgt * color[j, 1]
                            acc_b = acc_b + wgt * color[j, 2]
                            acc_d = acc_d + wgt * depth[j]
                            if raw > alpha_max:
                                continue
                            GO[j] += dl_da * w
                            if q > 0.0:
                                dl_dp = -dl_da * o * w
                                dl_dq = dl_dp * beta[j] * p / q
                                GB[j] += dl_dp * p * log(half)
                                GC[j, 0] += dl_dq * dx * dx
                                GC[j, 1] += dl_dq * 2.0 * dx * dy
                                GC[j, 2] += dl_dq * dy * dy
                                GM[j, 0] += dl_dq * -2.0 * (conic[j, 0] * dx + conic[j, 1] * dy)
                                GM[j, 1] += dl_dq * -2.0 * (conic[j, 1] * dx + conic[j, 2] * dy)
    return g_mean, g_conic, g_op, g_col, g_dep, g_beta
