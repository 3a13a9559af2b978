"""Compiled compositing kernels.

Both kernels take the whole image in one call: pixels grouped by tile and a
CSR list of (tile -> splat rows) pairs, and walk each pixel front to back
with early exit once transmittance drops below the floor. Tiles run in
parallel; every write goes to a per-pixel or per-pair slot owned by exactly
one tile, so results are bit-identical for any thread count. The backward
kernel re-walks the include prefix forward (storing w and the incoming
transmittance) and then backward with rear-composite accumulators, so no
division by (1 - w) is needed and a fully saturated splat needs no special
case (the background stands immediately behind the include prefix).
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, nogil=True, parallel=True)
def composite_forward(px, px_start, pair_splat, pair_start,
                      mean2d, inv00, inv01, inv11, p_t, alpha, color, depth,
                      bg, trans_floor, support_quad,
                      out_color, out_draw, t_final, n_incl, pair_peak):
    n_tiles = px_start.shape[0] - 1
    for ti in prange(n_tiles):
        p0 = px_start[ti]
        p1 = px_start[ti + 1]
        s0 = pair_start[ti]
        s1 = pair_start[ti + 1]
        for p in range(p0, p1):
            u = px[p, 0]
            v = px[p, 1]
            T = 1.0
            n = 0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            dr = 0.0
            for j in range(s0, s1):
                if T < trans_floor:
                    break
                k = pair_splat[j]
                d0 = u - mean2d[k, 0]
                d1 = v - mean2d[k, 1]
                quad = inv00[k] * d0 * d0 + 2.0 * inv01[k] * d0 * d1 + inv11[k] * d1 * d1
                if quad > support_quad:
                    continue
                n = j - s0 + 1
                w = p_t[k] * alpha[k] * np.exp(-0.5 * quad)
                contrib = w * T
                c0 += contrib * color[k, 0]
                c1 += contrib * color[k, 1]
                c2 += contrib * color[k, 2]
                dr += contrib * depth[k]
                if contrib > pair_peak[j]:
                    pair_peak[j] = contrib
                T *= 1.0 - w
            out_color[p, 0] = c0 + T * bg[0]
            out_color[p, 1] = c1 + T * bg[1]
            out_color[p, 2] = c2 + T * bg[2]
            out_draw[p] = dr
            t_final[p] = T
            n_incl[p] = n


@njit(cache=True, nogil=True, parallel=True)
def composite_backward(px, px_start, pair_splat, pair_start,
                       mean2d, inv00, inv01, inv11, p_t, alpha, color, depth,
                       bg, support_quad, n_incl, gC, gDraw, gAlphaPix,
                       g_mean2d, g_i00, g_i01, g_i11, g_z, g_pt, g_alpha, g_color):
    n_tiles = px_start.shape[0] - 1
    for ti in prange(n_tiles):
        p0 = px_start[ti]
        p1 = px_start[ti + 1]
        s0 = pair_start[ti]
        s1 = pair_start[ti + 1]
        n_rows = s1 - s0
        if n_rows == 0 or p1 == p0:
            continue
        w_buf = np.empty(n_rows)
        dens_buf = np.empty(n_rows)
        tin_buf = np.empty(n_rows)
        for p in range(p0, p1):
            n = n_incl[p]
            if n == 0:
                continue
            gc0 = gC[p, 0]
            gc1 = gC[p, 1]
            gc2 = gC[p, 2]
            gdr = gDraw[p]
            gap = gAlphaPix[p]
            if gc0 == 0.0 and gc1 == 0.0 and gc2 == 0.0 and gdr == 0.0 and gap == 0.0:
                continue
            u = px[p, 0]
            v = px[p, 1]
            T = 1.0
            for i in range(n):
                k = pair_splat[s0 + i]
                d0 = u - mean2d[k, 0]
                d1 = v - mean2d[k, 1]
                quad = inv00[k] * d0 * d0 + 2.0 * inv01[k] * d0 * d1 + inv11[k] * d1 * d1
                dens = np.exp(-0.5 * quad) if quad <= support_quad else 0.0
                w = p_t[k] * alpha[k] * dens
                w_buf[i] = w
                dens_buf[i] = dens
                tin_buf[i] = T
                T *= 1.0 - w
            rc0 = bg[0]
            rc1 = bg[1]
            rc2 = bg[2]
            rz = 0.0
            rP = 1.0
            for i in range(n - 1, -1, -1):
                dens = dens_buf[i]
                if dens == 0.0:
                    continue
                j = s0 + i
                k = pair_splat[j]
                w = w_buf[i]
                Tin = tin_buf[i]
                contrib = w * Tin
                ck0 = color[k, 0]
                ck1 = color[k, 1]
                ck2 = color[k, 2]
                zk = depth[k]
                gw = (
                    gc0 * Tin * (ck0 - rc0)
                    + gc1 * Tin * (ck1 - rc1)
                    + gc2 * Tin * (ck2 - rc2)
                    + gdr * Tin * (zk - rz)
                    + gap * Tin * rP
                )
                g_color[j, 0] += contrib * gc0
                g_color[j, 1] += contrib * gc1
                g_color[j, 2] += contrib * gc2
                g_z[j] += contrib * gdr
                g_pt[j] += gw * dens * alpha[k]
                g_alpha[j] += gw * dens * p_t[k]
                gquad = -0.5 * dens * gw * p_t[k] * alpha[k]
                d0 = u - mean2d[k, 0]
                d1 = v - mean2d[k, 1]
                Ad0 = inv00[k] * d0 + inv01[k] * d1
                Ad1 = inv01[k] * d0 + inv11[k] * d1
                g_mean2d[j, 0] += -2.0 * gquad * Ad0
                g_mean2d[j, 1] += -2.0 * gquad * Ad1
                g_i00[j] += gquad * d0 * d0
                g_i01[j] += gquad * d0 * d1
                g_i11[j] += gquad * d1 * d1
                om = 1.0 - w
                rc0 = w * ck0 + om * rc0
                rc1 = w * ck1 + om * rc1
                rc2 = w * ck2 + om * rc2
                rz = w * zk + om * rz
                rP = om * rP
