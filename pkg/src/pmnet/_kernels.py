"""Compiled inner loops for per-pixel LoS classification and ray launching.

Kept free of project imports so numba sees plain arrays and scalars.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _los_single(blocked, x0, y0, x1, y1):
    # Exact integer supercover walk between pixel centers; mirrors
    # geo.supercover_cells including the corner-tie rule.
    dx = x1 - x0
    dy = y1 - y0
    sx = 1 if dx > 0 else -1
    sy = 1 if dy > 0 else -1
    adx = dx if dx > 0 else -dx
    ady = dy if dy > 0 else -dy
    ix, iy = x0, y0
    k = 1
    m = 1
    while k <= adx or m <= ady:
        if m > ady:
            cross_x, cross_y = True, False
        elif k > adx:
            cross_x, cross_y = False, True
        else:
            lhs = (2 * k - 1) * ady
            rhs = (2 * m - 1) * adx
            cross_x = lhs <= rhs
            cross_y = rhs <= lhs
        if cross_x and cross_y:
            # corner side cells are never endpoints, so always occlusion-tested
            if blocked[iy, ix + sx] or blocked[iy + sy, ix]:
                return False
            ix += sx
            iy += sy
            k += 1
            m += 1
        elif cross_x:
            ix += sx
            k += 1
        else:
            iy += sy
            m += 1
        if not (ix == x1 and iy == y1):
            if blocked[iy, ix]:
                return False
    return True


@njit(cache=True)
def los_mask_kernel(blocked, tx_x, tx_y):
    h, w = blocked.shape
    out = np.zeros((h, w), dtype=np.bool_)
    for ry in range(h):
        for rx in range(w):
            out[ry, rx] = _los_single(blocked, tx_x, tx_y, rx, ry)
    return out


@njit(cache=True)
def ray_launch_kernel(
    cells,
    building_code,
    foliage_code,
    tx_x,
    tx_y,
    mpp,
    p_tx_dbm,
    n_rays,
    max_reflections,
    reflection_loss_db,
    foliage_loss_db_per_m,
    rx_capture_radius,
    floor_dbm,
):
    """Accumulate per-pixel linear power from specularly reflected rays.

    Rays march cell to cell. A pixel keeps, per bounce count, the strongest
    ray passing within rx_capture_radius of its center; the per-pixel total is
    the sum over bounce counts, which stands in for a sum over distinct
    propagation paths without double-counting adjacent rays of the same path.
    """
    h, w = cells.shape
    n_classes = max_reflections + 1
    best = np.zeros((n_classes, h, w), dtype=np.float64)
    p_tx_lin = 10.0 ** (p_tx_dbm / 10.0)
    floor_lin = 10.0 ** (floor_dbm / 10.0)
    max_path_px = (max_reflections + 1) * 2.0 * math.hypot(h, w) + 8.0

    for ri in range(n_rays):
        ang = 2.0 * math.pi * ri / n_rays
        dx = math.cos(ang)
        dy = math.sin(ang)
        x = float(tx_x)
        y = float(tx_y)
        ix = tx_x
        iy = tx_y
        seg_ox = x
        seg_oy = y
        seg_d0 = 0.0  # unfolded distance (px) at the current segment origin
        loss_db = 0.0
        bounces = 0
        traveled = 0.0

        # TX cell deposit: clamp the range to half a pixel
        d_m = 0.5 * mpp
        p0 = p_tx_lin / (d_m * d_m)
        if p0 > best[0, iy, ix]:
            best[0, iy, ix] = p0

        while True:
            # distance to the next half-integer boundary along each axis
            if dx > 0.0:
                t_x = ((ix + 0.5) - x) / dx
            elif dx < 0.0:
                t_x = ((ix - 0.5) - x) / dx
            else:
                t_x = 1.0e30
            if dy > 0.0:
                t_y = ((iy + 0.5) - y) / dy
            elif dy < 0.0:
                t_y = ((iy - 0.5) - y) / dy
            else:
                t_y = 1.0e30

            corner = abs(t_x - t_y) < 1.0e-12
            step_x = t_x <= t_y
            step_y = t_y <= t_x
            t = t_x if step_x else t_y

            # foliage attenuation of the chord crossing the current cell
            if cells[iy, ix] == foliage_code:
                loss_db += foliage_loss_db_per_m * t * mpp

            nx = ix + (1 if dx > 0 else -1) if step_x else ix
            ny = iy + (1 if dy > 0 else -1) if step_y else iy
            if nx < 0 or nx >= w or ny < 0 or ny >= h:
                break

            if cells[ny, nx] == building_code:
                if bounces >= max_reflections:
                    break
                # reflect at the boundary point, flipping crossed components
                x += t * dx
                y += t * dy
                traveled += t
                seg_d0 = traveled
                seg_ox = x
                seg_oy = y
                if step_x or corner:
                    dx = -dx
                if step_y or corner:
                    dy = -dy
                bounces += 1
                loss_db += reflection_loss_db
                gain = 10.0 ** (-loss_db / 10.0)
                d_now = traveled if traveled > 0.5 else 0.5
                if p_tx_lin * gain / ((d_now * mpp) * (d_now * mpp)) < floor_lin * 1.0e-3:
                    break
                continue

            # enter the next cell
            x += t * dx
            y += t * dy
            traveled += t
            ix = nx
            iy = ny

            # perpendicular distance from the cell center to the ray line
            ex = ix - seg_ox
            ey = iy - seg_oy
            perp = abs(ex * dy - ey * dx)
            if perp <= rx_capture_radius:
                proj = ex * dx + ey * dy
                d_px = seg_d0 + proj
                if d_px < 0.5:
                    d_px = 0.5
                d_m = d_px * mpp
                gain = 10.0 ** (-loss_db / 10.0)
                p = p_tx_lin * gain / (d_m * d_m)
                if p > best[bounces, iy, ix]:
                    best[bounces, iy, ix] = p

            if traveled > max_path_px:
                break
            d_now = traveled if traveled > 0.5 else 0.5
            gain = 10.0 ** (-loss_db / 10.0)
            if p_tx_lin * gain / ((d_now * mpp) * (d_now * mpp)) < floor_lin * 1.0e-3:
                break

    total = np.zeros((h, w), dtype=np.float64)
    for b in range(n_classes):
        for yy in range(h):
            for xx in range(w):
                total[yy, xx] += best[b, yy, xx]

    out = np.full((h, w), floor_dbm, dtype=np.float64)
    for yy in range(h):
        for xx in range(w):
            if total[yy, xx] > 0.0:
                v = 10.0 * math.log10(total[yy, xx])
                if v < floor_dbm:
                    v = floor_dbm
                out[yy, xx] = v
    return out
