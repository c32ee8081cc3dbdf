"""Compiled per-subset solver loops for the batched network and GeoIP solvers.

Subsets arrive in CSR form: ``members[ptr[s]:ptr[s+1]]`` are the anchor
columns of subset ``s``.
"""

import math

import numpy as np
from numba import njit

MAX_ITER = 50
STEP_TOL = 1e-4
COST_RTOL = 1e-9
SEED_GRID = 5
HINGE_STEP_TOL = 1.0     # GeoIP ranges are km-scale; a meter is converged
ZOOM_GRID = 21
ZOOM_LEVELS = 12
ZOOM_MIN = 6            # feasible grid points needed before trusting a centroid
ZOOM_GATE = 10.0        # rms hinge violation (m) below which an empty grid may have missed a sliver


@njit(cache=True)
def _wls_cost(px, py, ax, ay, az, dist, mem):
    c = 0.0
    for j in mem:
        dx = px - ax[j]
        dy = py - ay[j]
        r = math.sqrt(dx * dx + dy * dy + az[j] * az[j])
        e = (r - dist[j]) / dist[j]
        c += e * e
    return c


@njit(cache=True)
def _wls_gn(px, py, ax, ay, az, dist, mem):
    cost = _wls_cost(px, py, ax, ay, az, dist, mem)
    step = 1.0
    done = False
    for _ in range(MAX_ITER):
        a11 = 0.0
        a12 = 0.0
        a22 = 0.0
        b1 = 0.0
        b2 = 0.0
        h11 = 0.0
        h12 = 0.0
        h22 = 0.0
        for j in mem:
            dx = px - ax[j]
            dy = py - ay[j]
            r = max(math.sqrt(dx * dx + dy * dy + az[j] * az[j]), 1e-9)
            e = (r - dist[j]) / dist[j]
            jx = dx / (r * dist[j])
            jy = dy / (r * dist[j])
            a11 += jx * jx
            a12 += jx * jy
            a22 += jy * jy
            b1 += jx * e
            b2 += jy * e
            # residual curvature: e * d2r / d(p)^2 / d
            w = e / (dist[j] * r)
            ux = dx / r
            uy = dy / r
            h11 += w * (1.0 - ux * ux)
            h12 -= w * ux * uy
            h22 += w * (1.0 - uy * uy)
        # full Newton when the Hessian is positive definite, else Gauss-Newton
        n11 = a11 + h11
        n12 = a12 + h12
        n22 = a22 + h22
        ndet = n11 * n22 - n12 * n12
        if n11 > 0.0 and ndet > 1e-12 * max(n11 * n22, 1e-300):
            a11 = n11
            a12 = n12
            a22 = n22
        det = a11 * a22 - a12 * a12
        if abs(det) < 1e-18:
            d1 = 0.0
            d2 = 0.0
        else:
            d1 = -(a22 * b1 - a12 * b2) / det
            d2 = -(a11 * b2 - a12 * b1) / det
        cx = px + step * d1
        cy = py + step * d2
        c_cost = _wls_cost(cx, cy, ax, ay, az, dist, mem)
        if c_cost <= cost:
            move = step * math.sqrt(d1 * d1 + d2 * d2)
            px = cx
            py = cy
            gain = cost - c_cost
            cost = c_cost
            if move < STEP_TOL or gain <= COST_RTOL * cost:
                done = True
                break
            step = min(step * 2.0, 1.0)
        else:
            step *= 0.5
            if step < 1e-8:
                done = True
                break
    return px, py, cost, done


@njit(cache=True)
def wls_subsets(ax, ay, az, dist, members, ptr, n_starts, prior_rel):
    s_count = len(ptr) - 1
    en = np.empty((s_count, 2))
    sigma = np.empty((s_count, 3))
    rms = np.empty(s_count)
    ok = np.zeros(s_count, dtype=np.bool_)
    obj = np.empty(s_count)
    offs = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
    for s in range(s_count):
        mem = members[ptr[s]:ptr[s + 1]]
        n = len(mem)
        cx = 0.0
        cy = 0.0
        for j in mem:
            cx += ax[j]
            cy += ay[j]
        cx /= n
        cy /= n
        sp = 0.0
        for j in mem:
            sp += (ax[j] - cx) ** 2 + (ay[j] - cy) ** 2
        sp = max(math.sqrt(sp / n), 1.0)
        best = np.inf
        bx = np.nan
        by = np.nan
        bdone = False
        for k in range(min(n_starts, 5)):
            px, py, c, d = _wls_gn(cx + 0.5 * sp * offs[k, 0], cy + 0.5 * sp * offs[k, 1],
                                   ax, ay, az, dist, mem)
            if c < best:
                best = c
                bx = px
                by = py
                bdone = d
        en[s, 0] = bx
        en[s, 1] = by
        obj[s] = best
        # covariance (J^T J)^-1 s^2 at the solution
        a11 = 0.0
        a12 = 0.0
        a22 = 0.0
        ee = 0.0
        rr = 0.0
        for j in mem:
            dx = bx - ax[j]
            dy = by - ay[j]
            r = max(math.sqrt(dx * dx + dy * dy + az[j] * az[j]), 1e-9)
            e = (r - dist[j]) / dist[j]
            jx = dx / (r * dist[j])
            jy = dy / (r * dist[j])
            a11 += jx * jx
            a12 += jx * jy
            a22 += jy * jy
            ee += e * e
            rr += (r - dist[j]) ** 2
        det = a11 * a22 - a12 * a12
        s2 = max(ee / max(n - 2.0, 1.0), prior_rel * prior_rel)
        good = bdone and n >= 3 and math.isfinite(best) and det > 1e-12 * max(a11 * a22, 1e-300)
        if good:
            se = math.sqrt(abs(a22 / det * s2))
            sn = math.sqrt(abs(a11 / det * s2))
        else:
            se = np.nan
            sn = np.nan
        sigma[s, 0] = se
        sigma[s, 1] = sn
        sigma[s, 2] = max(se, sn)
        rms[s] = math.sqrt(rr / n)
        ok[s] = good and math.isfinite(se) and math.isfinite(sn) and math.isfinite(bx) and math.isfinite(by)
    return en, sigma, rms, ok, obj


@njit(cache=True)
def _hinge_cost(px, py, ax, ay, az, dist, mem):
    c = 0.0
    for j in mem:
        dx = px - ax[j]
        dy = py - ay[j]
        r = math.sqrt(dx * dx + dy * dy + az[j] * az[j])
        h = r - dist[j]
        if h > 0.0:
            c += h * h
    return c


@njit(cache=True)
def _inside_all(px, py, ax, ay, az, dist, mem):
    for j in mem:
        dx = px - ax[j]
        dy = py - ay[j]
        if dx * dx + dy * dy + az[j] * az[j] > dist[j] * dist[j]:
            return False
    return True


@njit(cache=True)
def _hinge_gn(px, py, ax, ay, az, dist, mem):
    cost = _hinge_cost(px, py, ax, ay, az, dist, mem)
    step = 1.0
    for _ in range(MAX_ITER):
        if cost <= 0.0:
            break
        a11 = 1e-12
        a12 = 0.0
        a22 = 1e-12
        b1 = 0.0
        b2 = 0.0
        for j in mem:
            dx = px - ax[j]
            dy = py - ay[j]
            r = max(math.sqrt(dx * dx + dy * dy + az[j] * az[j]), 1e-9)
            h = r - dist[j]
            if h > 0.0:
                jx = dx / r
                jy = dy / r
                a11 += jx * jx
                a12 += jx * jy
                a22 += jy * jy
                b1 += jx * h
                b2 += jy * h
        det = a11 * a22 - a12 * a12
        d1 = -(a22 * b1 - a12 * b2) / det
        d2 = -(a11 * b2 - a12 * b1) / det
        cx = px + step * d1
        cy = py + step * d2
        c_cost = _hinge_cost(cx, cy, ax, ay, az, dist, mem)
        if c_cost <= cost:
            move = step * math.sqrt(d1 * d1 + d2 * d2)
            px = cx
            py = cy
            cost = c_cost
            if move < HINGE_STEP_TOL:
                break
            step = min(step * 2.0, 1.0)
        else:
            step *= 0.5
            if step < 1e-8:
                break
    return px, py, cost


@njit(cache=True)
def _zoom_centroid(cx, cy, h, ax, ay, az, dist, mem):
    """Centroid of the feasible region near a feasible seed point.

    Shrinks the sampling box until enough grid points fall inside all
    circles, then re-centers and grows it until the feasible points no
    longer touch the box edge. Returns (x, y, spread_x, spread_y, found).
    """
    found = False
    rx = cx
    ry = cy
    vx = 0.0
    vy = 0.0
    for _ in range(ZOOM_LEVELS):
        nf = 0
        sx = 0.0
        sy = 0.0
        sxx = 0.0
        syy = 0.0
        mnx = np.inf
        mny = np.inf
        mxx = -np.inf
        mxy = -np.inf
        for gi in range(ZOOM_GRID):
            x = cx - h + 2.0 * h * gi / (ZOOM_GRID - 1)
            for gj in range(ZOOM_GRID):
                y = cy - h + 2.0 * h * gj / (ZOOM_GRID - 1)
                if _inside_all(x, y, ax, ay, az, dist, mem):
                    nf += 1
                    sx += x
                    sy += y
                    sxx += x * x
                    syy += y * y
                    mnx = min(mnx, x)
                    mny = min(mny, y)
                    mxx = max(mxx, x)
                    mxy = max(mxy, y)
        if nf < ZOOM_MIN:
            if found:
                break
            h *= 0.25
            continue
        found = True
        rx = sx / nf
        ry = sy / nf
        vx = max(sxx / nf - rx * rx, 0.0)
        vy = max(syy / nf - ry * ry, 0.0)
        edge = 0.5 * h / (ZOOM_GRID - 1)
        if mnx > cx - h + edge and mxx < cx + h - edge and mny > cy - h + edge and mxy < cy + h - edge:
            break
        cx = 0.5 * (mnx + mxx)
        cy = 0.5 * (mny + mxy)
        h *= 2.0
    return rx, ry, math.sqrt(vx), math.sqrt(vy), found


@njit(cache=True)
def geoip_subsets(ax, ay, az, dist, members, ptr, grid_n, prior_m):
    s_count = len(ptr) - 1
    en = np.empty((s_count, 2))
    sigma = np.empty((s_count, 3))
    rms = np.empty(s_count)
    ok = np.zeros(s_count, dtype=np.bool_)
    obj = np.zeros(s_count)
    horiz = np.sqrt(np.maximum(dist * dist - az * az, 0.0))
    for s in range(s_count):
        mem = members[ptr[s]:ptr[s + 1]]
        n = len(mem)
        lo_x = -1e300
        hi_x = 1e300
        lo_y = -1e300
        hi_y = 1e300
        jmin = mem[0]
        for j in mem:
            lo_x = max(lo_x, ax[j] - horiz[j])
            hi_x = min(hi_x, ax[j] + horiz[j])
            lo_y = max(lo_y, ay[j] - horiz[j])
            hi_y = min(hi_y, ay[j] + horiz[j])
            if dist[j] < dist[jmin]:
                jmin = j
        if lo_x > hi_x or lo_y > hi_y:
            lo_x = ax[jmin] - horiz[jmin]
            hi_x = ax[jmin] + horiz[jmin]
            lo_y = ay[jmin] - horiz[jmin]
            hi_y = ay[jmin] + horiz[jmin]
        # tightest circle first: most grid points fail on the first test
        tight = mem[np.argsort(dist[mem])]
        nf = 0
        sx = 0.0
        sy = 0.0
        sxx = 0.0
        syy = 0.0
        for gi in range(grid_n):
            x = lo_x + (hi_x - lo_x) * gi / (grid_n - 1)
            for gj in range(grid_n):
                y = lo_y + (hi_y - lo_y) * gj / (grid_n - 1)
                if _inside_all(x, y, ax, ay, az, dist, tight):
                    nf += 1
                    sx += x
                    sy += y
                    sxx += x * x
                    syy += y * y
        best = np.inf
        bx = lo_x
        by = lo_y
        if nf == 0:
            # coarse seed for the hinge descent
            for gi in range(SEED_GRID):
                x = lo_x + (hi_x - lo_x) * gi / (SEED_GRID - 1)
                for gj in range(SEED_GRID):
                    y = lo_y + (hi_y - lo_y) * gj / (SEED_GRID - 1)
                    c = _hinge_cost(x, y, ax, ay, az, dist, mem)
                    if c < best:
                        best = c
                        bx = x
                        by = y
        cell = max(hi_x - lo_x, hi_y - lo_y) / (grid_n - 1)
        floor = cell / math.sqrt(12.0)
        hx = bx
        hy = by
        hc = np.inf
        if nf == 0:
            hx, hy, hc = _hinge_gn(bx, by, ax, ay, az, dist, mem)
        # feasible region small against the grid: resolve it locally, unless the
        # circles plainly miss each other
        if nf > 0 and nf < ZOOM_MIN or nf == 0 and math.sqrt(hc / n) < ZOOM_GATE:
            px = hx
            py = hy
            if nf > 0:
                px = sx / nf
                py = sy / nf
            zx, zy, zsx, zsy, zok = _zoom_centroid(px, py, cell, ax, ay, az, dist, tight)
            if zok:
                nf = ZOOM_MIN
                sx = zx * nf
                sy = zy * nf
                sxx = (zsx * zsx + zx * zx) * nf
                syy = (zsy * zsy + zy * zy) * nf
                floor = 0.0
        if nf > 0:
            mx = sx / nf
            my = sy / nf
            en[s, 0] = mx
            en[s, 1] = my
            vx = max(sxx / nf - mx * mx, 0.0)
            vy = max(syy / nf - my * my, 0.0)
            se = max(math.sqrt(vx), floor)
            sn = max(math.sqrt(vy), floor)
            scale = prior_m
        else:
            c = hc
            en[s, 0] = hx
            en[s, 1] = hy
            obj[s] = c
            se = 0.0
            sn = 0.0
            scale = max(math.sqrt(c / n), prior_m, 1.0)
        # geometry term: unit line-of-sight normal matrix at the solution
        a11 = 0.0
        a12 = 0.0
        a22 = 0.0
        for j in mem:
            dx = en[s, 0] - ax[j]
            dy = en[s, 1] - ay[j]
            r = max(math.sqrt(dx * dx + dy * dy + az[j] * az[j]), 1e-9)
            a11 += (dx / r) ** 2
            a12 += dx * dy / (r * r)
            a22 += (dy / r) ** 2
        det = max(a11 * a22 - a12 * a12, 1e-12)
        se = max(se, math.sqrt(abs(a22 / det)) * scale)
        sn = max(sn, math.sqrt(abs(a11 / det)) * scale)
        sigma[s, 0] = se
        sigma[s, 1] = sn
        sigma[s, 2] = max(se, sn)
        hh = 0.0
        for j in mem:
            dx = en[s, 0] - ax[j]
            dy = en[s, 1] - ay[j]
            h = math.sqrt(dx * dx + dy * dy + az[j] * az[j]) - dist[j]
            if h > 0.0:
                hh += h * h
        rms[s] = math.sqrt(hh / n)
        ok[s] = n >= 3 and math.isfinite(en[s, 0]) and math.isfinite(en[s, 1])
    return en, sigma, rms, ok, obj
