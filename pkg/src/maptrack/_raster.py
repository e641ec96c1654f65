"""Numba kernels for z-buffered triangle rasterization.

Pixel centers sit at integer coordinates. Coverage uses edge functions in
float64 with a top-left fill rule so that pixels on an edge shared by two
triangles are drawn exactly once. Rows are split into bands that are
rasterized independently; every band visits triangles in index order, so the
result does not depend on how many bands or threads are used.
"""

import numba as nb
import numpy as np


@nb.njit(cache=True, inline="always")
def _is_top_left(dx, dy):
    # orientation is normalized to positive area in y-down screen space
    return dy < 0.0 or (dy == 0.0 and dx > 0.0)


@nb.njit(cache=True)
def _fill_triangle(u, v, z, s, t, row0, row1, width, zbuf, texcol, texrow):
    ax, ay, bx, by, cx, cy = u[0], v[0], u[1], v[1], u[2], v[2]
    za, zb, zc = z[0], z[1], z[2]
    sa, sb, sc = s[0], s[1], s[2]
    ta, tb, tc = t[0], t[1], t[2]
    area = (bx - ax) * (cy - ay) - (by - ay) * (cx - ax)
    if area == 0.0 or not np.isfinite(area):
        return
    if area < 0.0:
        bx, by, cx, cy = cx, cy, bx, by
        zb, zc = zc, zb
        sb, sc = sc, sb
        tb, tc = tc, tb
        area = -area

    xmin = max(int(np.ceil(min(ax, min(bx, cx)))), 0)
    xmax = min(int(np.floor(max(ax, max(bx, cx)))), width - 1)
    ymin = max(int(np.ceil(min(ay, min(by, cy)))), row0)
    ymax = min(int(np.floor(max(ay, max(by, cy)))), row1 - 1)
    if xmin > xmax or ymin > ymax:
        return

    # edge i is opposite vertex i
    e0dx, e0dy = cx - bx, cy - by
    e1dx, e1dy = ax - cx, ay - cy
    e2dx, e2dy = bx - ax, by - ay
    tl0 = _is_top_left(e0dx, e0dy)
    tl1 = _is_top_left(e1dx, e1dy)
    tl2 = _is_top_left(e2dx, e2dy)
    iza, izb, izc = 1.0 / za, 1.0 / zb, 1.0 / zc
    inv_area = 1.0 / area

    for py in range(ymin, ymax + 1):
        fy = float(py)
        for px in range(xmin, xmax + 1):
            fx = float(px)
            w0 = e0dx * (fy - by) - e0dy * (fx - bx)
            w1 = e1dx * (fy - cy) - e1dy * (fx - cx)
            w2 = e2dx * (fy - ay) - e2dy * (fx - ax)
            if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                continue
            if (w0 == 0.0 and not tl0) or (w1 == 0.0 and not tl1) or (w2 == 0.0 and not tl2):
                continue
            l0 = w0 * inv_area
            l1 = w1 * inv_area
            l2 = w2 * inv_area
            iz = l0 * iza + l1 * izb + l2 * izc
            depth = 1.0 / iz
            if depth < zbuf[py, px]:
                zbuf[py, px] = depth
                ss = (l0 * sa * iza + l1 * sb * izb + l2 * sc * izc) * depth
                tt = (l0 * ta * iza + l1 * tb * izb + l2 * tc * izc) * depth
                texcol[py, px] = np.floor(ss + 0.5)
                texrow[py, px] = np.floor(tt + 0.5)


@nb.njit(cache=True)
def _clip_near(P, S, T, near, outP, outS, outT):
    """Sutherland-Hodgman clip of one triangle against z >= near.

    Returns the number of output vertices (0, 3 or 4).
    """
    n = 0
    for i in range(3):
        j = (i + 1) % 3
        zi = P[i, 2]
        zj = P[j, 2]
        inside_i = zi >= near
        inside_j = zj >= near
        if inside_i:
            outP[n, 0] = P[i, 0]
            outP[n, 1] = P[i, 1]
            outP[n, 2] = P[i, 2]
            outS[n] = S[i]
            outT[n] = T[i]
            n += 1
        if inside_i != inside_j:
            a = (near - zi) / (zj - zi)
            outP[n, 0] = P[i, 0] + a * (P[j, 0] - P[i, 0])
            outP[n, 1] = P[i, 1] + a * (P[j, 1] - P[i, 1])
            outP[n, 2] = near
            outS[n] = S[i] + a * (S[j] - S[i])
            outT[n] = T[i] + a * (T[j] - T[i])
            n += 1
    return n


@nb.njit(cache=True)
def _raster_band(row0, row1, verts_cam, uv, tris, tex, fx, fy, cx, cy, near, width,
                 zbuf, texcol, texrow):
    u = np.empty(3)
    v = np.empty(3)
    z = np.empty(3)
    s = np.empty(3)
    t = np.empty(3)
    P = np.empty((3, 3))
    S = np.empty(3)
    T = np.empty(3)
    cP = np.empty((4, 3))
    cS = np.empty(4)
    cT = np.empty(4)
    ftop = float(row0)
    fbot = float(row1 - 1)
    fright = float(width - 1)
    for f in range(tris.shape[0]):
        i0, i1, i2 = tris[f, 0], tris[f, 1], tris[f, 2]
        z0, z1, z2 = verts_cam[i0, 2], verts_cam[i1, 2], verts_cam[i2, 2]
        if z0 < near and z1 < near and z2 < near:
            continue
        if z0 > near and z1 > near and z2 > near:
            v0, v1, v2 = uv[i0, 1], uv[i1, 1], uv[i2, 1]
            if max(v0, max(v1, v2)) < ftop or min(v0, min(v1, v2)) > fbot:
                continue
            u0, u1, u2 = uv[i0, 0], uv[i1, 0], uv[i2, 0]
            if max(u0, max(u1, u2)) < 0.0 or min(u0, min(u1, u2)) > fright:
                continue
            u[0], u[1], u[2] = u0, u1, u2
            v[0], v[1], v[2] = v0, v1, v2
            z[0], z[1], z[2] = z0, z1, z2
            s[0], s[1], s[2] = tex[i0, 0], tex[i1, 0], tex[i2, 0]
            t[0], t[1], t[2] = tex[i0, 1], tex[i1, 1], tex[i2, 1]
            _fill_triangle(u, v, z, s, t, row0, row1, width, zbuf, texcol, texrow)
            continue
        # straddles the near plane: clip, then fan-triangulate
        for k in range(3):
            idx = tris[f, k]
            P[k, 0] = verts_cam[idx, 0]
            P[k, 1] = verts_cam[idx, 1]
            P[k, 2] = verts_cam[idx, 2]
            S[k] = tex[idx, 0]
            T[k] = tex[idx, 1]
        n = _clip_near(P, S, T, near, cP, cS, cT)
        for k in range(1, n - 1):
            for m in range(3):
                q = 0 if m == 0 else k + m - 1
                zq = cP[q, 2]
                u[m] = fx * cP[q, 0] / zq + cx
                v[m] = fy * cP[q, 1] / zq + cy
                z[m] = zq
                s[m] = cS[q]
                t[m] = cT[q]
            _fill_triangle(u, v, z, s, t, row0, row1, width, zbuf, texcol, texrow)


@nb.njit(cache=True, parallel=True)
def rasterize(verts_cam, uv, tris, tex, fx, fy, cx, cy, near, width, height, n_bands):
    """Return (zbuf, texcol, texrow); zbuf is +inf where nothing was hit."""
    zbuf = np.full((height, width), np.inf)
    texcol = np.full((height, width), -1, dtype=np.int64)
    texrow = np.full((height, width), -1, dtype=np.int64)
    band = (height + n_bands - 1) // n_bands
    for b in nb.prange(n_bands):
        row0 = b * band
        row1 = min(height, row0 + band)
        if row0 < row1:
            _raster_band(row0, row1, verts_cam, uv, tris, tex, fx, fy, cx, cy, near, width,
                         zbuf, texcol, texrow)
    return zbuf, texcol, texrow


@nb.njit(cache=True)
def warp_sample(query, R, t, points, fx, fy, cx, cy, out, ok):
    """Transform points by (R, t), project, and bilinearly sample ``query`` (C, H, W).

    Fills ``out`` (N, C) and ``ok`` (N,); samples outside the image or
    behind the camera are flagged and left at zero.
    """
    C, H, W = query.shape
    for n in range(points.shape[0]):
        px, py, pz = points[n, 0], points[n, 1], points[n, 2]
        x = R[0, 0] * px + R[0, 1] * py + R[0, 2] * pz + t[0]
        y = R[1, 0] * px + R[1, 1] * py + R[1, 2] * pz + t[1]
        z = R[2, 0] * px + R[2, 1] * py + R[2, 2] * pz + t[2]
        for c in range(C):
            out[n, c] = 0.0
        ok[n] = False
        if z <= 1e-6:
            continue
        u = fx * x / z + cx
        v = fy * y / z + cy
        if not (u >= 0.0 and u <= W - 1 and v >= 0.0 and v <= H - 1):
            continue
        u0 = min(int(np.floor(u)), W - 2)
        v0 = min(int(np.floor(v)), H - 2)
        fu = u - u0
        fv = v - v0
        for c in range(C):
            top = query[c, v0, u0] * (1.0 - fu) + query[c, v0, u0 + 1] * fu
            bot = query[c, v0 + 1, u0] * (1.0 - fu) + query[c, v0 + 1, u0 + 1] * fu
            out[n, c] = top * (1.0 - fv) + bot * fv
        ok[n] = True
