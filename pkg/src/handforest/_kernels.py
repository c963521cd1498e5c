"""Compiled inner loops.

Packed image layout used by the probe kernels: ``pix`` is a flat array of
all frames' cropped pixel grids holding a global point id (-1 = missing),
``zs`` and ``normals`` are the per-point depth and normal,
``meta[f] = (base, row0, col0, height, width)`` locates the crop of frame
``f`` and ``intr[f] = (fx, fy, cx, cy)``.
"""

import numpy as np
from numba import njit

DEPTH_DIFF = 0
NORMAL_DIFF = 1


@njit(cache=True)
def _probe(qx, qy, qz, fx, fy, cx, cy, row0, col0, base, h, w, pix):
    if not qz > 0.0:
        return -1
    # nearest pixel; bounds are checked before truncation so int() acts as floor
    uf = fx * qx / qz + cx + 0.5 - col0
    vf = fy * qy / qz + cy + 0.5 - row0
    if not (uf >= 0.0 and vf >= 0.0 and uf < w and vf < h):
        return -1
    return pix[base + int(vf) * w + int(uf)]


@njit(cache=True)
def _feature(off, k, R, px, py, pz, cam, kind, pix, zs, normals, bg_depth):
    r00, r01, r02, r10, r11, r12, r20, r21, r22 = R
    fx, fy, cx, cy, row0, col0, base, h, w = cam
    d0, d1, d2 = off[k, 0], off[k, 1], off[k, 2]
    i1 = _probe(px + r00 * d0 + r01 * d1 + r02 * d2, py + r10 * d0 + r11 * d1 + r12 * d2,
                pz + r20 * d0 + r21 * d1 + r22 * d2, fx, fy, cx, cy, row0, col0, base, h, w, pix)
    d0, d1, d2 = off[k, 3], off[k, 4], off[k, 5]
    i2 = _probe(px + r00 * d0 + r01 * d1 + r02 * d2, py + r10 * d0 + r11 * d1 + r12 * d2,
                pz + r20 * d0 + r21 * d1 + r22 * d2, fx, fy, cx, cy, row0, col0, base, h, w, pix)
    if kind == DEPTH_DIFF:
        a = zs[i1] if i1 >= 0 else bg_depth
        b = zs[i2] if i2 >= 0 else bg_depth
        return a - b
    if i1 >= 0:
        a0, a1, a2 = normals[i1, 0], normals[i1, 1], normals[i1, 2]
    else:
        a0, a1, a2 = 0.0, 0.0, 1.0
    if i2 >= 0:
        b0, b1, b2 = normals[i2, 0], normals[i2, 1], normals[i2, 2]
    else:
        b0, b1, b2 = 0.0, 0.0, 1.0
    return a0 * b0 + a1 * b1 + a2 * b2


@njit(cache=True)
def _rot(rots, i):
    return (rots[i, 0, 0], rots[i, 0, 1], rots[i, 0, 2], rots[i, 1, 0], rots[i, 1, 1],
            rots[i, 1, 2], rots[i, 2, 0], rots[i, 2, 1], rots[i, 2, 2])


@njit(cache=True)
def _cam(f, meta, intr):
    return (intr[f, 0], intr[f, 1], intr[f, 2], intr[f, 3], float(meta[f, 1]),
            float(meta[f, 2]), meta[f, 0], float(meta[f, 3]), meta[f, 4])


@njit(cache=True)
def image_values(offsets, kind, fids, pts, rots, meta, intr, pix, zs, normals, bg_depth):
    """Feature matrix ``(K, m)``: every offset pair against every sample."""
    K = offsets.shape[0]
    m = fids.shape[0]
    out = np.empty((K, m))
    for i in range(m):
        R = _rot(rots, i)
        cam = _cam(fids[i], meta, intr)
        px, py, pz = pts[i, 0], pts[i, 1], pts[i, 2]
        for k in range(K):
            out[k, i] = _feature(offsets, k, R, px, py, pz, cam, kind, pix, zs, normals,
                                 bg_depth)
    return out


@njit(cache=True)
def image_values_paired(offsets, kind, fids, pts, rots, meta, intr, pix, zs, normals, bg_depth):
    """Feature vector ``(m,)``: sample ``i`` evaluated with ``offsets[i]``."""
    m = fids.shape[0]
    out = np.empty(m)
    for i in range(m):
        out[i] = _feature(offsets, i, _rot(rots, i), pts[i, 0], pts[i, 1], pts[i, 2],
                          _cam(fids[i], meta, intr), kind, pix, zs, normals, bg_depth)
    return out


@njit(cache=True)
def route_images(node_off, node_thr, node_right, node_leaf, kind, fids, pts, rots,
                 meta, intr, pix, zs, normals, bg_depth):
    """Leaf id reached by each sample in one tree (left iff value < threshold)."""
    m = fids.shape[0]
    out = np.empty(m, dtype=np.int64)
    for i in range(m):
        R = _rot(rots, i)
        cam = _cam(fids[i], meta, intr)
        px, py, pz = pts[i, 0], pts[i, 1], pts[i, 2]
        node = 0
        while node_leaf[node] < 0:
            v = _feature(node_off, node, R, px, py, pz, cam, kind, pix, zs, normals, bg_depth)
            if v < node_thr[node]:
                node = node + 1
            else:
                node = node_right[node]
        out[i] = node_leaf[node]
    return out


@njit(cache=True)
def _bin_of(thr_row, v):
    # number of thresholds <= v (thresholds sorted ascending)
    b = 0
    T = thr_row.shape[0]
    while b < T and thr_row[b] <= v:
        b += 1
    return b


@njit(cache=True)
def gaussian_gains(values, thr, targets, min_leaf):
    """Reduction of the summed offset variance (trace of covariance) for every
    candidate ``(k, t)``; ``-inf`` where a child would be smaller than ``min_leaf``."""
    K, T = thr.shape
    m, D = targets.shape
    tot = np.zeros(D)
    tot_sq = 0.0
    for i in range(m):
        for j in range(D):
            tot[j] += targets[i, j]
            tot_sq += targets[i, j] * targets[i, j]
    parent = tot_sq / m
    for j in range(D):
        parent -= (tot[j] / m) ** 2
    gains = np.full((K, T), -np.inf)
    cnt = np.zeros(T + 1)
    s = np.zeros((T + 1, D))
    sq = np.zeros(T + 1)
    for k in range(K):
        cnt[:] = 0.0
        s[:, :] = 0.0
        sq[:] = 0.0
        for i in range(m):
            b = _bin_of(thr[k], values[k, i])
            cnt[b] += 1.0
            for j in range(D):
                s[b, j] += targets[i, j]
                sq[b] += targets[i, j] * targets[i, j]
        nl = 0.0
        sl = np.zeros(D)
        sql = 0.0
        for t in range(T):
            nl += cnt[t]
            sql += sq[t]
            for j in range(D):
                sl[j] += s[t, j]
            nr = m - nl
            if nl < min_leaf or nr < min_leaf:
                continue
            trl = sql / nl
            trr = (tot_sq - sql) / nr
            for j in range(D):
                trl -= (sl[j] / nl) ** 2
                trr -= ((tot[j] - sl[j]) / nr) ** 2
            gains[k, t] = parent - (nl * trl + nr * trr) / m
    return gains


@njit(cache=True)
def _table_entropy(n, c, s, table, ds):
    if n <= 0.0:
        return 0.0
    rbar = np.sqrt(c * c + s * s) / n
    if rbar >= 1.0:
        return table[-1]
    x = -np.log1p(-rbar) / ds
    i = int(x)
    if i >= table.shape[0] - 1:
        return table[-1]
    w = x - i
    return table[i] * (1.0 - w) + table[i + 1] * w


@njit(cache=True)
def vonmises_gains(values, thr, cos_t, sin_t, min_leaf, table, ds):
    """Von Mises information gain for every candidate ``(k, t)``.

    Entropy is read from ``table`` sampled uniformly in ``-log(1 - R̄)``.
    """
    K, T = thr.shape
    m = values.shape[1]
    C = 0.0
    S = 0.0
    for i in range(m):
        C += cos_t[i]
        S += sin_t[i]
    parent = _table_entropy(m, C, S, table, ds)
    gains = np.full((K, T), -np.inf)
    cnt = np.zeros(T + 1)
    cc = np.zeros(T + 1)
    ss = np.zeros(T + 1)
    for k in range(K):
        cnt[:] = 0.0
        cc[:] = 0.0
        ss[:] = 0.0
        for i in range(m):
            b = _bin_of(thr[k], values[k, i])
            cnt[b] += 1.0
            cc[b] += cos_t[i]
            ss[b] += sin_t[i]
        nl = 0.0
        cl = 0.0
        sl = 0.0
        for t in range(T):
            nl += cnt[t]
            cl += cc[t]
            sl += ss[t]
            nr = m - nl
            if nl < min_leaf or nr < min_leaf:
                continue
            hl = _table_entropy(nl, cl, sl, table, ds)
            hr = _table_entropy(nr, C - cl, S - sl, table, ds)
            gains[k, t] = parent - (nl * hl + nr * hr) / m
    return gains


@njit(cache=True)
def mean_shift(votes, bandwidth, tol, max_iter):
    """Gaussian-kernel mean shift started from the coordinate-wise median."""
    n = votes.shape[0]
    x = np.empty(3)
    for j in range(3):
        x[j] = np.median(votes[:, j])
    inv = 1.0 / (2.0 * bandwidth * bandwidth)
    for _ in range(max_iter):
        wsum = 0.0
        acc = np.zeros(3)
        for i in range(n):
            d2 = 0.0
            for j in range(3):
                d2 += (votes[i, j] - x[j]) ** 2
            w = np.exp(-d2 * inv)
            wsum += w
            for j in range(3):
                acc[j] += w * votes[i, j]
        if wsum <= 0.0:
            break
        step = 0.0
        for j in range(3):
            nx = acc[j] / wsum
            step += (nx - x[j]) ** 2
            x[j] = nx
        if np.sqrt(step) < tol:
            break
    return x


@njit(cache=True)
def mean_shift_groups(votes, starts, bandwidth, tol, max_iter):
    """Mean shift over consecutive groups ``votes[starts[g]:starts[g+1]]``."""
    G = starts.shape[0] - 1
    out = np.empty((G, 3))
    for g in range(G):
        out[g] = mean_shift(votes[starts[g]:starts[g + 1]], bandwidth, tol, max_iter)
    return out


@njit(cache=True)
def _window(px, py, pz, r, fx, fy, cx, cy, H, W):
    if pz <= r:
        return 0, H - 1, 0, W - 1
    umin = 1e300
    umax = -1e300
    vmin = 1e300
    vmax = -1e300
    for sz in (pz - r, pz + r):
        for sx in (-r, r):
            u = fx * (px + sx) / sz + cx
            umin = min(umin, u)
            umax = max(umax, u)
            v = fy * (py + sx) / sz + cy
            vmin = min(vmin, v)
            vmax = max(vmax, v)
    c0 = max(int(np.floor(umin)), 0)
    c1 = min(int(np.ceil(umax)), W - 1)
    r0 = max(int(np.floor(vmin)), 0)
    r1 = min(int(np.ceil(vmax)), H - 1)
    return r0, r1, c0, c1


@njit(cache=True)
def pca_normals(points, index, ids, fx, fy, cx, cy, radius):
    """Smallest-eigenvalue covariance eigenvector per query point.

    ``status``: 0 ok, 1 fewer than three neighbours, 2 degenerate spectrum.
    """
    H, W = index.shape
    n = ids.shape[0]
    out = np.zeros((n, 3))
    status = np.zeros(n, dtype=np.int64)
    r2 = radius * radius
    cov = np.empty((3, 3))
    for qi in range(n):
        pid = ids[qi]
        px, py, pz = points[pid, 0], points[pid, 1], points[pid, 2]
        r0, r1, c0, c1 = _window(px, py, pz, radius, fx, fy, cx, cy, H, W)
        cnt = 0
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        s00 = 0.0
        s01 = 0.0
        s02 = 0.0
        s11 = 0.0
        s12 = 0.0
        s22 = 0.0
        for r in range(r0, r1 + 1):
            for c in range(c0, c1 + 1):
                j = index[r, c]
                if j < 0:
                    continue
                dx = points[j, 0] - px
                dy = points[j, 1] - py
                dz = points[j, 2] - pz
                if dx * dx + dy * dy + dz * dz > r2:
                    continue
                cnt += 1
                s0 += dx
                s1 += dy
                s2 += dz
                s00 += dx * dx
                s01 += dx * dy
                s02 += dx * dz
                s11 += dy * dy
                s12 += dy * dz
                s22 += dz * dz
        if cnt < 3:
            status[qi] = 1
            continue
        m0 = s0 / cnt
        m1 = s1 / cnt
        m2 = s2 / cnt
        cov[0, 0] = s00 / cnt - m0 * m0
        cov[0, 1] = s01 / cnt - m0 * m1
        cov[0, 2] = s02 / cnt - m0 * m2
        cov[1, 1] = s11 / cnt - m1 * m1
        cov[1, 2] = s12 / cnt - m1 * m2
        cov[2, 2] = s22 / cnt - m2 * m2
        cov[1, 0] = cov[0, 1]
        cov[2, 0] = cov[0, 2]
        cov[2, 1] = cov[1, 2]
        w, v = np.linalg.eigh(cov)
        if w[1] - w[0] < 1e-12:
            status[qi] = 2
            continue
        nx, ny, nz = v[0, 0], v[1, 0], v[2, 0]
        if nx * px + ny * py + nz * pz < 0.0:
            nx, ny, nz = -nx, -ny, -nz
        out[qi, 0] = nx
        out[qi, 1] = ny
        out[qi, 2] = nz
    return out, status


@njit(cache=True)
def edge_normals(points, index, is_edge, ids, fx, fy, cx, cy, radius):
    """In-image-plane silhouette normals for edge query points.

    A line is fitted to the ``(x, y)`` of neighbouring edge points; the normal
    is signed away from the mean of inner neighbours (all neighbours when
    there are none).  ``status`` 1 marks fewer than two edge neighbours.
    """
    H, W = index.shape
    n = ids.shape[0]
    out = np.zeros((n, 3))
    status = np.zeros(n, dtype=np.int64)
    r2 = radius * radius
    for qi in range(n):
        pid = ids[qi]
        px, py, pz = points[pid, 0], points[pid, 1], points[pid, 2]
        r0, r1, c0, c1 = _window(px, py, pz, radius, fx, fy, cx, cy, H, W)
        ne = 0
        ex = 0.0
        ey = 0.0
        exx = 0.0
        exy = 0.0
        eyy = 0.0
        ni = 0
        ix = 0.0
        iy = 0.0
        na = 0
        ax = 0.0
        ay = 0.0
        for r in range(r0, r1 + 1):
            for c in range(c0, c1 + 1):
                j = index[r, c]
                if j < 0:
                    continue
                dx = points[j, 0] - px
                dy = points[j, 1] - py
                dz = points[j, 2] - pz
                if dx * dx + dy * dy + dz * dz > r2:
                    continue
                if is_edge[j]:
                    ne += 1
                    ex += dx
                    ey += dy
                    exx += dx * dx
                    exy += dx * dy
                    eyy += dy * dy
                else:
                    ni += 1
                    ix += dx
                    iy += dy
                if j != pid:
                    na += 1
                    ax += dx
                    ay += dy
        if ne - 1 < 2:
            status[qi] = 1
            continue
        mx = ex / ne
        my = ey / ne
        a = exx / ne - mx * mx
        b = exy / ne - mx * my
        d = eyy / ne - my * my
        # eigenvector of the smaller eigenvalue of [[a, b], [b, d]]
        half = 0.5 * (a - d)
        lam = 0.5 * (a + d) - np.sqrt(half * half + b * b)
        if abs(b) > 1e-12 * (abs(a) + abs(d) + 1e-300):
            nx = lam - d
            ny = b
        elif a <= d:
            nx = 1.0
            ny = 0.0
        else:
            nx = 0.0
            ny = 1.0
        norm = np.sqrt(nx * nx + ny * ny)
        nx /= norm
        ny /= norm
        if ni > 0:
            rx = ix / ni
            ry = iy / ni
        elif na > 0:
            rx = ax / na
            ry = ay / na
        else:
            rx = 0.0
            ry = 0.0
        if nx * (0.0 - rx) + ny * (0.0 - ry) < 0.0:
            nx = -nx
            ny = -ny
        out[qi, 0] = nx
        out[qi, 1] = ny
    return out, status


@njit(cache=True)
def render_capsules(caps, fx, fy, cx, cy, H, W):
    """Z-buffered ray casting of sphere-swept segments ``caps[i] = (a, b, r)``.

    Returns depth (0 where nothing is hit) and the outward unit surface normal
    of the visible primitive per pixel.
    """
    depth = np.zeros((H, W))
    nrm = np.zeros((H, W, 3))
    for ci in range(caps.shape[0]):
        ax, ay, az = caps[ci, 0], caps[ci, 1], caps[ci, 2]
        bx, by, bz = caps[ci, 3], caps[ci, 4], caps[ci, 5]
        rad = caps[ci, 6]
        zmin = min(az, bz) - rad
        if zmin <= 1e-6:
            continue
        umin = 1e300
        umax = -1e300
        vmin = 1e300
        vmax = -1e300
        for X in (min(ax, bx) - rad, max(ax, bx) + rad):
            for Y in (min(ay, by) - rad, max(ay, by) + rad):
                for Z in (zmin, max(az, bz) + rad):
                    u = fx * X / Z + cx
                    v = fy * Y / Z + cy
                    umin = min(umin, u)
                    umax = max(umax, u)
                    vmin = min(vmin, v)
                    vmax = max(vmax, v)
        c0 = max(int(np.floor(umin)), 0)
        c1 = min(int(np.ceil(umax)), W - 1)
        r0 = max(int(np.floor(vmin)), 0)
        r1 = min(int(np.ceil(vmax)), H - 1)
        bax, bay, baz = bx - ax, by - ay, bz - az
        baba = bax * bax + bay * bay + baz * baz
        oax, oay, oaz = -ax, -ay, -az
        for r in range(r0, r1 + 1):
            for c in range(c0, c1 + 1):
                dx = (c - cx) / fx
                dy = (r - cy) / fy
                dn = np.sqrt(dx * dx + dy * dy + 1.0)
                rdx, rdy, rdz = dx / dn, dy / dn, 1.0 / dn
                t = -1.0
                bard = bax * rdx + bay * rdy + baz * rdz
                baoa = bax * oax + bay * oay + baz * oaz
                rdoa = rdx * oax + rdy * oay + rdz * oaz
                oaoa = oax * oax + oay * oay + oaz * oaz
                qa = baba - bard * bard
                if baba > 0.0 and qa > 1e-12:
                    qb = baba * rdoa - baoa * bard
                    qc = baba * oaoa - baoa * baoa - rad * rad * baba
                    h = qb * qb - qa * qc
                    if h >= 0.0:
                        tt = (-qb - np.sqrt(h)) / qa
                        yy = baoa + tt * bard
                        if yy > 0.0 and yy < baba:
                            t = tt
                if t < 0.0:
                    # end caps: nearest of the two spheres
                    for e in range(2):
                        if e == 0:
                            ox, oy, oz = oax, oay, oaz
                        else:
                            ox, oy, oz = -bx, -by, -bz
                        sb = rdx * ox + rdy * oy + rdz * oz
                        sc = ox * ox + oy * oy + oz * oz - rad * rad
                        sh = sb * sb - sc
                        if sh >= 0.0:
                            ts = -sb - np.sqrt(sh)
                            if ts > 0.0 and (t < 0.0 or ts < t):
                                t = ts
                if t <= 0.0:
                    continue
                z = t * rdz
                if depth[r, c] > 0.0 and depth[r, c] <= z:
                    continue
                hx, hy, hz = t * rdx, t * rdy, t * rdz
                if baba > 0.0:
                    s = ((hx - ax) * bax + (hy - ay) * bay + (hz - az) * baz) / baba
                    s = min(max(s, 0.0), 1.0)
                else:
                    s = 0.0
                nx = hx - (ax + s * bax)
                ny = hy - (ay + s * bay)
                nz = hz - (az + s * baz)
                nn = np.sqrt(nx * nx + ny * ny + nz * nz)
                depth[r, c] = z
                nrm[r, c, 0] = nx / nn
                nrm[r, c, 1] = ny / nn
                nrm[r, c, 2] = nz / nn
    return depth, nrm


@njit(cache=True)
def render_slab_faces(quads, radii, fx, fy, cx, cy, depth, nrm):
    """Add the two flat faces of sphere-swept planar convex quads
    ``quads[i] = 4 corners`` to an existing z-buffer.  The rounded rims are
    rendered separately as capsules along the quad edges."""
    H, W = depth.shape
    for qi in range(quads.shape[0]):
        rad = radii[qi]
        e1 = quads[qi, 2] - quads[qi, 0]
        e2 = quads[qi, 3] - quads[qi, 1]
        n = np.cross(e1, e2)
        n /= np.sqrt(np.sum(n * n))
        for side in (-1.0, 1.0):
            off = side * rad * n
            umin = 1e300
            umax = -1e300
            vmin = 1e300
            vmax = -1e300
            behind = False
            for k in range(4):
                P = quads[qi, k] + off
                if P[2] <= 1e-6:
                    behind = True
                    break
                u = fx * P[0] / P[2] + cx
                v = fy * P[1] / P[2] + cy
                umin = min(umin, u)
                umax = max(umax, u)
                vmin = min(vmin, v)
                vmax = max(vmax, v)
            if behind:
                continue
            c0 = max(int(np.floor(umin)), 0)
            c1 = min(int(np.ceil(umax)), W - 1)
            r0 = max(int(np.floor(vmin)), 0)
            r1 = min(int(np.ceil(vmax)), H - 1)
            p0 = quads[qi, 0] + off
            pn = p0[0] * n[0] + p0[1] * n[1] + p0[2] * n[2]
            for r in range(r0, r1 + 1):
                for c in range(c0, c1 + 1):
                    dx = (c - cx) / fx
                    dy = (r - cy) / fy
                    dn = np.sqrt(dx * dx + dy * dy + 1.0)
                    rdx, rdy, rdz = dx / dn, dy / dn, 1.0 / dn
                    den = rdx * n[0] + rdy * n[1] + rdz * n[2]
                    if abs(den) < 1e-12:
                        continue
                    t = pn / den
                    if t <= 0.0:
                        continue
                    hx, hy, hz = t * rdx, t * rdy, t * rdz
                    inside = True
                    sgn = 0.0
                    for k in range(4):
                        a = quads[qi, k] + off
                        b = quads[qi, (k + 1) % 4] + off
                        ex, ey, ez = b[0] - a[0], b[1] - a[1], b[2] - a[2]
                        wx, wy, wz = hx - a[0], hy - a[1], hz - a[2]
                        s = ((ey * wz - ez * wy) * n[0] + (ez * wx - ex * wz) * n[1]
                             + (ex * wy - ey * wx) * n[2])
                        if sgn == 0.0:
                            sgn = 1.0 if s >= 0.0 else -1.0
                        elif s * sgn < 0.0:
                            inside = False
                            break
                    if not inside:
                        continue
                    z = hz
                    if depth[r, c] > 0.0 and depth[r, c] <= z:
                        continue
                    depth[r, c] = z
                    nrm[r, c, 0] = side * n[0]
                    nrm[r, c, 1] = side * n[1]
                    nrm[r, c, 2] = side * n[2]
