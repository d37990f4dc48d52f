"""Hot geometry kernels, each with a numba path and a pure-numpy path.

The public functions dispatch on :data:`moralkit._accel.HAS_NUMBA`. Both
paths return identical results (indices exactly, floats to rounding), which
``tests/test_kernels.py`` checks directly.

Ordering rules shared by FPS, ball query and kNN: ties are broken by the
*canonical* rank of a point, i.e. its position in the lexicographic (x, y, z)
order. That makes every kernel invariant to a permutation of its input.
"""
import numpy as np

from ._accel import HAS_NUMBA, njit


def canonical_order(xyz):
    """Indices sorting points lexicographically by (x, y, z); stable."""
    xyz = np.asarray(xyz, dtype=np.float64)
    if len(xyz) == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort((xyz[:, 2], xyz[:, 1], xyz[:, 0])).astype(np.int64)


# ---------------------------------------------------------------- FPS

@njit
def _fps_numba(pts, m):
    n = pts.shape[0]
    sel = np.empty(m, dtype=np.int64)
    dist = np.full(n, np.inf)
    cur = 0
    for k in range(m):
        sel[k] = cur
        best = -1.0
        nxt = 0
        for j in range(n):
            dx = pts[j, 0] - pts[cur, 0]
            dy = pts[j, 1] - pts[cur, 1]
            dz = pts[j, 2] - pts[cur, 2]
            d = dx * dx + dy * dy + dz * dz
            if d < dist[j]:
                dist[j] = d
            if dist[j] > best:
                best = dist[j]
                nxt = j
        cur = nxt
    return sel


def _fps_numpy(pts, m):
    n = pts.shape[0]
    sel = np.empty(m, dtype=np.int64)
    dist = np.full(n, np.inf)
    cur = 0
    for k in range(m):
        sel[k] = cur
        diff = pts - pts[cur]
        d = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] + diff[:, 2] * diff[:, 2]
        np.minimum(dist, d, out=dist)
        cur = int(np.argmax(dist))
    return sel


def farthest_point_sample(xyz, m):
    """Pick ``m`` indices by farthest-point sampling.

    Starts from the canonically-first point; argmax ties go to the lowest
    canonical rank. Returns indices into ``xyz``.
    """
    xyz = np.ascontiguousarray(xyz, dtype=np.float64)
    order = canonical_order(xyz)
    pts = np.ascontiguousarray(xyz[order])
    if m <= 0:
        return np.zeros(0, dtype=np.int64)
    sel = _fps_numba(pts, m) if HAS_NUMBA else _fps_numpy(pts, m)
    return order[sel]


# ---------------------------------------------------------------- ball query

@njit
def _ball_query_numba(pts, centers, radius, k):
    n = pts.shape[0]
    m = centers.shape[0]
    out = np.empty((m, k), dtype=np.int64)
    r2 = radius * radius
    cand = np.empty(n, dtype=np.int64)
    cd = np.empty(n)
    for i in range(m):
        cnt = 0
        for j in range(n):
            dx = pts[j, 0] - centers[i, 0]
            dy = pts[j, 1] - centers[i, 1]
            dz = pts[j, 2] - centers[i, 2]
            d = dx * dx + dy * dy + dz * dz
            if d <= r2:
                cand[cnt] = j
                cd[cnt] = d
                cnt += 1
        if cnt == 0:
            # cannot happen for centers drawn from pts; keep the kernel total
            best = 0
            bd = np.inf
            for j in range(n):
                dx = pts[j, 0] - centers[i, 0]
                dy = pts[j, 1] - centers[i, 1]
                dz = pts[j, 2] - centers[i, 2]
                d = dx * dx + dy * dy + dz * dz
                if d < bd:
                    bd = d
                    best = j
            for s in range(k):
                out[i, s] = best
            continue
        o = np.argsort(cd[:cnt], kind="mergesort")
        for s in range(k):
            if s < cnt:
                out[i, s] = cand[o[s]]
            else:
                out[i, s] = cand[o[0]]
    return out


def _ball_query_numpy(pts, centers, radius, k):
    diff = centers[:, None, :] - pts[None, :, :]
    d = np.einsum("mnc,mnc->mn", diff, diff)
    within = d <= radius * radius
    key = np.where(within, d, np.inf)
    o = np.argsort(key, axis=1, kind="stable")[:, :k]
    if o.shape[1] < k:
        o = np.concatenate([o, np.repeat(o[:, :1], k - o.shape[1], axis=1)], axis=1)
    valid = np.take_along_axis(within, o, axis=1)
    nearest = np.argmin(d, axis=1)
    first = np.where(valid[:, 0], o[:, 0], nearest)
    return np.where(valid, o, first[:, None]).astype(np.int64)


def ball_query(xyz, centers, radius, k):
    """Up to ``k`` neighbours of each center within ``radius``, nearest first.

    Groups with fewer than ``k`` members are padded with their nearest member.
    Returns an ``(M, k)`` index array into ``xyz``.
    """
    xyz = np.ascontiguousarray(xyz, dtype=np.float64)
    centers = np.ascontiguousarray(centers, dtype=np.float64)
    order = canonical_order(xyz)
    pts = np.ascontiguousarray(xyz[order])
    if HAS_NUMBA:
        idx = _ball_query_numba(pts, centers, float(radius), int(k))
    else:
        idx = _ball_query_numpy(pts, centers, float(radius), int(k))
    return order[idx]


# ---------------------------------------------------------------- kNN

@njit
def _knn_numba(fine, coarse, k):
    n = fine.shape[0]
    m = coarse.shape[0]
    idx = np.empty((n, k), dtype=np.int64)
    dist = np.empty((n, k))
    best_d = np.empty(k)
    best_i = np.empty(k, dtype=np.int64)
    for i in range(n):
        filled = 0
        for j in range(m):
            dx = fine[i, 0] - coarse[j, 0]
            dy = fine[i, 1] - coarse[j, 1]
            dz = fine[i, 2] - coarse[j, 2]
            d = dx * dx + dy * dy + dz * dz
            if filled == k and d >= best_d[k - 1]:
                continue
            # insertion keeps equal distances in index order, like a stable sort
            s = filled if filled < k else k - 1
            while s > 0 and best_d[s - 1] > d:
                best_d[s] = best_d[s - 1]
                best_i[s] = best_i[s - 1]
                s -= 1
            best_d[s] = d
            best_i[s] = j
            if filled < k:
                filled += 1
        for s in range(k):
            idx[i, s] = best_i[s]
            dist[i, s] = np.sqrt(best_d[s])
    return idx, dist


def _knn_numpy(fine, coarse, k):
    diff = fine[:, None, :] - coarse[None, :, :]
    d = np.einsum("nmc,nmc->nm", diff, diff)
    o = np.argsort(d, axis=1, kind="stable")[:, :k]
    return o.astype(np.int64), np.sqrt(np.take_along_axis(d, o, axis=1))


def knn(fine, coarse, k=3):
    """``k`` nearest coarse points (Euclidean) for every fine point.

    ``k`` is clipped to the coarse set size. Ties go to the lower coarse index.
    """
    fine = np.ascontiguousarray(fine, dtype=np.float64)
    coarse = np.ascontiguousarray(coarse, dtype=np.float64)
    k = min(int(k), len(coarse))
    if HAS_NUMBA:
        return _knn_numba(fine, coarse, k)
    return _knn_numpy(fine, coarse, k)


# ---------------------------------------------------------------- pillars

@njit
def _pillar_slots_numba(ix, iy, nx, ny, max_pts):
    n = ix.shape[0]
    cell_to_pillar = np.full(nx * ny, -1, dtype=np.int64)
    pillar = np.full(n, -1, dtype=np.int64)
    slot = np.full(n, -1, dtype=np.int64)
    counts = np.zeros(n, dtype=np.int64)
    n_pillars = 0
    for i in range(n):
        if ix[i] < 0 or ix[i] >= nx or iy[i] < 0 or iy[i] >= ny:
            continue
        c = ix[i] * ny + iy[i]
        p = cell_to_pillar[c]
        if p < 0:
            p = n_pillars
            cell_to_pillar[c] = p
            n_pillars += 1
        pillar[i] = p
        if counts[p] < max_pts:
            slot[i] = counts[p]
        counts[p] += 1
    return pillar, slot, n_pillars


def _pillar_slots_numpy(ix, iy, nx, ny, max_pts):
    n = ix.shape[0]
    pillar = np.full(n, -1, dtype=np.int64)
    slot = np.full(n, -1, dtype=np.int64)
    inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
    pts = np.flatnonzero(inside)
    if len(pts) == 0:
        return pillar, slot, 0
    cells = ix[pts] * ny + iy[pts]
    uniq, first, inv = np.unique(cells, return_index=True, return_inverse=True)
    # pillars numbered in order of first appearance
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(uniq))
    pid = rank[inv]
    pillar[pts] = pid
    order = np.argsort(pid, kind="stable")
    sorted_pid = pid[order]
    starts = np.searchsorted(sorted_pid, sorted_pid, side="left")
    within = np.arange(len(order)) - starts
    s = np.empty(len(pts), dtype=np.int64)
    s[order] = within
    slot[pts] = np.where(s < max_pts, s, -1)
    return pillar, slot, len(uniq)


def pillar_slots(ix, iy, nx, ny, max_pts):
    """Assign points (by integer cell) to pillars and slots.

    Pillars are numbered by first appearance; slots follow original point
    order. Returns ``(pillar, slot, n_pillars)``; ``pillar == -1`` marks
    out-of-range points and ``slot == -1`` marks points dropped by truncation.
    """
    ix = np.ascontiguousarray(ix, dtype=np.int64)
    iy = np.ascontiguousarray(iy, dtype=np.int64)
    if HAS_NUMBA:
        return _pillar_slots_numba(ix, iy, int(nx), int(ny), int(max_pts))
    return _pillar_slots_numpy(ix, iy, int(nx), int(ny), int(max_pts))


# ---------------------------------------------------------------- RANSAC

@njit
def _inlier_counts_numba(pts, planes, tol):
    h = planes.shape[0]
    n = pts.shape[0]
    out = np.zeros(h, dtype=np.int64)
    for k in range(h):
        a = planes[k, 0]
        b = planes[k, 1]
        c = planes[k, 2]
        d = planes[k, 3]
        cnt = 0
        for j in range(n):
            r = a * pts[j, 0] + b * pts[j, 1] + c * pts[j, 2] + d
            if abs(r) <= tol:
                cnt += 1
        out[k] = cnt
    return out


def _inlier_counts_numpy(pts, planes, tol, chunk=64):
    out = np.zeros(len(planes), dtype=np.int64)
    for s in range(0, len(planes), chunk):
        p = planes[s:s + chunk]
        r = pts @ p[:, :3].T + p[:, 3]
        out[s:s + chunk] = (np.abs(r) <= tol).sum(axis=0)
    return out


def plane_inlier_counts(points, planes, tol):
    """Inlier count of every plane hypothesis ``(a, b, c, d)``."""
    pts = np.ascontiguousarray(points[:, :3], dtype=np.float64)
    planes = np.ascontiguousarray(planes, dtype=np.float64)
    if HAS_NUMBA:
        return _inlier_counts_numba(pts, planes, float(tol))
    return _inlier_counts_numpy(pts, planes, float(tol))


# ---------------------------------------------------------------- rotated IoU

def _corners(x, y, l, w, yaw):
    c = np.cos(yaw)
    s = np.sin(yaw)
    out = np.empty((4, 2))
    hl = 0.5 * l
    hw = 0.5 * w
    lx = (hl, -hl, -hl, hl)
    ly = (hw, hw, -hw, -hw)
    for i in range(4):
        out[i, 0] = x + c * lx[i] - s * ly[i]
        out[i, 1] = y + s * lx[i] + c * ly[i]
    return out


def _clip(poly, n, a, b):
    # keep the part of poly left of the directed edge a->b
    out = np.empty((n + 4, 2))
    m = 0
    ex = b[0] - a[0]
    ey = b[1] - a[1]
    for i in range(n):
        p = poly[i]
        q = poly[(i + 1) % n]
        sp = ex * (p[1] - a[1]) - ey * (p[0] - a[0])
        sq = ex * (q[1] - a[1]) - ey * (q[0] - a[0])
        if sp >= 0.0:
            out[m, 0] = p[0]
            out[m, 1] = p[1]
            m += 1
        if (sp >= 0.0) != (sq >= 0.0):
            t = sp / (sp - sq)
            out[m, 0] = p[0] + t * (q[0] - p[0])
            out[m, 1] = p[1] + t * (q[1] - p[1])
            m += 1
    return out, m


def _area(poly, n):
    s = 0.0
    for i in range(n):
        j = (i + 1) % n
        s += poly[i, 0] * poly[j, 1] - poly[j, 0] * poly[i, 1]
    return 0.5 * abs(s)


def _iou_pair(ba, bb):
    pa = _corners(ba[0], ba[1], ba[2], ba[3], ba[4])
    pb = _corners(bb[0], bb[1], bb[2], bb[3], bb[4])
    poly = pa
    n = 4
    for e in range(4):
        poly, n = _clip(poly, n, pb[e], pb[(e + 1) % 4])
        if n == 0:
            return 0.0
    inter = _area(poly, n)
    union = ba[2] * ba[3] + bb[2] * bb[3] - inter
    if union <= 0.0:
        return 0.0
    v = inter / union
    return min(max(v, 0.0), 1.0)


def _iou_matrix_py(a, b):
    out = np.zeros((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            ra = 0.5 * np.hypot(a[i, 2], a[i, 3])
            rb = 0.5 * np.hypot(b[j, 2], b[j, 3])
            if dx * dx + dy * dy > (ra + rb) * (ra + rb):
                continue
            out[i, j] = _iou_pair(a[i], b[j])
    return out


if HAS_NUMBA:
    _corners_nb = njit(_corners)
    _clip_nb = njit(_clip)
    _area_nb = njit(_area)

    @njit
    def _iou_pair_nb(ba, bb):
        pa = _corners_nb(ba[0], ba[1], ba[2], ba[3], ba[4])
        pb = _corners_nb(bb[0], bb[1], bb[2], bb[3], bb[4])
        poly = pa
        n = 4
        for e in range(4):
            poly, n = _clip_nb(poly, n, pb[e], pb[(e + 1) % 4])
            if n == 0:
                return 0.0
        inter = _area_nb(poly, n)
        union = ba[2] * ba[3] + bb[2] * bb[3] - inter
        if union <= 0.0:
            return 0.0
        v = inter / union
        return min(max(v, 0.0), 1.0)

    @njit
    def _iou_matrix_nb(a, b):
        out = np.zeros((a.shape[0], b.shape[0]))
        for i in range(a.shape[0]):
            for j in range(b.shape[0]):
                dx = a[i, 0] - b[j, 0]
                dy = a[i, 1] - b[j, 1]
                ra = 0.5 * np.hypot(a[i, 2], a[i, 3])
                rb = 0.5 * np.hypot(b[j, 2], b[j, 3])
                if dx * dx + dy * dy > (ra + rb) * (ra + rb):
                    continue
                out[i, j] = _iou_pair_nb(a[i], b[j])
        return out


def bev_iou_matrix(a, b):
    """Pairwise BEV IoU of rotated rectangles given as rows ``(x, y, l, w, yaw)``."""
    a = np.ascontiguousarray(np.reshape(a, (-1, 5)), dtype=np.float64)
    b = np.ascontiguousarray(np.reshape(b, (-1, 5)), dtype=np.float64)
    if HAS_NUMBA:
        return _iou_matrix_nb(a, b)
    return _iou_matrix_py(a, b)
