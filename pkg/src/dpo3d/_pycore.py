"""Pure-Python kernels. Used when the compiled ``_core`` extension is absent.

Every function here has a twin in ``_core.pyx`` with the same signature and
the same arithmetic, so both backends agree to floating-point round-off.
Boxes are rows ``(cx, cy, cz, dx, dy, dz, yaw)``.
"""
import math

import numpy as np

BACKEND = "python"


def _corners(cx, cy, dx, dy, yaw):
    # counter-clockwise footprint corners
    c = math.cos(yaw)
    s = math.sin(yaw)
    hx = 0.5 * dx
    hy = 0.5 * dy
    out = []
    for u, v in ((hx, hy), (-hx, hy), (-hx, -hy), (hx, -hy)):
        out.append((cx + u * c - v * s, cy + u * s + v * c))
    return out


def _clip(poly, p0, p1):
    """Keep the part of ``poly`` on the left of the directed edge p0->p1."""
    ex = p1[0] - p0[0]
    ey = p1[1] - p0[1]
    out = []
    n = len(poly)
    if n == 0:
        return out
    prev = poly[-1]
    prev_side = ex * (prev[1] - p0[1]) - ey * (prev[0] - p0[0])
    for k in range(n):
        cur = poly[k]
        cur_side = ex * (cur[1] - p0[1]) - ey * (cur[0] - p0[0])
        if cur_side >= 0.0:
            if prev_side < 0.0:
                t = prev_side / (prev_side - cur_side)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            out.append(cur)
        elif prev_side >= 0.0:
            t = prev_side / (prev_side - cur_side)
            out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
        prev = cur
        prev_side = cur_side
    return out


def _shoelace(poly):
    n = len(poly)
    if n < 3:
        return 0.0
    acc = 0.0
    for k in range(n):
        x0, y0 = poly[k]
        x1, y1 = poly[(k + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * abs(acc)


def bev_intersection(a, b):
    """Area shared by the rotated footprints of two boxes."""
    ra = 0.5 * math.hypot(a[3], a[4])
    rb = 0.5 * math.hypot(b[3], b[4])
    if math.hypot(a[0] - b[0], a[1] - b[1]) > ra + rb:
        return 0.0
    poly = _corners(a[0], a[1], a[3], a[4], a[6])
    clipper = _corners(b[0], b[1], b[3], b[4], b[6])
    for k in range(4):
        poly = _clip(poly, clipper[k], clipper[(k + 1) % 4])
        if not poly:
            return 0.0
    return _shoelace(poly)


def bev_iou_pair(a, b):
    inter = bev_intersection(a, b)
    if inter <= 0.0:
        return 0.0
    union = a[3] * a[4] + b[3] * b[4] - inter
    return min(1.0, max(0.0, inter / union))


def bev_iou_matrix(boxes_a, boxes_b):
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((a.shape[0], b.shape[0]))
    al = a.tolist()
    bl = b.tolist()
    for i, ra in enumerate(al):
        for j, rb in enumerate(bl):
            out[i, j] = bev_iou_pair(ra, rb)
    return out


def nms_sorted(boxes, thresh):
    """Greedy suppression over boxes already in priority order.

    Returns kept row indices; every kept pair has BEV IoU below ``thresh``.
    """
    rows = np.asarray(boxes, dtype=np.float64).reshape(-1, 7).tolist()
    n = len(rows)
    suppressed = [False] * n
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        bi = rows[i]
        for j in range(i + 1, n):
            if not suppressed[j] and bev_iou_pair(bi, rows[j]) >= thresh:
                suppressed[j] = True
    return np.asarray(keep, dtype=np.int64)


def _solve_potentials(a, n):
    # shortest augmenting path Kuhn-Munkres, 1-based internal arrays
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = a[i0 - 1]
            delta = inf
            j1 = 0
            ui0 = u[i0]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of = [0] * n
    for j in range(1, n + 1):
        col_of[p[j] - 1] = j - 1
    return col_of, u[1:], v[1:]


def _find_cycle(r, target, tight, row_of, fixed, seen, col_of):
    # alternating path from row r to the freed column ``target``
    for c in tight[r]:
        if seen[c]:
            continue
        seen[c] = True
        if c == target:
            return [(r, c)]
        nr = row_of[c]
        if nr < 0 or fixed[nr]:
            continue
        path = _find_cycle(nr, target, tight, row_of, fixed, seen, col_of)
        if path is not None:
            return [(r, c)] + path
    return None


def hungarian(cost):
    """Minimum-cost perfect assignment; lexicographically smallest among optima.

    Returns ``perm`` with ``perm[i]`` the column assigned to row ``i``.
    """
    c = np.array(cost, dtype=np.float64, copy=True)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError("cost matrix must be square")
    n = c.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    # row/column reduction keeps sentinel-padded blocks at exact zero
    c -= c.min(axis=1, keepdims=True)
    c -= c.min(axis=0, keepdims=True)
    a = c.tolist()
    col_of, u, v = _solve_potentials(a, n)

    tol = 1e-10 * max(1.0, float(np.abs(c).max()))
    tight = [[j for j in range(n) if a[i][j] - u[i] - v[j] <= tol] for i in range(n)]
    row_of = [0] * n
    for i, j in enumerate(col_of):
        row_of[j] = i
    fixed = [False] * n
    for i in range(n):
        for j in tight[i]:
            if j == col_of[i]:
                break
            r = row_of[j]
            if fixed[r]:
                continue
            target = col_of[i]
            fixed[i] = True
            seen = [False] * n
            seen[j] = True
            path = _find_cycle(r, target, tight, row_of, fixed, seen, col_of)
            fixed[i] = False
            if path is None:
                continue
            col_of[i] = j
            row_of[j] = i
            for pr, pc in path:
                col_of[pr] = pc
                row_of[pc] = pr
            break
        fixed[i] = True
    return np.asarray(col_of, dtype=np.int64)
