# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels mirroring ``_pycore``: rotated-rectangle overlap, greedy
NMS and the Kuhn-Munkres solver."""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, hypot, fabs, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

BACKEND = "cython"


cdef void _corners(double cx, double cy, double dx, double dy, double yaw,
                   double* xs, double* ys) noexcept nogil:
    cdef double c = cos(yaw)
    cdef double s = sin(yaw)
    cdef double hx = 0.5 * dx
    cdef double hy = 0.5 * dy
    cdef double us[4]
    cdef double vs[4]
    us[0] = hx; vs[0] = hy
    us[1] = -hx; vs[1] = hy
    us[2] = -hx; vs[2] = -hy
    us[3] = hx; vs[3] = -hy
    cdef int k
    for k in range(4):
        xs[k] = cx + us[k] * c - vs[k] * s
        ys[k] = cy + us[k] * s + vs[k] * c


cdef int _clip(double* px, double* py, int n, double x0, double y0,
               double x1, double y1, double* ox, double* oy) noexcept nogil:
    cdef double ex = x1 - x0
    cdef double ey = y1 - y0
    cdef int m = 0
    cdef int k
    cdef double prevx, prevy, prev_side, curx, cury, cur_side, t
    if n == 0:
        return 0
    prevx = px[n - 1]
    prevy = py[n - 1]
    prev_side = ex * (prevy - y0) - ey * (prevx - x0)
    for k in range(n):
        curx = px[k]
        cury = py[k]
        cur_side = ex * (cury - y0) - ey * (curx - x0)
        if cur_side >= 0.0:
            if prev_side < 0.0:
                t = prev_side / (prev_side - cur_side)
                ox[m] = prevx + t * (curx - prevx)
                oy[m] = prevy + t * (cury - prevy)
                m += 1
            ox[m] = curx
            oy[m] = cury
            m += 1
        elif prev_side >= 0.0:
            t = prev_side / (prev_side - cur_side)
            ox[m] = prevx + t * (curx - prevx)
            oy[m] = prevy + t * (cury - prevy)
            m += 1
        prevx = curx
        prevy = cury
        prev_side = cur_side
    return m


cdef double _intersection(const double* a, const double* b) noexcept nogil:
    cdef double ra = 0.5 * hypot(a[3], a[4])
    cdef double rb = 0.5 * hypot(b[3], b[4])
    if hypot(a[0] - b[0], a[1] - b[1]) > ra + rb:
        return 0.0
    cdef double px[16]
    cdef double py[16]
    cdef double qx[16]
    cdef double qy[16]
    cdef double cx[4]
    cdef double cy[4]
    cdef int n = 4
    cdef int k, i
    cdef double acc
    _corners(a[0], a[1], a[3], a[4], a[6], px, py)
    _corners(b[0], b[1], b[3], b[4], b[6], cx, cy)
    for k in range(4):
        n = _clip(px, py, n, cx[k], cy[k], cx[(k + 1) % 4], cy[(k + 1) % 4], qx, qy)
        if n == 0:
            return 0.0
        for i in range(n):
            px[i] = qx[i]
            py[i] = qy[i]
    if n < 3:
        return 0.0
    acc = 0.0
    for i in range(n):
        acc += px[i] * py[(i + 1) % n] - px[(i + 1) % n] * py[i]
    return 0.5 * fabs(acc)


cdef double _iou(const double* a, const double* b) noexcept nogil:
    cdef double inter = _intersection(a, b)
    cdef double r
    if inter <= 0.0:
        return 0.0
    r = inter / (a[3] * a[4] + b[3] * b[4] - inter)
    if r > 1.0:
        return 1.0
    if r < 0.0:
        return 0.0
    return r


def bev_intersection(a, b):
    cdef double[::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    return _intersection(&av[0], &bv[0])


def bev_iou_pair(a, b):
    cdef double[::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    return _iou(&av[0], &bv[0])


def bev_iou_matrix(boxes_a, boxes_b):
    cdef double[:, ::1] a = np.ascontiguousarray(np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7))
    cdef double[:, ::1] b = np.ascontiguousarray(np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7))
    cdef Py_ssize_t n = a.shape[0]
    cdef Py_ssize_t m = b.shape[0]
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(n):
            for j in range(m):
                out[i, j] = _iou(&a[i, 0], &b[j, 0])
    return out_arr


def nms_sorted(boxes, double thresh):
    cdef double[:, ::1] bx = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 7))
    cdef Py_ssize_t n = bx.shape[0]
    supp_arr = np.zeros(n, dtype=np.uint8)
    keep_arr = np.zeros(n, dtype=np.int64)
    cdef unsigned char[::1] supp = supp_arr
    cdef long long[::1] keep = keep_arr
    cdef Py_ssize_t i, j, nk = 0
    with nogil:
        for i in range(n):
            if supp[i]:
                continue
            keep[nk] = i
            nk += 1
            for j in range(i + 1, n):
                if not supp[j] and _iou(&bx[i, 0], &bx[j, 0]) >= thresh:
                    supp[j] = 1
    return keep_arr[:nk].copy()


cdef void _solve_potentials(double[:, ::1] a, Py_ssize_t n, long long[::1] col_of,
                            double[::1] u, double[::1] v) noexcept nogil:
    # u, v have length n + 1; index 0 is the virtual row/column
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur
    cdef long long* p
    cdef long long* way
    cdef double* minv
    cdef unsigned char* used
    p = <long long*> malloc((n + 1) * sizeof(long long))
    way = <long long*> malloc((n + 1) * sizeof(long long))
    minv = <double*> malloc((n + 1) * sizeof(double))
    used = <unsigned char*> malloc((n + 1) * sizeof(unsigned char))
    for j in range(n + 1):
        p[j] = 0
        way[j] = 0
        u[j] = 0.0
        v[j] = 0.0
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(n + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INFINITY
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = a[i0 - 1, j - 1] - u[i0] - v[j]
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
    for j in range(1, n + 1):
        col_of[p[j] - 1] = j - 1
    free(p)
    free(way)
    free(minv)
    free(used)


cdef int _find_cycle(Py_ssize_t r, Py_ssize_t target, unsigned char[:, ::1] tight,
                     long long[::1] row_of, unsigned char[::1] fixed,
                     unsigned char[::1] seen, long long[::1] path_r,
                     long long[::1] path_c, int depth, Py_ssize_t n) noexcept nogil:
    # returns path length (>0) on success, 0 on failure
    cdef Py_ssize_t c, nr
    cdef int got
    for c in range(n):
        if not tight[r, c] or seen[c]:
            continue
        seen[c] = 1
        path_r[depth] = r
        path_c[depth] = c
        if c == target:
            return depth + 1
        nr = row_of[c]
        if nr < 0 or fixed[nr]:
            continue
        got = _find_cycle(nr, target, tight, row_of, fixed, seen, path_r, path_c, depth + 1, n)
        if got > 0:
            return got
    return 0


def hungarian(cost):
    c_arr = np.array(cost, dtype=np.float64, copy=True)
    if c_arr.ndim != 2 or c_arr.shape[0] != c_arr.shape[1]:
        raise ValueError("cost matrix must be square")
    cdef Py_ssize_t n = c_arr.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    c_arr -= c_arr.min(axis=1, keepdims=True)
    c_arr -= c_arr.min(axis=0, keepdims=True)
    c_arr = np.ascontiguousarray(c_arr)
    cdef double[:, ::1] a = c_arr
    col_arr = np.zeros(n, dtype=np.int64)
    u_arr = np.zeros(n + 1)
    v_arr = np.zeros(n + 1)
    cdef long long[::1] col_of = col_arr
    cdef double[::1] u = u_arr
    cdef double[::1] v = v_arr
    _solve_potentials(a, n, col_of, u, v)

    cdef double tol = 1e-10 * max(1.0, float(np.abs(c_arr).max()))
    tight_arr = np.zeros((n, n), dtype=np.uint8)
    cdef unsigned char[:, ::1] tight = tight_arr
    row_arr = np.zeros(n, dtype=np.int64)
    fixed_arr = np.zeros(n, dtype=np.uint8)
    seen_arr = np.zeros(n, dtype=np.uint8)
    pr_arr = np.zeros(n + 1, dtype=np.int64)
    pc_arr = np.zeros(n + 1, dtype=np.int64)
    cdef long long[::1] row_of = row_arr
    cdef unsigned char[::1] fixed = fixed_arr
    cdef unsigned char[::1] seen = seen_arr
    cdef long long[::1] path_r = pr_arr
    cdef long long[::1] path_c = pc_arr
    cdef Py_ssize_t i, j, r, k, target
    cdef int plen
    with nogil:
        for i in range(n):
            for j in range(n):
                if a[i, j] - u[i + 1] - v[j + 1] <= tol:
                    tight[i, j] = 1
        for i in range(n):
            row_of[col_of[i]] = i
        for i in range(n):
            for j in range(n):
                if not tight[i, j]:
                    continue
                if j == col_of[i]:
                    break
                r = row_of[j]
                if fixed[r]:
                    continue
                target = col_of[i]
                fixed[i] = 1
                for k in range(n):
                    seen[k] = 0
                seen[j] = 1
                plen = _find_cycle(r, target, tight, row_of, fixed, seen, path_r, path_c, 0, n)
                fixed[i] = 0
                if plen == 0:
                    continue
                col_of[i] = j
                row_of[j] = i
                for k in range(plen):
                    col_of[path_r[k]] = path_c[k]
                    row_of[path_c[k]] = path_r[k]
                break
            fixed[i] = 1
    return col_arr
