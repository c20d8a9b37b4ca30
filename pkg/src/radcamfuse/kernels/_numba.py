"""numba twins of the numpy kernels; same signatures, same results."""
import numpy as np
from numba import njit, prange

_opts = {"cache": True, "fastmath": False, "error_model": "numpy"}


@njit(**_opts)
def bilinear_gather(fmap, coords):
    H, W, C = fmap.shape
    P = coords.shape[0]
    out = np.zeros((P, C), dtype=fmap.dtype)
    for p in range(P):
        u = coords[p, 0]
        v = coords[p, 1]
        fx = np.floor(u)
        fy = np.floor(v)
        x0 = int(fx)
        y0 = int(fy)
        wx = u - fx
        wy = v - fy
        for dy in range(2):
            yi = y0 + dy
            if yi < 0 or yi >= H:
                continue
            ay = wy if dy else 1.0 - wy
            for dx in range(2):
                xi = x0 + dx
                if xi < 0 or xi >= W:
                    continue
                w = ay * (wx if dx else 1.0 - wx)
                for c in range(C):
                    out[p, c] += w * fmap[yi, xi, c]
    return out


@njit(**_opts)
def bilinear_gather_grad(fmap, coords, gout):
    H, W, C = fmap.shape
    P = coords.shape[0]
    gmap = np.zeros_like(fmap)
    gcoords = np.zeros((P, 2), dtype=fmap.dtype)
    for p in range(P):
        u = coords[p, 0]
        v = coords[p, 1]
        fx = np.floor(u)
        fy = np.floor(v)
        x0 = int(fx)
        y0 = int(fy)
        wx = u - fx
        wy = v - fy
        gu = 0.0
        gv = 0.0
        for dy in range(2):
            yi = y0 + dy
            if yi < 0 or yi >= H:
                continue
            ay = wy if dy else 1.0 - wy
            sy = 1.0 if dy else -1.0
            for dx in range(2):
                xi = x0 + dx
                if xi < 0 or xi >= W:
                    continue
                ax = wx if dx else 1.0 - wx
                sx = 1.0 if dx else -1.0
                w = ax * ay
                dot = 0.0
                for c in range(C):
                    g = gout[p, c]
                    gmap[yi, xi, c] += w * g
                    dot += fmap[yi, xi, c] * g
                gu += sx * ay * dot
                gv += sy * ax * dot
        gcoords[p, 0] = gu
        gcoords[p, 1] = gv
    return gmap, gcoords


@njit(**_opts)
def scatter_add(src, index, n):
    N, C = src.shape
    out = np.zeros((n, C), dtype=src.dtype)
    for i in range(N):
        r = index[i]
        for c in range(C):
            out[r, c] += src[i, c]
    return out


@njit(**_opts)
def segment_max(src, seg, n):
    N, C = src.shape
    out = np.zeros((n, C), dtype=src.dtype)
    arg = np.full((n, C), -1, dtype=np.int64)
    for i in range(N):
        s = seg[i]
        for c in range(C):
            if arg[s, c] < 0 or src[i, c] > out[s, c]:
                out[s, c] = src[i, c]
                arg[s, c] = i
    return out, arg


@njit(**_opts)
def _corners(b, out):
    c = np.cos(b[4])
    s = np.sin(b[4])
    hl = 0.5 * b[2]
    hw = 0.5 * b[3]
    lx = (hl, -hl, -hl, hl)
    ly = (hw, hw, -hw, -hw)
    for i in range(4):
        out[i, 0] = b[0] + c * lx[i] - s * ly[i]
        out[i, 1] = b[1] + s * lx[i] + c * ly[i]


@njit(**_opts)
def _intersection_area(pa, pb, buf_a, buf_b):
    n = 4
    for i in range(4):
        buf_a[i, 0] = pa[i, 0]
        buf_a[i, 1] = pa[i, 1]
    for e in range(4):
        ex0 = pb[e, 0]
        ey0 = pb[e, 1]
        ex = pb[(e + 1) % 4, 0] - ex0
        ey = pb[(e + 1) % 4, 1] - ey0
        m = 0
        for i in range(n):
            j = (i + 1) % n
            cx = buf_a[i, 0]
            cy = buf_a[i, 1]
            nx = buf_a[j, 0]
            ny = buf_a[j, 1]
            sc = ex * (cy - ey0) - ey * (cx - ex0)
            sn = ex * (ny - ey0) - ey * (nx - ex0)
            cin = sc >= 0
            nin = sn >= 0
            if cin != nin and m < buf_b.shape[0]:
                t = sc / (sc - sn)
                buf_b[m, 0] = cx + t * (nx - cx)
                buf_b[m, 1] = cy + t * (ny - cy)
                m += 1
            if nin and m < buf_b.shape[0]:
                buf_b[m, 0] = nx
                buf_b[m, 1] = ny
                m += 1
        n = m
        for i in range(n):
            buf_a[i, 0] = buf_b[i, 0]
            buf_a[i, 1] = buf_b[i, 1]
        if n < 3:
            return 0.0
    area = 0.0
    for i in range(n):
        j = (i + 1) % n
        area += buf_a[i, 0] * buf_a[j, 1] - buf_a[i, 1] * buf_a[j, 0]
    return abs(0.5 * area)


@njit(**_opts)
def bev_intersection_matrix(a, b):
    N = a.shape[0]
    M = b.shape[0]
    out = np.zeros((N, M), dtype=np.float64)
    ca = np.empty((N, 4, 2))
    cb = np.empty((M, 4, 2))
    ra = np.empty(N)
    rb = np.empty(M)
    for i in range(N):
        _corners(a[i].astype(np.float64), ca[i])
        ra[i] = 0.5 * np.sqrt(a[i, 2] ** 2 + a[i, 3] ** 2)
    for j in range(M):
        _corners(b[j].astype(np.float64), cb[j])
        rb[j] = 0.5 * np.sqrt(b[j, 2] ** 2 + b[j, 3] ** 2)
    buf_a = np.empty((16, 2))
    buf_b = np.empty((16, 2))
    for i in range(N):
        for j in range(M):
            dx = a[i, 0] - b[j, 0]
            dy = a[i, 1] - b[j, 1]
            # circumscribed circles disjoint -> no overlap
            if dx * dx + dy * dy > (ra[i] + rb[j]) ** 2:
                continue
            out[i, j] = _intersection_area(ca[i], cb[j], buf_a, buf_b)
    return out


@njit(**_opts)
def nms(boxes, scores, thresh):
    order = np.argsort(-scores, kind="mergesort")
    n = order.size
    keep = np.empty(n, dtype=np.int64)
    alive = np.ones(n, dtype=np.bool_)
    corners = np.empty((n, 4, 2))
    rad = np.empty(n)
    area = np.empty(n)
    for k in range(n):
        b = boxes[order[k]].astype(np.float64)
        _corners(b, corners[k])
        rad[k] = 0.5 * np.sqrt(b[2] ** 2 + b[3] ** 2)
        area[k] = b[2] * b[3]
    buf_a = np.empty((16, 2))
    buf_b = np.empty((16, 2))
    nk = 0
    for i in range(n):
        if not alive[i]:
            continue
        keep[nk] = order[i]
        nk += 1
        bi = boxes[order[i]]
        for j in range(i + 1, n):
            if not alive[j]:
                continue
            bj = boxes[order[j]]
            dx = bi[0] - bj[0]
            dy = bi[1] - bj[1]
            if dx * dx + dy * dy > (rad[i] + rad[j]) ** 2:
                iou = 0.0
            else:
                inter = _intersection_area(corners[i], corners[j], buf_a, buf_b)
                union = area[i] + area[j] - inter
                iou = inter / union if union > 0 else 0.0
            if iou >= thresh:
                alive[j] = False
    return keep[:nk]


@njit(**_opts)
def kde(points, seg_start, h):
    N = points.shape[0]
    dens = np.zeros(N, dtype=np.float64)
    for s in range(seg_start.size - 1):
        inv = 1.0 / (2.0 * h[s] * h[s])
        a = seg_start[s]
        b = seg_start[s + 1]
        for i in range(a, b):
            acc = 0.0
            for j in range(a, b):
                d2 = 0.0
                for k in range(3):
                    t = points[i, k] - points[j, k]
                    d2 += t * t
                acc += np.exp(-d2 * inv)
            dens[i] = acc / (b - a)
    return dens


@njit(**_opts)
def points_in_boxes(points, boxes):
    B = boxes.shape[0]
    N = points.shape[0]
    out = np.zeros((B, N), dtype=np.bool_)
    for b in prange(B):
        c = np.cos(boxes[b, 6])
        s = np.sin(boxes[b, 6])
        hl = 0.5 * boxes[b, 3]
        hw = 0.5 * boxes[b, 4]
        hh = 0.5 * boxes[b, 5]
        for i in range(N):
            dx = points[i, 0] - boxes[b, 0]
            dy = points[i, 1] - boxes[b, 1]
            dz = points[i, 2] - boxes[b, 2]
            if abs(dz) > hh:
                continue
            lx = c * dx + s * dy
            ly = -s * dx + c * dy
            out[b, i] = abs(lx) <= hl and abs(ly) <= hw
    return out
