"""Pure-numpy kernels. Reference path, and the fallback when numba is off."""
import numpy as np

# vertex slots per clipped polygon; 8 is the convex bound, extra room for
# duplicate vertices produced by touching edges
_CAP = 16


def bilinear_gather(fmap, coords):
    H, W, C = fmap.shape
    P = coords.shape[0]
    out = np.zeros((P, C), dtype=fmap.dtype)
    if P == 0:
        return out
    u = coords[:, 0]
    v = coords[:, 1]
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    wx = (u - x0).astype(fmap.dtype)
    wy = (v - y0).astype(fmap.dtype)
    for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        xi = x0 + dx
        yi = y0 + dy
        ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        if not ok.any():
            continue
        w = (wx if dx else 1 - wx) * (wy if dy else 1 - wy)
        out[ok] += w[ok, None] * fmap[yi[ok], xi[ok]]
    return out


def bilinear_gather_grad(fmap, coords, gout):
    H, W, C = fmap.shape
    gmap = np.zeros_like(fmap)
    gcoords = np.zeros(coords.shape, dtype=fmap.dtype)
    if coords.shape[0] == 0:
        return gmap, gcoords
    u = coords[:, 0]
    v = coords[:, 1]
    x0 = np.floor(u).astype(np.int64)
    y0 = np.floor(v).astype(np.int64)
    wx = (u - x0).astype(fmap.dtype)
    wy = (v - y0).astype(fmap.dtype)
    flat = gmap.reshape(H * W, C)
    for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        xi = x0 + dx
        yi = y0 + dy
        ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
        if not ok.any():
            continue
        ax = wx if dx else 1 - wx
        ay = wy if dy else 1 - wy
        sx = 1.0 if dx else -1.0
        sy = 1.0 if dy else -1.0
        idx = yi[ok] * W + xi[ok]
        contrib = (ax * ay)[ok, None] * gout[ok]
        # bincount per channel is much faster than np.add.at
        for c in range(C):
            flat[:, c] += np.bincount(idx, weights=contrib[:, c], minlength=H * W)
        vals = fmap[yi[ok], xi[ok]]
        dot = np.einsum("pc,pc->p", vals, gout[ok])
        gcoords[ok, 0] += sx * ay[ok] * dot
        gcoords[ok, 1] += sy * ax[ok] * dot
    return gmap, gcoords


def scatter_add(src, index, n):
    out = np.zeros((n, src.shape[1]), dtype=src.dtype)
    if src.shape[0]:
        np.add.at(out, index, src)
    return out


def segment_max(src, seg, n):
    """Max over rows sharing a segment id. Empty segments give 0, argmax -1."""
    N, C = src.shape
    out = np.zeros((n, C), dtype=src.dtype)
    arg = np.full((n, C), -1, dtype=np.int64)
    if N == 0:
        return out, arg
    best = np.full((n, C), -np.inf, dtype=src.dtype)
    np.maximum.at(best, seg, src)
    hit = src == best[seg]
    rows = np.broadcast_to(np.arange(N)[:, None], (N, C))
    # first row (lowest index) attaining the max wins, matching the loop kernel
    cand = np.where(hit, rows, N)
    first = np.full((n, C), N, dtype=np.int64)
    np.minimum.at(first, seg, cand)
    filled = first < N
    arg[filled] = first[filled]
    out[filled] = best[filled]
    return out, arg


def _box_corners(b):
    # b: [N, 5] (x, y, l, w, yaw) -> [N, 4, 2], counter-clockwise
    x, y, l, w, yaw = (b[:, i] for i in range(5))
    lx = np.stack([l, -l, -l, l], axis=1) * 0.5
    ly = np.stack([w, w, -w, -w], axis=1) * 0.5
    c = np.cos(yaw)[:, None]
    s = np.sin(yaw)[:, None]
    return np.stack([x[:, None] + c * lx - s * ly, y[:, None] + s * lx + c * ly], axis=2)


def _clip_batch(poly, valid, e0, e1):
    """Sutherland-Hodgman step over a batch of polygons against one edge each."""
    P, n, _ = poly.shape
    ex = (e1 - e0)[:, None, :]

    def side(p):
        d = p - e0[:, None, :]
        return ex[..., 0] * d[..., 1] - ex[..., 1] * d[..., 0]

    # compact valid vertices to the front so "next" is well defined
    order = np.argsort(~valid, axis=1, kind="stable")
    poly = np.take_along_axis(poly, order[..., None], axis=1)
    valid = np.take_along_axis(valid, order, axis=1)
    cnt = valid.sum(axis=1)
    nxt_idx = (np.arange(n)[None, :] + 1) % np.maximum(cnt, 1)[:, None]
    nxt = np.take_along_axis(poly, nxt_idx[..., None], axis=1)
    sc = side(poly)
    sn = side(nxt)
    cin = sc >= 0
    nin = sn >= 0
    denom = sc - sn
    denom = np.where(denom == 0, 1.0, denom)
    t = (sc / denom)[..., None]
    inter = poly + t * (nxt - poly)
    emit_i = valid & (cin != nin)
    emit_n = valid & nin
    pts = np.stack([inter, nxt], axis=2).reshape(P, 2 * n, 2)
    msk = np.stack([emit_i, emit_n], axis=2).reshape(P, 2 * n)
    order = np.argsort(~msk, axis=1, kind="stable")[:, :_CAP]
    return (np.take_along_axis(pts, order[..., None], axis=1),
            np.take_along_axis(msk, order, axis=1))


def bev_intersection_matrix(a, b):
    N, M = a.shape[0], b.shape[0]
    out = np.zeros((N, M), dtype=np.float64)
    if N == 0 or M == 0:
        return out
    ca = _box_corners(a.astype(np.float64))
    cb = _box_corners(b.astype(np.float64))
    ia, ib = np.meshgrid(np.arange(N), np.arange(M), indexing="ij")
    ia = ia.ravel()
    ib = ib.ravel()
    poly = np.zeros((ia.size, _CAP, 2))
    poly[:, :4] = ca[ia]
    valid = np.zeros((ia.size, _CAP), dtype=bool)
    valid[:, :4] = True
    clip = cb[ib]
    for e in range(4):
        poly, valid = _clip_batch(poly, valid, clip[:, e], clip[:, (e + 1) % 4])
    cnt = valid.sum(axis=1)
    nxt_idx = (np.arange(_CAP)[None, :] + 1) % np.maximum(cnt, 1)[:, None]
    nxt = np.take_along_axis(poly, nxt_idx[..., None], axis=1)
    cross = poly[..., 0] * nxt[..., 1] - poly[..., 1] * nxt[..., 0]
    area = 0.5 * np.where(valid, cross, 0.0).sum(axis=1)
    area = np.where(cnt >= 3, np.abs(area), 0.0)
    out[ia, ib] = area
    return out


def nms(boxes, scores, thresh):
    order = np.argsort(-scores, kind="stable")
    if order.size == 0:
        return order
    b = boxes[order]
    inter = bev_intersection_matrix(b, b)
    area = b[:, 2] * b[:, 3]
    union = area[:, None] + area[None, :] - inter
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    keep = []
    alive = np.ones(order.size, dtype=bool)
    for i in range(order.size):
        if not alive[i]:
            continue
        keep.append(order[i])
        alive &= ~(iou[i] >= thresh)
        alive[i] = False
    return np.asarray(keep, dtype=np.int64)


def kde(points, seg_start, h):
    """Gaussian kernel density per point; points grouped into contiguous segments.

    ``h[s]`` is the bandwidth of segment ``s``.
    """
    dens = np.zeros(points.shape[0], dtype=np.float64)
    for s in range(seg_start.size - 1):
        inv = 1.0 / (2.0 * h[s] * h[s])
        a, b = seg_start[s], seg_start[s + 1]
        if b <= a:
            continue
        p = points[a:b].astype(np.float64)
        d2 = ((p[:, None, :] - p[None, :, :]) ** 2).sum(-1)
        dens[a:b] = np.exp(-d2 * inv).sum(1) / (b - a)
    return dens


def points_in_boxes(points, boxes):
    """[B, N] membership mask; a point on the face counts as inside."""
    if boxes.shape[0] == 0 or points.shape[0] == 0:
        return np.zeros((boxes.shape[0], points.shape[0]), dtype=bool)
    d = points[None, :, :3] - boxes[:, None, :3]
    c = np.cos(boxes[:, 6])[:, None]
    s = np.sin(boxes[:, 6])[:, None]
    lx = c * d[..., 0] + s * d[..., 1]
    ly = -s * d[..., 0] + c * d[..., 1]
    return ((np.abs(lx) <= boxes[:, None, 3] * 0.5)
            & (np.abs(ly) <= boxes[:, None, 4] * 0.5)
            & (np.abs(d[..., 2]) <= boxes[:, None, 5] * 0.5))
