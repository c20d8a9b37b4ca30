"""Stage 1: radar-guided iterative BEV fusion and the anchor-based RPN."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import GridSpec, ObjectClass, bev_boxes, normalize_yaw
from .metrics import bev_iou_matrix
from .synth import GROUND_Z, SIZE_PRIOR
from .tensor import Conv2d, Module, Tensor, get_dtype, ops

FUSION_MODES = ("rgiter", "concat", "radar_only", "camera_only")


class OccupancyWeights(Module):
    """Sigmoid of a 3x3 conv to one channel: a soft occupancy map in (0, 1)."""

    def __init__(self, cin: int, rng):
        self.conv = Conv2d(cin, 1, 3, rng, gain=1.0)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.sigmoid(self.conv(x))


class BEVFusion(Module):
    """Fuses camera and radar BEV maps into ``F_B`` at stride 2 of the base map.

    ``rgiter`` weights the camera map by radar occupancy at each scale, carries
    the weighted map down to the next scale, fuses per scale and merges all
    three at the middle scale. The other modes are plain single-scale baselines.
    """

    def __init__(self, channels, c_out: int, rng, mode: str = "rgiter"):
        if mode not in FUSION_MODES:
            raise ValueError(f"fusion mode must be one of {FUSION_MODES}")
        self.mode = mode
        c0, c1, c2 = channels
        self.channels = (c0, c1, c2)
        self.c_out = c_out
        if mode == "rgiter":
            self.occ0 = OccupancyWeights(c0, rng)
            self.occ1 = OccupancyWeights(c1, rng)
            self.occ2 = OccupancyWeights(c2, rng)
            # bias-free so an all-zero camera map stays zero at every scale
            self.cam_down0 = Conv2d(c0, c1, 3, rng, stride=2, bias=False)
            self.cam_down1 = Conv2d(c1, c2, 3, rng, stride=2, bias=False)
            self.fuse0 = Conv2d(2 * c0, c0, 3, rng)
            self.fuse1 = Conv2d(2 * c1, c1, 3, rng)
            self.fuse2 = Conv2d(2 * c2, c2, 3, rng)
            self.merge = Conv2d(c0 + c1 + c2, c_out, 3, rng)
        else:
            cin = 2 * c0 if mode == "concat" else c0
            self.fuse0 = Conv2d(cin, c0, 3, rng)
            self.down = Conv2d(c0, c_out, 3, rng, stride=2)

    def __call__(self, cam_bev: Tensor, radar_bev) -> Tensor:
        return self.forward(cam_bev, radar_bev)[0]

    def forward(self, cam_bev: Tensor, radar_bev):
        """Returns ``(F_B, extras)``; ``extras`` holds occupancy maps and weighted camera maps."""
        rad = list(radar_bev)
        if cam_bev.shape[:2] != rad[0].shape[:2]:
            raise ValueError(f"camera BEV {cam_bev.shape[:2]} != radar BEV {rad[0].shape[:2]}")
        for k in range(2):
            h, w = rad[k].shape[:2]
            if rad[k + 1].shape[:2] != ((h + 1) // 2, (w + 1) // 2):
                raise ValueError("radar BEV scales must halve in size")
        if self.mode != "rgiter":
            if self.mode == "concat":
                x = ops.concat([cam_bev, rad[0]])
            elif self.mode == "radar_only":
                x = rad[0]
            else:
                x = cam_bev
            return ops.relu(self.down(ops.relu(self.fuse0(x)))), {}
        occ = (self.occ0, self.occ1, self.occ2)
        down = (self.cam_down0, self.cam_down1)
        fuse = (self.fuse0, self.fuse1, self.fuse2)
        cam = cam_bev
        weights, weighted, fused = [], [], []
        for k in range(3):
            W = occ[k](rad[k])
            Fp = ops.mul(cam, W)
            weights.append(W)
            weighted.append(Fp)
            fused.append(ops.relu(fuse[k](ops.concat([rad[k], Fp]))))
            if k < 2:
                cam = down[k](Fp)
        mid = ops.concat([ops.resize_bilinear(fused[0], 0.5), fused[1], ops.resize_bilinear(fused[2], 2)])
        return ops.relu(self.merge(mid)), {"weights": weights, "weighted_cam": weighted, "fused": fused}


# ------------------------------------------------------------------ anchors and box coding

ANCHOR_YAWS = (0.0, np.pi / 2)


def make_anchors(grid: GridSpec, classes=tuple(ObjectClass)) -> tuple:
    """Anchors on the cell centres of ``grid``'s BEV.

    Returns ``anchors[ny*nx*A, 7]`` ordered (row, col, anchor) and the class
    of each anchor. Anchor ``a`` has class ``classes[a // 2]`` and yaw
    ``ANCHOR_YAWS[a % 2]``.
    """
    nx, ny, _ = grid.shape
    xs = grid.x_min + (np.arange(nx) + 0.5) * grid.x_size
    ys = grid.y_min + (np.arange(ny) + 0.5) * grid.y_size
    per = []
    cls = []
    for c in classes:
        l, w, h = SIZE_PRIOR[ObjectClass(c)]
        for yaw in ANCHOR_YAWS:
            per.append((l, w, h, GROUND_Z + h / 2, yaw))
            cls.append(int(c))
    per = np.array(per)
    A = len(per)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    out = np.zeros((ny, nx, A, 7))
    out[..., 0] = gx[:, :, None]
    out[..., 1] = gy[:, :, None]
    out[..., 2] = per[:, 3]
    out[..., 3:6] = per[:, :3]
    out[..., 6] = per[:, 4]
    return out.reshape(-1, 7), np.tile(np.array(cls), ny * nx)


def encode_boxes(anchors: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Anchor-relative residuals (dx, dy, dz, dl, dw, dh, dyaw)."""
    a, g = np.asarray(anchors, np.float64), np.asarray(gt, np.float64)
    diag = np.sqrt(a[:, 3] ** 2 + a[:, 4] ** 2)
    return np.stack([
        (g[:, 0] - a[:, 0]) / diag, (g[:, 1] - a[:, 1]) / diag, (g[:, 2] - a[:, 2]) / a[:, 5],
        np.log(g[:, 3] / a[:, 3]), np.log(g[:, 4] / a[:, 4]), np.log(g[:, 5] / a[:, 5]),
        g[:, 6] - a[:, 6],
    ], axis=1)


def decode_boxes(anchors: np.ndarray, deltas: np.ndarray, wrap: bool = False) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; ``wrap`` normalises the yaw to (-pi, pi]."""
    a, d = np.asarray(anchors, np.float64), np.asarray(deltas, np.float64)
    diag = np.sqrt(a[:, 3] ** 2 + a[:, 4] ** 2)
    # residuals are clamped in size space so a wild regression cannot overflow
    sz = a[:, 3:6] * np.exp(np.clip(d[:, 3:6], -10.0, 10.0))
    yaw = a[:, 6] + d[:, 6]
    if wrap:
        yaw = normalize_yaw(yaw)
    return np.concatenate([
        (a[:, 0] + d[:, 0] * diag)[:, None], (a[:, 1] + d[:, 1] * diag)[:, None],
        (a[:, 2] + d[:, 2] * a[:, 5])[:, None], sz, np.reshape(yaw, (-1, 1)),
    ], axis=1)


# ------------------------------------------------------------------ targets and loss

# per class (positive, negative) BEV IoU thresholds
MATCH_THRESHOLDS = {ObjectClass.Car: (0.6, 0.45), ObjectClass.Pedestrian: (0.5, 0.35),
                    ObjectClass.Cyclist: (0.5, 0.35), ObjectClass.Truck: (0.6, 0.45)}


@dataclass
class AnchorTargets:
    labels: np.ndarray  # 1 positive, 0 negative, -1 ignored
    reg: np.ndarray  # [n_pos, 7] residual targets for positive anchors
    pos_index: np.ndarray
    matched_gt: np.ndarray


def assign_targets(anchors: np.ndarray, anchor_cls: np.ndarray, gt: np.ndarray, gt_cls: np.ndarray,
                   thresholds=None) -> AnchorTargets:
    """Class-wise BEV IoU assignment; each GT's best anchor is forced positive."""
    thresholds = thresholds or MATCH_THRESHOLDS
    n = anchors.shape[0]
    labels = np.zeros(n, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 7)
    gt_cls = np.asarray(gt_cls, dtype=np.int64).reshape(-1)
    for c in np.unique(gt_cls):
        pos_t, neg_t = thresholds[ObjectClass(int(c))]
        sel = np.nonzero(anchor_cls == c)[0]
        gsel = np.nonzero(gt_cls == c)[0]
        iou = bev_iou_matrix(anchors[sel], gt[gsel])
        best = iou.max(axis=1)
        arg = iou.argmax(axis=1)
        lab = np.where(best >= pos_t, 1, np.where(best < neg_t, 0, -1))
        forced = iou.argmax(axis=0)
        for j, i in enumerate(forced):
            if iou[i, j] > 0:
                lab[i] = 1
                arg[i] = j
        labels[sel] = lab
        matched[sel] = np.where(lab == 1, gsel[arg], -1)
    pos = np.nonzero(labels == 1)[0]
    reg = encode_boxes(anchors[pos], gt[matched[pos]]) if pos.size else np.zeros((0, 7))
    return AnchorTargets(labels, reg, pos, matched[pos])


def box_regression_loss(pred: Tensor, target: np.ndarray, beta: float = 1.0 / 9.0) -> Tensor:
    """Smooth-L1 summed over rows; the yaw column uses sin(pred - target)."""
    tgt = np.asarray(target, dtype=pred.data.dtype)
    lin = ops.sub(ops.index(pred, (slice(None), slice(0, 6))), tgt[:, :6])
    ang = ops.sin(ops.sub(ops.index(pred, (slice(None), slice(6, 7))), tgt[:, 6:7]))
    return ops.sum(ops.smooth_l1(ops.concat([lin, ang], axis=1), beta))


class RPNHead(Module):
    def __init__(self, cin: int, n_anchors: int, rng, prior: float = 0.01):
        self.shared = Conv2d(cin, cin, 3, rng)
        self.cls = Conv2d(cin, n_anchors, 1, rng, gain=0.1)
        self.reg = Conv2d(cin, 7 * n_anchors, 1, rng, gain=0.1)
        self.cls.bias.data[:] = -np.log((1 - prior) / prior)
        self.A = n_anchors

    def __call__(self, fb: Tensor):
        h = ops.relu(self.shared(fb))
        ny, nx, _ = fb.shape
        cls = ops.reshape(self.cls(h), (ny * nx * self.A,))
        reg = ops.reshape(self.reg(h), (ny * nx * self.A, 7))
        return cls, reg


def rpn_loss(cls_logits: Tensor, reg: Tensor, targets: AnchorTargets, cls_weight: float = 1.0,
             reg_weight: float = 2.0, alpha: float = 0.25, gamma: float = 2.0) -> tuple:
    """Focal classification over non-ignored anchors plus smooth-L1 on positives.

    Both terms are normalised by the number of positives. Returns
    ``(total, cls_part, reg_part)``.
    """
    valid = np.nonzero(targets.labels >= 0)[0]
    npos = max(1, targets.pos_index.size)
    logits = ops.gather_rows(ops.reshape(cls_logits, (-1, 1)), valid)
    tgt = (targets.labels[valid] == 1).astype(get_dtype())[:, None]
    lc = ops.scale(ops.sum(ops.sigmoid_focal_loss(logits, tgt, alpha, gamma)), cls_weight / npos)
    if targets.pos_index.size:
        lr = ops.scale(box_regression_loss(ops.gather_rows(reg, targets.pos_index), targets.reg),
                       reg_weight / npos)
    else:
        lr = ops.scale(ops.sum(ops.index(reg, (slice(0, 1), slice(0, 1)))), 0.0)
    return ops.add(lc, lr), lc, lr


# ------------------------------------------------------------------ proposals

@dataclass
class ProposalSet:
    boxes: np.ndarray  # [P, 7]
    scores: np.ndarray
    classes: np.ndarray
    anchor_index: np.ndarray

    def __len__(self):
        return self.boxes.shape[0]

    def select(self, idx) -> "ProposalSet":
        return ProposalSet(self.boxes[idx], self.scores[idx], self.classes[idx], self.anchor_index[idx])


def nms_bev(boxes: np.ndarray, scores: np.ndarray, thresh: float) -> np.ndarray:
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.asarray(kernels.nms(bev_boxes(boxes), np.ascontiguousarray(scores, dtype=np.float64), thresh))


def generate_proposals(cls_logits: np.ndarray, reg: np.ndarray, anchors: np.ndarray, anchor_cls: np.ndarray,
                       pre_nms: int = 1024, nms_thresh: float = 0.7, keep: int = 100,
                       score_thresh: float = 0.0) -> ProposalSet:
    """Decode, per-class top-N and rotated NMS, then the best ``keep`` overall."""
    z = np.asarray(cls_logits, dtype=np.float64).reshape(-1)
    scores = 0.5 * (1.0 + np.tanh(0.5 * z))
    reg = np.asarray(reg, dtype=np.float64)
    picked = []
    for c in np.unique(anchor_cls):
        idx = np.nonzero((anchor_cls == c) & (scores >= score_thresh))[0]
        if idx.size == 0:
            continue
        top = idx[np.argsort(-scores[idx], kind="stable")[:pre_nms]]
        boxes = decode_boxes(anchors[top], reg[top], wrap=True)
        kept = nms_bev(boxes, scores[top], nms_thresh)
        picked.append((top[kept], boxes[kept]))
    if not picked:
        return ProposalSet(np.zeros((0, 7)), np.zeros(0), np.zeros(0, np.int64), np.zeros(0, np.int64))
    aidx = np.concatenate([p[0] for p in picked])
    boxes = np.concatenate([p[1] for p in picked])
    order = np.argsort(-scores[aidx], kind="stable")[:keep]
    return ProposalSet(boxes[order], scores[aidx][order], anchor_cls[aidx][order], aidx[order])
