"""Stage 2: proposal refinement from point-guided and grid-guided branches.

All proposals of a frame are processed together. Token tensors are laid out
``[P * U**3, C]`` (proposal-major, lattice x-major then y then z), and
reshaped to ``[P, U**3, C]`` where attention needs the token axis.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .cmda import CMDA, FuseMLP, fv_reference
from .geometry import Calibration, GridSpec, box_grid_cell_index, box_grid_centers, project_points
from .metrics import iou3d_matrix
from .rgiter import box_regression_loss, encode_boxes
from .tensor import MLP, LayerNorm, Linear, Module, Tensor, get_dtype, ops

GPE_EPS = 1.0


@dataclass
class StageInputs:
    """Everything stage 2 reads from a frame and from stage 1."""

    points: np.ndarray  # [N, 5]
    voxel_feats: Tensor  # [V, Cv]
    point_voxel: np.ndarray  # [N] row into voxel_feats, -1 if dropped
    cam_fv: Tensor
    fb: Tensor
    calib: Calibration
    fb_grid: GridSpec  # BEV grid matching fb's resolution
    fv_stride: int = 4


def kde_density(points: np.ndarray, h: float) -> np.ndarray:
    """(1/N) sum_j exp(-|p_i - p_j|^2 / (2 h^2)) for one group of points."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64)[:, :3])
    return kernels.kde(pts, np.array([0, pts.shape[0]], dtype=np.int64), np.array([h], dtype=np.float64))


def ball_radius(boxes: np.ndarray, U: int) -> np.ndarray:
    return np.asarray(boxes).reshape(-1, 7)[:, 3:6].max(axis=1) / U


def in_box_pairs(points: np.ndarray, boxes: np.ndarray, point_voxel: np.ndarray):
    """(proposal id, point id) for every point inside a proposal, sorted by proposal."""
    if points.shape[0] == 0 or boxes.shape[0] == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    mask = kernels.points_in_boxes(np.ascontiguousarray(points[:, :3], dtype=np.float64),
                                   np.ascontiguousarray(boxes, dtype=np.float64))
    mask &= (point_voxel >= 0)[None, :]
    pid, nid = np.nonzero(mask)
    return pid.astype(np.int64), nid.astype(np.int64)


def grid_point_counts(points: np.ndarray, boxes: np.ndarray, U: int) -> np.ndarray:
    """``[P, U**3]`` number of in-box points falling into each lattice cell."""
    G = U ** 3
    out = np.zeros((boxes.shape[0], G), dtype=np.int64)
    for p, b in enumerate(np.asarray(boxes).reshape(-1, 7)):
        cell = box_grid_cell_index(points[:, :3], b, U) if points.shape[0] else np.zeros(0, np.int64)
        out[p] = np.bincount(cell[cell >= 0], minlength=G)
    return out


class PointGuidedFusion(Module):
    """In-box radar points query the camera FV, then pool onto the proposal lattice."""

    def __init__(self, c_voxel: int, c_img: int, c_b: int, rng, U: int = 6, heads: int = 4, points: int = 4,
                 use_kde: bool = True):
        self.U = U
        self.c_b = c_b
        self.use_kde = use_kde
        self.cmda = CMDA(c_voxel, c_img, rng, heads, points)
        self.fuse = FuseMLP(c_voxel, c_voxel, rng)
        self.point_fc = Linear(c_voxel + 1 + 3, c_b, rng)

    def __call__(self, boxes: np.ndarray, x: StageInputs) -> Tensor:
        P, G = boxes.shape[0], self.U ** 3
        pid, nid = in_box_pairs(x.points, boxes, x.point_voxel)
        E = pid.size
        if E == 0:
            return Tensor(np.zeros((P * G, self.c_b), dtype=x.fb.data.dtype))
        pts = x.points[nid, :3]
        f_p = ops.gather_rows(x.voxel_feats, x.point_voxel[nid])
        uv, ok = project_points(pts, x.calib)
        ref = np.where(ok[:, None], fv_reference(uv, x.fv_stride), -1e3)
        f_star = self.cmda(f_p, ref, x.cam_fv, ok)
        f_ps = self.fuse(f_p, f_star)
        r_ball = ball_radius(boxes, self.U)
        if self.use_kde:
            starts = np.searchsorted(pid, np.arange(P + 1)).astype(np.int64)
            dens = kernels.kde(np.ascontiguousarray(pts), starts, 0.5 * r_ball)
        else:
            dens = np.zeros(E)
        b = boxes[pid]
        d = pts - b[:, :3]
        c, s = np.cos(b[:, 6]), np.sin(b[:, 6])
        local = np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1) / b[:, 3:6]
        extra = Tensor(np.concatenate([dens[:, None], local], axis=1).astype(f_ps.data.dtype))
        feat = ops.relu(self.point_fc(ops.concat([f_ps, extra], axis=1)))
        # ball query of each lattice centre over its proposal's in-box points
        centres = np.stack([box_grid_centers(bx, self.U) for bx in boxes])  # [P, G, 3]
        d2 = ((centres[pid] - pts[:, None, :]) ** 2).sum(-1)  # [E, G]
        e_idx, g_idx = np.nonzero(d2 <= (r_ball[pid] ** 2)[:, None])
        members = ops.gather_rows(feat, e_idx)
        return ops.segment_max(members, pid[e_idx] * G + g_idx, P * G)


class GridPositionEncoder(Module):
    """MLP over (offset from box centre, normalised box centre, log(count + eps))."""

    def __init__(self, c_b: int, rng, U: int = 6):
        self.U = U
        self.mlp = MLP(7, c_b, c_b, rng)

    @staticmethod
    def inputs(boxes: np.ndarray, points: np.ndarray, U: int, grid: GridSpec) -> np.ndarray:
        P, G = boxes.shape[0], U ** 3
        centres = np.stack([box_grid_centers(b, U) for b in boxes]) if P else np.zeros((0, G, 3))
        delta = centres - boxes[:, None, :3]
        cb = np.broadcast_to(((boxes[:, :3] - grid.mins) / (grid.maxs - grid.mins))[:, None, :], (P, G, 3))
        cnt = np.log(grid_point_counts(points, boxes, U) + GPE_EPS)[..., None]
        return np.concatenate([delta, cb, cnt], axis=-1).reshape(P * G, 7)

    def __call__(self, enc: np.ndarray) -> Tensor:
        return self.mlp(Tensor(enc.astype(get_dtype())))


class GridGuidedFusion(Module):
    """Lattice queries attend to the camera FV, then to the fused BEV map."""

    def __init__(self, c_img: int, c_fb: int, c_b: int, rng, U: int = 6, heads: int = 4, points: int = 4):
        self.U = U
        self.gpe = GridPositionEncoder(c_b, rng, U)
        self.cmda_fv = CMDA(c_b, c_img, rng, heads, points)
        self.fuse_fv = FuseMLP(c_b, c_b, rng)
        self.cmda_bev = CMDA(c_b, c_fb, rng, heads, points)
        self.fuse_bev = FuseMLP(c_b, c_b, rng)

    def references(self, boxes: np.ndarray, x: StageInputs):
        centres = np.stack([box_grid_centers(b, self.U) for b in boxes]).reshape(-1, 3)
        uv, ok = project_points(centres, x.calib)
        fv_ref = np.where(ok[:, None], fv_reference(uv, x.fv_stride), -1e3)
        g = x.fb_grid
        bev = np.stack([(centres[:, 0] - g.x_min) / g.x_size, (centres[:, 1] - g.y_min) / g.y_size], axis=1)
        return fv_ref, ok, bev - 0.5

    def __call__(self, boxes: np.ndarray, x: StageInputs) -> Tensor:
        enc = GridPositionEncoder.inputs(boxes, x.points, self.U, x.fb_grid)
        f_pos = self.gpe(enc)
        fv_ref, ok, bev_ref = self.references(boxes, x)
        f_fv = self.fuse_fv(f_pos, self.cmda_fv(f_pos, fv_ref, x.cam_fv, ok))
        return self.fuse_bev(f_fv, self.cmda_bev(f_fv, bev_ref, x.fb))


class SelfAttention(Module):
    """One multi-head self-attention layer over the lattice tokens, residual + LayerNorm."""

    def __init__(self, c: int, rng, heads: int = 4):
        if c % heads:
            raise ValueError("channels must divide evenly into heads")
        self.h = heads
        self.qkv = Linear(c, 3 * c, rng, gain=1.0)
        self.proj = Linear(c, c, rng, gain=1.0)
        self.norm = LayerNorm(c)

    def forward(self, x: Tensor):
        P, G, C = x.shape
        H, dh = self.h, C // self.h
        qkv = ops.reshape(self.qkv(x), (P, G, 3, H, dh))
        qkv = ops.reshape(ops.transpose(qkv, (2, 0, 3, 1, 4)), (3, P * H, G, dh))
        q = ops.index(qkv, 0)
        k = ops.index(qkv, 1)
        v = ops.index(qkv, 2)
        o, att = ops.attention(q, k, v, 1.0 / np.sqrt(dh))  # [P*H, G, dh]
        o = ops.reshape(ops.transpose(ops.reshape(o, (P, H, G, dh)), (0, 2, 1, 3)), (P, G, C))
        return self.norm(ops.add(x, self.proj(o))), att

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)[0]


class RefineHead(Module):
    def __init__(self, n_tokens: int, c_b: int, rng, hidden: int = 128):
        self.fc = Linear(n_tokens * c_b, hidden, rng)
        self.cls = MLP(hidden, hidden // 2, 1, rng)
        self.reg = MLP(hidden, hidden // 2, 7, rng)
        self.reg.fc2.weight.data *= 0.1

    def __call__(self, f_b: Tensor):
        """``f_b[P, G, C]`` -> (confidence logits ``[P]``, deltas ``[P, 7]``)."""
        P = f_b.shape[0]
        h = ops.relu(self.fc(ops.reshape(f_b, (P, -1))))
        return ops.reshape(self.cls(h), (P,)), self.reg(h)


def soft_iou_target(iou) -> np.ndarray:
    return np.clip(2.0 * np.asarray(iou, dtype=np.float64) - 0.5, 0.0, 1.0)


@dataclass
class RefineTargets:
    iou: np.ndarray
    score: np.ndarray
    fg: np.ndarray  # indices with IoU >= fg threshold
    reg: np.ndarray  # [len(fg), 7]


def refine_targets(proposals: np.ndarray, gt: np.ndarray, fg_thresh: float = 0.55) -> RefineTargets:
    P = proposals.shape[0]
    if gt.shape[0] == 0 or P == 0:
        return RefineTargets(np.zeros(P), np.zeros(P), np.zeros(0, np.int64), np.zeros((0, 7)))
    iou = iou3d_matrix(proposals, gt)
    best = iou.max(axis=1)
    arg = iou.argmax(axis=1)
    fg = np.nonzero(best >= fg_thresh)[0]
    reg = encode_boxes(proposals[fg], gt[arg[fg]]) if fg.size else np.zeros((0, 7))
    return RefineTargets(best, soft_iou_target(best), fg, reg)


def refine_loss(conf_logits: Tensor, deltas: Tensor, targets: RefineTargets) -> tuple:
    """Mean BCE against soft IoU targets plus smooth-L1 on foreground proposals."""
    P = conf_logits.shape[0]
    lc = ops.scale(ops.sum(ops.bce_with_logits(conf_logits, targets.score)), 1.0 / max(P, 1))
    if targets.fg.size:
        lr = ops.scale(box_regression_loss(ops.gather_rows(deltas, targets.fg), targets.reg),
                       1.0 / targets.fg.size)
    else:
        lr = ops.scale(ops.sum(ops.index(deltas, (slice(0, 1), slice(0, 1)))), 0.0)
    return ops.add(lc, lr), lc, lr


class Stage2(Module):
    """PGF and/or GGF branches, self-attention fusion and the refine head."""

    def __init__(self, c_voxel: int, c_img: int, c_fb: int, rng, c_b: int = 64, U: int = 6, heads: int = 4,
                 points: int = 4, pgf: bool = True, ggf: bool = True, self_attn: bool = True, kde: bool = True,
                 attn_heads: int = 4, hidden: int = 128):
        if not (pgf or ggf):
            raise ValueError("stage 2 needs at least one of the PGF and GGF branches")
        self.U, self.c_b = U, c_b
        self.use_pgf, self.use_ggf, self.use_attn = pgf, ggf, self_attn
        if pgf:
            self.pgf = PointGuidedFusion(c_voxel, c_img, c_b, rng, U, heads, points, kde)
        if ggf:
            self.ggf = GridGuidedFusion(c_img, c_fb, c_b, rng, U, heads, points)
        if self_attn:
            self.attn = SelfAttention(c_b, rng, attn_heads)
        self.head = RefineHead(U ** 3, c_b, rng, hidden)

    def branches(self, boxes: np.ndarray, x: StageInputs):
        f_pt = self.pgf(boxes, x) if self.use_pgf else None
        f_gd = self.ggf(boxes, x) if self.use_ggf else None
        return f_pt, f_gd

    def fuse(self, f_pt, f_gd, P: int) -> Tensor:
        G = self.U ** 3
        tok = f_pt if f_gd is None else (f_gd if f_pt is None else ops.add(f_pt, f_gd))
        tok = ops.reshape(tok, (P, G, self.c_b))
        return self.attn(tok) if self.use_attn else tok

    def __call__(self, boxes: np.ndarray, x: StageInputs, replace_pgf=None):
        """Refinement logits and deltas for ``boxes[P, 7]``.

        ``replace_pgf`` substitutes the point branch output (used to check that
        point-free proposals do not depend on it).
        """
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
        f_pt, f_gd = self.branches(boxes, x)
        if replace_pgf is not None:
            f_pt = replace_pgf
        f_b = self.fuse(f_pt, f_gd, boxes.shape[0])
        conf, deltas = self.head(f_b)
        return conf, deltas, {"f_b_pt": f_pt, "f_b_gd": f_gd, "f_b": f_b}
