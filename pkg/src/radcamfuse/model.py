"""The two-stage radar + camera detector assembled from its parts."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import CameraEncoder, DepthLift, FeaturePyramid, RadarEncoder, RadarVoxels
from .config import RunConfig
from .geometry import ObjectClass
from .metrics import FrameBoxes, iou3d_matrix
from .rgiter import (BEVFusion, ProposalSet, RPNHead, assign_targets, decode_boxes, generate_proposals,
                     make_anchors, nms_bev, rpn_loss)
from .stage2 import Stage2, StageInputs, refine_loss, refine_targets
from .tensor import Module, Tensor, get_dtype, no_grad, ops, precision

FV_STRIDE = 4


@dataclass
class Losses:
    total: Tensor
    rpn: float
    refine: float
    rpn_cls: float
    rpn_reg: float


class Detector(Module):
    def __init__(self, cfg: RunConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(cfg["seed"])
        self.cfg = cfg
        self.precision = "float32" if get_dtype() == np.float32 else "float64"
        self.mode = cfg["fusion.mode"]
        c_bev = tuple(int(c) for c in cfg["backbone.c_bev"])
        c_img, c_vox, c_fb = int(cfg["backbone.c_img"]), int(cfg["backbone.c_voxel"]), int(cfg["fusion.c_out"])
        self.base_grid = cfg.base_grid
        self.fb_grid = cfg.fb_grid
        self.radar = RadarEncoder(self.base_grid, c_vox, c_bev, rng)
        self.camera = CameraEncoder(tuple(cfg["data.image_hw"]), c_img, rng)
        self.lift = DepthLift(c_img, c_bev[0], int(cfg["backbone.depth_bins"]), rng, d_max=cfg.grid.x_max)
        self.fusion = BEVFusion(c_bev, c_fb, rng, self.mode)
        self.anchors, self.anchor_cls = make_anchors(self.fb_grid)
        self.rpn = RPNHead(c_fb, 2 * len(ObjectClass), rng)
        self.use_stage2 = bool(cfg["stage2.enabled"])
        self.U = int(cfg["stage2.U"])
        if self.use_stage2:
            self.stage2 = Stage2(c_vox, c_img, c_fb, rng, c_b=int(cfg["stage2.c_b"]), U=self.U,
                                 heads=int(cfg["cmda.heads"]), points=int(cfg["cmda.points"]),
                                 pgf=bool(cfg["stage2.pgf"]), ggf=bool(cfg["stage2.ggf"]),
                                 self_attn=bool(cfg["stage2.self_attn"]), kde=bool(cfg["stage2.kde"]),
                                 attn_heads=int(cfg["stage2.attn_heads"]), hidden=int(cfg["stage2.hidden"]))
        self._targets: dict = {}
        self.finalize_names()

    # ------------------------------------------------------------ forward pieces

    def features(self, scene) -> FeaturePyramid:
        cloud = scene.cloud.data if self.mode != "camera_only" else np.zeros((0, 5))
        rv, rbev = self.radar(cloud)
        if self.mode == "radar_only":
            hw = tuple(s // FV_STRIDE for s in self.camera.image_hw)
            fv = Tensor(np.zeros(hw + (self.lift.context.weight.shape[2],), dtype=get_dtype()))
            nx, ny, _ = self.base_grid.shape
            cb = Tensor(np.zeros((ny, nx, self.lift.c_out), dtype=get_dtype()))
        else:
            fv = self.camera(scene.image)
            cb = self.lift(fv, scene.calib, self.base_grid, FV_STRIDE)
        return FeaturePyramid(rv, rbev, fv, cb)

    def stage1(self, scene):
        pyr = self.features(scene)
        fb = self.fusion(pyr.cam_bev, pyr.radar_bev)
        cls, reg = self.rpn(fb)
        return pyr, fb, cls, reg

    def stage_inputs(self, scene, pyr: FeaturePyramid, fb: Tensor) -> StageInputs:
        rv: RadarVoxels = pyr.radar_voxel
        pts = scene.cloud.data if self.mode != "camera_only" else np.zeros((0, 5))
        pv = rv.point_voxel if self.mode != "camera_only" else np.zeros(0, np.int64)
        return StageInputs(pts, rv.features, pv, pyr.cam_fv, fb, scene.calib, self.fb_grid, FV_STRIDE)

    def targets_for(self, scene):
        key = scene.frame_id
        t = self._targets.get(key)
        if t is None:
            t = assign_targets(self.anchors, self.anchor_cls, scene.box_array(), scene.class_array())
            self._targets[key] = t
        return t

    def proposals(self, cls: Tensor, reg: Tensor, train: bool) -> ProposalSet:
        keep = int(self.cfg["rpn.train_proposals" if train else "rpn.test_proposals"])
        return generate_proposals(cls.data, reg.data, self.anchors, self.anchor_cls,
                                  pre_nms=int(self.cfg["rpn.pre_nms"]), nms_thresh=float(self.cfg["rpn.nms"]),
                                  keep=keep)

    def sample_proposals(self, props: ProposalSet, gt: np.ndarray, rng) -> ProposalSet:
        """Fixed-size subset with a bounded foreground fraction."""
        n = int(self.cfg["stage2.samples"])
        if len(props) <= n:
            return props
        iou = iou3d_matrix(props.boxes, gt).max(axis=1) if gt.shape[0] else np.zeros(len(props))
        fg = np.nonzero(iou >= float(self.cfg["stage2.fg_iou"]))[0]
        bg = np.nonzero(iou < float(self.cfg["stage2.fg_iou"]))[0]
        n_fg = min(fg.size, int(round(n * float(self.cfg["stage2.fg_fraction"]))))
        n_bg = min(bg.size, n - n_fg)
        n_fg = min(fg.size, n - n_bg)
        pick = np.concatenate([rng.choice(fg, n_fg, replace=False) if n_fg else np.zeros(0, np.int64),
                               rng.choice(bg, n_bg, replace=False) if n_bg else np.zeros(0, np.int64)])
        return props.select(np.sort(pick).astype(np.int64))

    # ------------------------------------------------------------ training / inference

    def loss(self, scene, rng) -> Losses:
        with precision(self.precision):
            return self._loss(scene, rng)

    def _loss(self, scene, rng) -> Losses:
        pyr, fb, cls, reg = self.stage1(scene)
        tgt = self.targets_for(scene)
        l_rpn, lc, lr = rpn_loss(cls, reg, tgt, float(self.cfg["rpn.cls_weight"]), float(self.cfg["rpn.reg_weight"]),
                                 float(self.cfg["rpn.focal_alpha"]), float(self.cfg["rpn.focal_gamma"]))
        total = l_rpn
        l_ref = 0.0
        if self.use_stage2:
            with no_grad():
                props = self.proposals(cls, reg, train=True)
            gt = scene.box_array()
            props = self.sample_proposals(props, gt, rng)
            if len(props):
                conf, deltas, _ = self.stage2(props.boxes, self.stage_inputs(scene, pyr, fb))
                lref, _, _ = refine_loss(conf, deltas, refine_targets(props.boxes, gt, float(self.cfg["stage2.fg_iou"])))
                total = ops.add(l_rpn, lref)
                l_ref = lref.item()
        return Losses(total, l_rpn.item(), l_ref, lc.item(), lr.item())

    def postprocess(self, boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray) -> FrameBoxes:
        thr, nms_t = float(self.cfg["post.score_thresh"]), float(self.cfg["post.nms"])
        keep_all = []
        for c in np.unique(classes):
            idx = np.nonzero((classes == c) & (scores >= thr))[0]
            if idx.size:
                keep_all.append(idx[nms_bev(boxes[idx], scores[idx], nms_t)])
        keep = np.concatenate(keep_all) if keep_all else np.zeros(0, np.int64)
        keep = keep[np.argsort(-scores[keep], kind="stable")]
        return FrameBoxes(boxes[keep], classes[keep], scores[keep])

    def predict(self, scene, use_stage2: bool | None = None):
        """Detections and the raw proposal set for one scene (no gradient tape)."""
        use2 = self.use_stage2 if use_stage2 is None else (use_stage2 and self.use_stage2)
        with no_grad(), precision(self.precision):
            pyr, fb, cls, reg = self.stage1(scene)
            props = self.proposals(cls, reg, train=False)
            if not use2 or len(props) == 0:
                return self.postprocess(props.boxes, props.scores, props.classes), props
            conf, deltas, _ = self.stage2(props.boxes, self.stage_inputs(scene, pyr, fb))
        boxes = decode_boxes(props.boxes, deltas.data, wrap=True)
        scores = 0.5 * (1.0 + np.tanh(0.5 * conf.data.astype(np.float64)))
        return self.postprocess(boxes, scores, props.classes), props
