"""Rotated IoU, interpolated AP, region filtering and proposal recall."""
from __future__ import annotations

import csv
import io
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .geometry import CLASS_NAMES, Box3D, ObjectClass, bev_boxes

log = logging.getLogger(__name__)

DEFAULT_IOU = {ObjectClass.Car: 0.5, ObjectClass.Pedestrian: 0.25, ObjectClass.Cyclist: 0.25, ObjectClass.Truck: 0.5}
CORRIDOR = (-4.0, 4.0, 0.0, 25.0)  # x_cam range, z_cam range


def _arr(boxes) -> np.ndarray:
    if isinstance(boxes, Box3D):
        return boxes.as_array()[None]
    a = np.asarray(boxes, dtype=np.float64)
    return a.reshape(-1, 7)


def bev_iou_matrix(a, b) -> np.ndarray:
    a, b = _arr(a), _arr(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    inter = kernels.bev_intersection_matrix(bev_boxes(a), bev_boxes(b))
    area_a = a[:, 3] * a[:, 4]
    area_b = b[:, 3] * b[:, 4]
    union = area_a[:, None] + area_b[None, :] - inter
    ok = (area_a[:, None] > 0) & (area_b[None, :] > 0) & (union > 0)
    return np.where(ok, inter / np.where(ok, union, 1.0), 0.0)


def iou3d_matrix(a, b) -> np.ndarray:
    a, b = _arr(a), _arr(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    inter = kernels.bev_intersection_matrix(bev_boxes(a), bev_boxes(b))
    lo = np.maximum((a[:, 2] - a[:, 5] / 2)[:, None], (b[:, 2] - b[:, 5] / 2)[None, :])
    hi = np.minimum((a[:, 2] + a[:, 5] / 2)[:, None], (b[:, 2] + b[:, 5] / 2)[None, :])
    inter = inter * np.clip(hi - lo, 0.0, None)
    va = a[:, 3] * a[:, 4] * a[:, 5]
    vb = b[:, 3] * b[:, 4] * b[:, 5]
    union = va[:, None] + vb[None, :] - inter
    ok = (va[:, None] > 0) & (vb[None, :] > 0) & (union > 0)
    return np.where(ok, inter / np.where(ok, union, 1.0), 0.0)


def bev_iou(a, b) -> float:
    return float(bev_iou_matrix(a, b)[0, 0])


def iou3d(a, b) -> float:
    return float(iou3d_matrix(a, b)[0, 0])


# ------------------------------------------------------------------ frames and filters

@dataclass
class FrameBoxes:
    """Boxes of one frame: ``boxes[N, 7]``, ``classes[N]`` and optional ``scores[N]``."""

    boxes: np.ndarray
    classes: np.ndarray
    scores: np.ndarray | None = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 7)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)

    @classmethod
    def from_boxes(cls, boxes, with_scores: bool = False) -> "FrameBoxes":
        arr = np.stack([b.as_array() for b in boxes]) if boxes else np.zeros((0, 7))
        cl = np.array([int(b.class_id) for b in boxes], dtype=np.int64)
        sc = np.array([1.0 if b.score is None else b.score for b in boxes]) if with_scores else None
        return cls(arr, cl, sc)

    def select(self, mask) -> "FrameBoxes":
        return FrameBoxes(self.boxes[mask], self.classes[mask], None if self.scores is None else self.scores[mask])

    def __len__(self):
        return self.boxes.shape[0]


def region_mask(boxes: np.ndarray, region="entire") -> np.ndarray:
    """Boxes whose centre lies in the region.

    ``corridor`` uses camera-frame coordinates x_cam = -y, z_cam = x. A
    4-tuple ``(x_lo, x_hi, z_lo, z_hi)`` gives a custom camera-frame window.
    """
    boxes = np.asarray(boxes).reshape(-1, 7)
    if region == "entire" or region is None:
        return np.ones(boxes.shape[0], dtype=bool)
    lim = CORRIDOR if region == "corridor" else tuple(region)
    xc, zc = -boxes[:, 1], boxes[:, 0]
    return (xc > lim[0]) & (xc < lim[1]) & (zc > lim[2]) & (zc < lim[3])


@dataclass
class EvalConfig:
    iou_thresholds: dict = field(default_factory=lambda: dict(DEFAULT_IOU))
    region: object = "entire"
    recall_positions: int = 40
    mode: str = "3d"  # or "bev"

    def __post_init__(self):
        self.iou_thresholds = {ObjectClass(int(k)) if not isinstance(k, str) else ObjectClass[k]: float(v)
                               for k, v in self.iou_thresholds.items()}
        for v in self.iou_thresholds.values():
            if not 0.0 < v <= 1.0:
                raise ValueError("EvalConfig: IoU thresholds must lie in (0, 1]")
        if self.recall_positions not in (11, 40):
            raise ValueError("EvalConfig: recall_positions must be 11 or 40")


def _recall_grid(n: int) -> np.ndarray:
    return np.linspace(0.0, 1.0, 11) if n == 11 else np.arange(1, 41) / 40.0


def match_frame(det: np.ndarray, scores: np.ndarray, gt: np.ndarray, thr: float, mode: str = "3d"):
    """Greedy matching in descending score order; returns a TP flag per detection."""
    order = np.argsort(-scores, kind="stable")
    tp = np.zeros(det.shape[0], dtype=bool)
    if gt.shape[0] == 0 or det.shape[0] == 0:
        return tp
    iou = (iou3d_matrix if mode == "3d" else bev_iou_matrix)(det, gt)
    taken = np.zeros(gt.shape[0], dtype=bool)
    for i in order:
        cand = np.where(taken, -1.0, iou[i])
        j = int(np.argmax(cand))
        if cand[j] >= thr:
            taken[j] = True
            tp[i] = True
    return tp


def pr_curve(dets, gts, cls: int, cfg: EvalConfig):
    """Precision/recall arrays over all frames for one class, and the GT count."""
    thr = cfg.iou_thresholds[ObjectClass(cls)]
    all_scores, all_tp = [], []
    n_gt = 0
    for d, g in zip(dets, gts):
        gm = (g.classes == cls) & region_mask(g.boxes, cfg.region)
        dm = (d.classes == cls) & region_mask(d.boxes, cfg.region)
        gb = g.boxes[gm]
        n_gt += gb.shape[0]
        db = d.boxes[dm]
        ds = d.scores[dm] if d.scores is not None else np.ones(db.shape[0])
        all_tp.append(match_frame(db, ds, gb, thr, cfg.mode))
        all_scores.append(ds)
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    tp = np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / max(n_gt, 1)
    precision = ctp / np.maximum(ctp + cfp, 1)
    return precision, recall, n_gt


def interpolated_ap(precision: np.ndarray, recall: np.ndarray, positions: int = 40) -> float:
    grid = _recall_grid(positions)
    vals = []
    for r in grid:
        ok = recall >= r - 1e-12
        vals.append(precision[ok].max() if ok.any() else 0.0)
    return float(np.mean(vals))


def average_precision(dets, gts, cls: int, cfg: EvalConfig | None = None) -> float:
    """Interpolated AP for one class; NaN when the class has no ground truth."""
    cfg = cfg or EvalConfig()
    p, r, n_gt = pr_curve(dets, gts, cls, cfg)
    if n_gt == 0:
        return float("nan")
    return interpolated_ap(p, r, cfg.recall_positions)


def mean_ap(dets, gts, cfg: EvalConfig | None = None, classes=None) -> tuple:
    """(mAP, per-class AP dict). Classes without ground truth are skipped with a warning."""
    cfg = cfg or EvalConfig()
    classes = list(ObjectClass) if classes is None else [ObjectClass(c) for c in classes]
    per = {}
    for c in classes:
        ap = average_precision(dets, gts, int(c), cfg)
        if np.isnan(ap):
            log.warning("no ground truth for class %s; excluded from mAP", c.name)
        per[c.name] = ap
    vals = [v for v in per.values() if not np.isnan(v)]
    return (float(np.mean(vals)) if vals else float("nan")), per


def count_gt(gts, region="entire") -> int:
    return int(sum(region_mask(g.boxes, region).sum() for g in gts))


def proposal_recall(proposals, gts, iou_thr: float = 0.25) -> float:
    """Fraction of GT boxes covered by at least one proposal at 3D IoU >= ``iou_thr``."""
    hit = total = 0
    for p, g in zip(proposals, gts):
        gb = g.boxes if isinstance(g, FrameBoxes) else _arr(g)
        pb = p.boxes if isinstance(p, FrameBoxes) else _arr(p)
        total += gb.shape[0]
        if gb.shape[0] and pb.shape[0]:
            hit += int((iou3d_matrix(pb, gb).max(axis=0) >= iou_thr).sum())
    return hit / total if total else 0.0


# ------------------------------------------------------------------ files

def write_detections(path, frame: FrameBoxes) -> None:
    lines = []
    scores = frame.scores if frame.scores is not None else np.ones(len(frame))
    for b, c, s in zip(frame.boxes, frame.classes, scores):
        lines.append(" ".join([CLASS_NAMES[int(c)], f"{s:.6g}"] + [f"{v:.9g}" for v in b]))
    _atomic_write(path, "\n".join(lines) + ("\n" if lines else ""))


def read_detections(path) -> FrameBoxes:
    boxes, cls, scores = [], [], []
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        p = line.split()
        if len(p) != 9:
            raise ValueError(f"{path}:{ln}: expected 9 fields, got {len(p)}")
        cls.append(int(ObjectClass[p[0]]))
        scores.append(float(p[1]))
        boxes.append([float(v) for v in p[2:]])
    return FrameBoxes(np.array(boxes).reshape(-1, 7), np.array(cls), np.array(scores))


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def evaluate(dets, gts, cfg: EvalConfig | None = None, proposals=None) -> dict:
    """3D and BEV AP per class plus optional proposal recall."""
    cfg = cfg or EvalConfig()
    out = {"region": cfg.region if isinstance(cfg.region, str) else "custom"}
    for mode in ("3d", "bev"):
        c = EvalConfig(cfg.iou_thresholds, cfg.region, cfg.recall_positions, mode)
        m, per = mean_ap(dets, gts, c)
        out[f"mAP_{mode}"] = m
        out[f"AP_{mode}"] = per
        out[f"curves_{mode}"] = {name: pr_curve(dets, gts, int(ObjectClass[name]), c)[:2] for name in per}
    out["n_gt"] = count_gt(gts, cfg.region)
    if proposals is not None:
        out["proposal_recall"] = proposal_recall(proposals, gts)
    return out


def write_report(result: dict, out_dir, prefix: str = "eval") -> list:
    """CSV with per-class AP and mAP, plus one PR-curve SVG per class. Returns written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["class", "AP_3d", "AP_bev"])
    for name in result["AP_3d"]:
        w.writerow([name, f"{result['AP_3d'][name]:.6f}", f"{result['AP_bev'][name]:.6f}"])
    w.writerow(["mAP", f"{result['mAP_3d']:.6f}", f"{result['mAP_bev']:.6f}"])
    if "proposal_recall" in result:
        w.writerow(["proposal_recall@0.25", f"{result['proposal_recall']:.6f}", ""])
    csv_path = out_dir / f"{prefix}_{result['region']}.csv"
    _atomic_write(csv_path, buf.getvalue())
    paths = [csv_path]
    for name, (p, r) in result["curves_3d"].items():
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(r, p, drawstyle="steps-post")
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.set_title(f"{name} ({result['region']})")
        svg = io.StringIO()
        fig.savefig(svg, format="svg")
        plt.close(fig)
        path = out_dir / f"{prefix}_{result['region']}_pr_{name}.svg"
        _atomic_write(path, svg.getvalue())
        paths.append(path)
    return paths
