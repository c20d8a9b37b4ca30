"""Training loop, optimizers, checkpoints and evaluation of a detector on scenes."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from pathlib import Path

import numpy as np

from .config import RunConfig
from .geometry import ObjectClass
from .metrics import EvalConfig, FrameBoxes, evaluate
from .model import Detector
from .tensor import load_checkpoint, precision, save_checkpoint

log = logging.getLogger(__name__)


class SGD:
    """Momentum SGD with plain L2 weight decay folded into the gradient."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float):
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            b = self.buf[p.name]
            b *= self.momentum
            b += g
            p.data -= np.asarray(lr, dtype=p.data.dtype) * b

    def state(self) -> dict:
        return {f"momentum/{k}": v for k, v in self.buf.items()}

    def load(self, state: dict):
        for k in self.buf:
            self.buf[k] = np.asarray(state[f"momentum/{k}"], dtype=self.buf[k].dtype).copy()


class Adam:
    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[p.name], self.v[p.name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if self.weight_decay:
                upd = upd + self.weight_decay * p.data
            p.data -= np.asarray(lr, dtype=p.data.dtype) * upd.astype(p.data.dtype)

    def state(self) -> dict:
        out = {f"adam_m/{k}": v for k, v in self.m.items()}
        out.update({f"adam_v/{k}": v for k, v in self.v.items()})
        out["adam_t"] = np.array([self.t], dtype=np.float32)
        return out

    def load(self, state: dict):
        for k in self.m:
            self.m[k] = np.asarray(state[f"adam_m/{k}"], dtype=self.m[k].dtype).copy()
            self.v[k] = np.asarray(state[f"adam_v/{k}"], dtype=self.v[k].dtype).copy()
        self.t = int(state["adam_t"][0])


def make_optimizer(cfg: RunConfig, params):
    name = cfg["optim.name"]
    if name == "sgd":
        return SGD(params, float(cfg["optim.momentum"]), float(cfg["optim.weight_decay"]))
    if name == "adam":
        return Adam(params, weight_decay=float(cfg["optim.weight_decay"]))
    raise ValueError(f"unknown optimizer {name!r}")


def cosine_lr(base: float, step: int, total: int, warmup: int) -> float:
    if warmup and step < warmup:
        return base * (step + 1) / warmup
    t = (step - warmup) / max(1, total - warmup)
    return 0.5 * base * (1.0 + math.cos(math.pi * min(1.0, t)))


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= s
    return total


# ------------------------------------------------------------------ evaluation

def predict_scenes(model: Detector, scenes, use_stage2: bool | None = None):
    dets, props, gts = [], [], []
    for sc in scenes:
        d, p = model.predict(sc, use_stage2)
        dets.append(d)
        props.append(FrameBoxes(p.boxes, p.classes, p.scores))
        gts.append(FrameBoxes(sc.box_array(), sc.class_array()))
    return dets, props, gts


def evaluate_model(model: Detector, scenes, region="entire", iou_override: float | None = None,
                   use_stage2: bool | None = None, recall_positions: int = 40) -> dict:
    return evaluate_predictions(predict_scenes(model, scenes, use_stage2), region, iou_override, recall_positions)


def evaluate_predictions(predicted, region="entire", iou_override: float | None = None,
                         recall_positions: int = 40) -> dict:
    """Metrics for the ``(dets, props, gts)`` triple returned by ``predict_scenes``."""
    dets, props, gts = predicted
    thr = None if iou_override is None else {c: iou_override for c in ObjectClass}
    cfg = EvalConfig(region=region, recall_positions=recall_positions) if thr is None else \
        EvalConfig(thr, region, recall_positions)
    res = evaluate(dets, gts, cfg, proposals=props)
    res["detections"] = dets
    return res


# ------------------------------------------------------------------ checkpoints

def _atomic_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_training_state(out_dir: Path, model: Detector, opt, meta: dict):
    ck = out_dir / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    arrays.update(opt.state())
    save_checkpoint(ck / "latest.cvfk", arrays)
    _atomic_text(ck / "latest.json", json.dumps(meta, indent=1))


def load_model_weights(model: Detector, path) -> dict:
    raw = load_checkpoint(path)
    params = {k[len("param/"):]: v for k, v in raw.items() if k.startswith("param/")}
    model.load_state_dict(params)
    return raw


def write_log(path: Path, rows: list):
    if not rows:
        return
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
    w.writeheader()
    for r in rows:
        w.writerow(r)
    _atomic_text(path, buf.getvalue())


# ------------------------------------------------------------------ loop

def train(cfg: RunConfig, train_scenes: list, val_scenes: list | None = None, out_dir=None,
          resume: bool = False, max_epochs: int | None = None, on_epoch=None, time_budget: float | None = None):
    """Trains a detector and returns ``(model, history)``.

    With ``out_dir`` set, writes ``run.json``, ``train_log.csv`` and a
    checkpoint after each epoch. ``resume`` continues from the checkpoint in
    ``out_dir``. ``max_epochs`` stops early without changing the schedule
    (used to check bit-exact resumption). ``on_epoch(epoch, row, model)`` may
    return True to stop.
    """
    seed = int(cfg["seed"])
    with precision("float32"):
        model = Detector(cfg, np.random.default_rng(seed))
    opt = make_optimizer(cfg, model.parameters())
    epochs = int(cfg["optim.epochs"])
    bs = int(cfg["optim.batch_size"])
    n = len(train_scenes)
    steps_per_epoch = max(1, math.ceil(n / bs))
    total = epochs * steps_per_epoch
    warm = int(cfg["optim.warmup_epochs"]) * steps_per_epoch
    history: list = []
    start_epoch = 0
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        _atomic_text(out / "run.json", json.dumps({"config": dict(cfg), "seed": seed,
                                                   "n_train": n, "n_val": len(val_scenes or [])}, indent=1))
    if resume:
        if out is None:
            raise ValueError("resume needs an output directory")
        raw = load_model_weights(model, out / "checkpoints" / "latest.cvfk")
        opt.load(raw)
        meta = json.loads((out / "checkpoints" / "latest.json").read_text())
        start_epoch = int(meta["epoch"]) + 1
        history = meta["history"]
    params = model.parameters()
    t_start = time.time()
    for epoch in range(start_epoch, epochs):
        if max_epochs is not None and epoch >= max_epochs:
            break
        t0 = time.time()
        order = np.random.default_rng([seed, epoch]).permutation(n)
        sums = {"loss": 0.0, "rpn": 0.0, "refine": 0.0, "rpn_cls": 0.0, "rpn_reg": 0.0}
        for s in range(steps_per_epoch):
            gstep = epoch * steps_per_epoch + s
            batch = order[s * bs:(s + 1) * bs]
            model.zero_grad()
            for j, idx in enumerate(batch):
                rng = np.random.default_rng([seed, epoch, s, j])
                L = model.loss(train_scenes[idx], rng)
                # mean over the batch: seed the backward with 1/B
                L.total.backward(np.full(L.total.shape, 1.0 / len(batch), dtype=L.total.data.dtype))
                sums["loss"] += L.total.item()
                sums["rpn"] += L.rpn
                sums["refine"] += L.refine
                sums["rpn_cls"] += L.rpn_cls
                sums["rpn_reg"] += L.rpn_reg
            gnorm = clip_grad_norm(params, float(cfg["optim.clip_norm"]))
            lr = cosine_lr(float(cfg["optim.lr"]), gstep, total, warm)
            opt.step(lr)
        row = {"epoch": epoch + 1, "lr": lr, "grad_norm": gnorm}
        row.update({k: v / n for k, v in sums.items()})
        row["train_time"] = time.time() - t0
        ev_every = int(cfg["train.eval_every"])
        if val_scenes and ev_every and ((epoch + 1) % ev_every == 0 or epoch + 1 == epochs):
            res = evaluate_model(model, val_scenes)
            row["val_recall"] = res["proposal_recall"]
            row["val_mAP"] = res["mAP_3d"]
        else:
            row["val_recall"] = float("nan")
            row["val_mAP"] = float("nan")
        history.append(row)
        log.info("epoch %d loss %.4f rpn %.4f refine %.4f recall %.3f mAP %.3f (%.1fs)", epoch + 1, row["loss"],
                 row["rpn"], row["refine"], row["val_recall"], row["val_mAP"], row["train_time"])
        if out:
            write_log(out / "train_log.csv", history)
            if int(cfg["train.checkpoint_every"]) and (epoch + 1) % int(cfg["train.checkpoint_every"]) == 0:
                save_training_state(out, model, opt, {"epoch": epoch, "history": history})
        if on_epoch is not None and on_epoch(epoch, row, model):
            break
        if time_budget is not None and time.time() - t_start > time_budget:
            log.warning("time budget reached after epoch %d", epoch + 1)
            break
    return model, history


def scenes_from_dataset(root, split: str) -> list:
    from .synth import frame_ids, load_manifest, load_scene

    man = load_manifest(root)
    return [load_scene(root, fid) for fid in frame_ids(man, split)]


# ------------------------------------------------------------------ ablation sweep

def ablation_config(base: RunConfig, row: dict, seed: int) -> RunConfig:
    over = {k: v for k, v in row.items() if k != "name"}
    d = dict(base)
    d.update(over)
    d["seed"] = seed
    return RunConfig(d)


def run_ablation(base: RunConfig, train_scenes: list, val_scenes: list, rows=None, seeds=None, out_dir=None,
                 region: str = "entire") -> list:
    """Trains and evaluates every (row, seed); returns one result dict per run."""
    rows = rows if rows is not None else base["ablate.rows"]
    seeds = seeds if seeds is not None else base["ablate.seeds"]
    results = []
    out = Path(out_dir) if out_dir else None
    for row in rows:
        for seed in seeds:
            cfg = ablation_config(base, row, int(seed))
            t0 = time.time()
            run_dir = out / f"{row['name']}_seed{seed}" if out else None
            model, hist = train(cfg, train_scenes, None, out_dir=run_dir)
            pred = predict_scenes(model, val_scenes)
            ev = evaluate_predictions(pred, region=region)
            corr = evaluate_predictions(pred, region="corridor")
            res = {"name": row["name"], "seed": int(seed), "mAP_3d": ev["mAP_3d"], "mAP_bev": ev["mAP_bev"],
                   "mAP_3d_corridor": corr["mAP_3d"], "proposal_recall": ev["proposal_recall"],
                   "final_loss": hist[-1]["loss"] if hist else float("nan"), "seconds": time.time() - t0}
            log.info("ablation %s seed %d: mAP %.4f recall %.4f (%.0fs)", res["name"], seed, res["mAP_3d"],
                     res["proposal_recall"], res["seconds"])
            results.append(res)
            if out:
                write_log(out / "ablation_runs.csv", results)
    if out:
        write_log(out / "ablation_table.csv", summarize_ablation(results))
    return results


def summarize_ablation(results: list) -> list:
    """Median over seeds for every row name, in first-seen order."""
    names = list(dict.fromkeys(r["name"] for r in results))
    table = []
    for n in names:
        rs = [r for r in results if r["name"] == n]
        table.append({"name": n, "seeds": len(rs),
                      **{k: float(np.median([r[k] for r in rs]))
                         for k in ("mAP_3d", "mAP_bev", "mAP_3d_corridor", "proposal_recall")}})
    return table
