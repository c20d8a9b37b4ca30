"""Run configuration: flat dotted keys, JSON files with ``//`` and ``/* */`` comments allowed."""
from __future__ import annotations

import copy
import json
import re
from pathlib import Path

from .geometry import GridSpec

DEFAULTS = {
    "seed": 0,
    # detection range and voxel pitch
    "grid.x_min": 0.0, "grid.x_max": 51.2,
    "grid.y_min": -25.6, "grid.y_max": 25.6,
    "grid.z_min": -3.0, "grid.z_max": 2.0,
    "grid.x_size": 0.05, "grid.y_size": 0.05, "grid.z_size": 0.1,
    # base BEV pitch = voxel pitch * bev_factor; the fused map before the RPN is twice that
    "backbone.bev_factor": 4,
    "backbone.z_factor": 4,
    "backbone.c_voxel": 32,
    "backbone.c_img": 32,
    "backbone.c_bev": [32, 64, 128],
    "backbone.depth_bins": 32,
    "fusion.mode": "rgiter",
    "fusion.c_out": 64,
    "rpn.pre_nms": 1024,
    "rpn.nms": 0.7,
    "rpn.train_proposals": 128,
    "rpn.test_proposals": 100,
    "rpn.cls_weight": 1.0,
    "rpn.reg_weight": 2.0,
    "rpn.focal_alpha": 0.25,
    "rpn.focal_gamma": 2.0,
    "stage2.enabled": True,
    "stage2.pgf": True,
    "stage2.ggf": True,
    "stage2.self_attn": True,
    "stage2.kde": True,
    "stage2.U": 6,
    "stage2.c_b": 64,
    "stage2.hidden": 128,
    "stage2.attn_heads": 4,
    "stage2.samples": 64,
    "stage2.fg_fraction": 0.5,
    "stage2.fg_iou": 0.55,
    "cmda.heads": 4,
    "cmda.points": 4,
    "post.score_thresh": 0.1,
    "post.nms": 0.01,
    "optim.name": "sgd",
    "optim.lr": 0.01,
    "optim.momentum": 0.9,
    "optim.weight_decay": 1e-4,
    "optim.epochs": 80,
    "optim.batch_size": 4,
    "optim.clip_norm": 10.0,
    "optim.warmup_epochs": 1,
    "data.root": "data",
    "data.n_scenes": 32,
    "data.val_fraction": 0.2,
    "data.image_hw": [64, 128],
    "data.clutter_rate": 60.0,
    "data.workers": 1,
    "eval.region": "entire",
    "eval.recall_positions": 40,
    "eval.split": "val",
    "train.eval_every": 1,
    "train.eval_split": "val",
    "train.checkpoint_every": 1,
    # one training run per (row, seed); each row is a name plus config overrides
    "ablate.rows": [
        {"name": "full"},
        {"name": "stage1_only", "stage2.enabled": False},
        {"name": "concat_stage1", "fusion.mode": "concat", "stage2.enabled": False},
        {"name": "radar_only", "fusion.mode": "radar_only"},
        {"name": "camera_only", "fusion.mode": "camera_only"},
        {"name": "no_pgf", "stage2.pgf": False},
        {"name": "no_ggf", "stage2.ggf": False},
        {"name": "no_kde", "stage2.kde": False},
    ],
    "ablate.seeds": [0, 1, 2],
}

# desk-scale range used by the tests and acceptance runs: base BEV 128 x 128
DESK = {
    "grid.x_min": 0.0, "grid.x_max": 25.6,
    "grid.y_min": -12.8, "grid.y_max": 12.8,
    "backbone.c_voxel": 16,
    "backbone.c_img": 16,
    "backbone.c_bev": [16, 32, 64],
    "fusion.c_out": 32,
    "rpn.pre_nms": 512,
    "stage2.U": 4,
}

PRESETS = {"paper": {}, "desk": DESK}


def strip_comments(text: str) -> str:
    """Remove ``//`` line and ``/* */`` block comments outside JSON strings."""
    pattern = re.compile(r'"(?:\\.|[^"\\])*"|//[^\n]*|/\*.*?\*/', re.S)
    return pattern.sub(lambda m: m.group(0) if m.group(0).startswith('"') else "", text)


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = prefix + k
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


class RunConfig(dict):
    """Resolved flat config. Unknown keys are rejected so typos surface early."""

    def __init__(self, overrides: dict | None = None, preset: str | None = None):
        super().__init__(copy.deepcopy(DEFAULTS))
        flat = _flatten(overrides or {})
        preset = flat.pop("preset", preset)
        if preset:
            if preset not in PRESETS:
                raise KeyError(f"unknown preset {preset!r}")
            self.update(copy.deepcopy(PRESETS[preset]))
        self["preset"] = preset or "paper"
        for k, v in flat.items():
            if k not in DEFAULTS:
                raise KeyError(f"unknown config key {k!r}")
            self[k] = v

    @classmethod
    def load(cls, path, extra: dict | None = None) -> "RunConfig":
        data = json.loads(strip_comments(Path(path).read_text())) if path else {}
        data = _flatten(data)
        data.update(_flatten(extra or {}))
        return cls(data)

    def with_overrides(self, **kv) -> "RunConfig":
        d = dict(self)
        d.update({k.replace("__", "."): v for k, v in kv.items()})
        return RunConfig(d)

    @property
    def grid(self) -> GridSpec:
        return GridSpec(*(float(self[f"grid.{k}"]) for k in
                          ("x_min", "y_min", "z_min", "x_max", "y_max", "z_max", "x_size", "y_size", "z_size")))

    @property
    def base_grid(self) -> GridSpec:
        """Grid of the fine BEV scale (radar_bev[0], cam_bev)."""
        return self.grid.coarsen(int(self["backbone.bev_factor"]), int(self["backbone.z_factor"]))

    @property
    def fb_grid(self) -> GridSpec:
        """Grid of the fused map the RPN runs on."""
        return self.grid.coarsen(2 * int(self["backbone.bev_factor"]), int(self["backbone.z_factor"]))

    def to_json(self) -> str:
        return json.dumps(dict(self), indent=1, sort_keys=True)
