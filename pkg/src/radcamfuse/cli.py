"""Command line: ``datagen | train | eval | infer | gradcheck | ablate``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("radcamfuse")


def _apply_thread_cap():
    n = os.environ.get("CVFK_THREADS")
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(var, n)


def _config(args):
    from .config import RunConfig

    extra = {}
    if args.seed is not None:
        extra["seed"] = args.seed
    for kv in args.set or []:
        k, _, v = kv.partition("=")
        try:
            extra[k] = json.loads(v)
        except json.JSONDecodeError:
            extra[k] = v
    cfg = RunConfig.load(args.config, extra) if args.config else RunConfig(extra)
    return cfg


def synth_config(cfg):
    from .synth import SynthConfig

    return SynthConfig(seed=int(cfg["seed"]), n_scenes=int(cfg["data.n_scenes"]),
                       val_fraction=float(cfg["data.val_fraction"]), image_hw=tuple(cfg["data.image_hw"]),
                       clutter_rate=float(cfg["data.clutter_rate"]), grid=cfg.grid)


def _workers(cfg) -> int:
    cap = int(os.environ.get("CVFK_THREADS", "0") or 0)
    w = int(cfg["data.workers"])
    return min(w, cap) if cap > 0 else w


def _data_root(args, cfg) -> Path:
    return Path(getattr(args, "data", None) or cfg["data.root"])


def cmd_datagen(args, cfg):
    from .synth import generate_dataset

    root = Path(args.out or cfg["data.root"])
    man = generate_dataset(synth_config(cfg), root, _workers(cfg))
    n_val = sum(f["split"] == "val" for f in man["frames"])
    print(f"wrote {len(man['frames'])} frames ({n_val} val) to {root}")
    return 0


def _load_split(root: Path, split: str):
    from .synth import DatasetFormatError
    from .train import scenes_from_dataset

    if not (root / "dataset.json").exists():
        raise DatasetFormatError(f"{root}: no dataset.json (run `datagen` first)")
    return scenes_from_dataset(root, split)


def cmd_train(args, cfg):
    from .train import train

    root = _data_root(args, cfg)
    out = Path(args.out or "runs/train")
    tr = _load_split(root, "train")
    va = _load_split(root, cfg["train.eval_split"])
    _, hist = train(cfg, tr, va, out_dir=out, resume=args.resume)
    last = hist[-1] if hist else {}
    print(f"trained {len(hist)} epochs; final loss {last.get('loss', float('nan')):.4f}; logs in {out}")
    return 0


def _model_from_checkpoint(cfg, path):
    import numpy as np

    from .model import Detector
    from .tensor import precision
    from .train import load_model_weights

    with precision("float32"):
        model = Detector(cfg, np.random.default_rng(int(cfg["seed"])))
    load_model_weights(model, path)
    return model


def _checkpoint_path(args) -> Path:
    p = Path(args.checkpoint)
    return p / "checkpoints" / "latest.cvfk" if p.is_dir() else p


def _run_config_for(args, cfg):
    """Prefer the config recorded next to the checkpoint so dims always match."""
    from .config import RunConfig

    ck = Path(args.checkpoint)
    run_json = (ck if ck.is_dir() else ck.parent.parent) / "run.json"
    if run_json.exists() and not args.config:
        return RunConfig(json.loads(run_json.read_text())["config"])
    return cfg


def cmd_eval(args, cfg):
    from .metrics import write_report
    from .train import evaluate_model

    cfg = _run_config_for(args, cfg)
    model = _model_from_checkpoint(cfg, _checkpoint_path(args))
    scenes = _load_split(_data_root(args, cfg), args.split or cfg["eval.split"])
    out = Path(args.out or "runs/eval")
    region = args.region or cfg["eval.region"]
    res = evaluate_model(model, scenes, region=region, recall_positions=int(cfg["eval.recall_positions"]))
    paths = write_report(res, out)
    print(f"{region}: mAP_3d {res['mAP_3d']:.4f} mAP_bev {res['mAP_bev']:.4f} "
          f"recall@0.25 {res['proposal_recall']:.4f} ({res['n_gt']} GT); report {paths[0]}")
    return 0


def cmd_infer(args, cfg):
    from .metrics import write_detections

    cfg = _run_config_for(args, cfg)
    model = _model_from_checkpoint(cfg, _checkpoint_path(args))
    scenes = _load_split(_data_root(args, cfg), args.split or "all")
    out = Path(args.out or "runs/infer")
    out.mkdir(parents=True, exist_ok=True)
    for sc in scenes:
        dets, _ = model.predict(sc)
        write_detections(out / f"{sc.frame_id:06d}.txt", dets)
    print(f"wrote detections for {len(scenes)} frames to {out}")
    return 0


def cmd_gradcheck(args, cfg):
    from .gradsuite import format_table, run_suite

    try:
        rows = run_suite(args.select, corrupt=args.corrupt)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(format_table(rows))
    failed = [r[0] for r in rows if not r[3]]
    print(f"{len(rows) - len(failed)}/{len(rows)} passed")
    return 1 if failed else 0


def cmd_ablate(args, cfg):
    from .train import run_ablation, summarize_ablation

    root = _data_root(args, cfg)
    out = Path(args.out or "runs/ablate")
    tr = _load_split(root, "train")
    va = _load_split(root, "val")
    res = run_ablation(cfg, tr, va, out_dir=out)
    print(f"{'name':<16} {'mAP_3d':>8} {'corridor':>9} {'recall':>7}")
    for r in summarize_ablation(res):
        print(f"{r['name']:<16} {r['mAP_3d']:>8.4f} {r['mAP_3d_corridor']:>9.4f} {r['proposal_recall']:>7.4f}")
    return 0


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "gradcheck": cmd_gradcheck, "ablate": cmd_ablate}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config (// and /* */ comments allowed)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("-v", "--verbose", action="store_true")
    p = argparse.ArgumentParser(prog="radcamfuse", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("datagen", parents=[common], help="write a synthetic dataset")
    t = sub.add_parser("train", parents=[common], help="train on a dataset")
    t.add_argument("--data", type=Path)
    t.add_argument("--resume", action="store_true")
    for name in ("eval", "infer"):
        e = sub.add_parser(name, parents=[common])
        e.add_argument("--checkpoint", required=True, help="checkpoint file or training run directory")
        e.add_argument("--data", type=Path)
        e.add_argument("--split")
        if name == "eval":
            e.add_argument("--region", help="entire or corridor")
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    g.add_argument("--select", nargs="*", help="glob patterns over check names")
    g.add_argument("--corrupt", action="store_true", help="negative control: run with a broken sigmoid backward")
    a = sub.add_parser("ablate", parents=[common], help="train and evaluate the configured switch matrix")
    a.add_argument("--data", type=Path)
    return p


def main(argv=None) -> int:
    _apply_thread_cap()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    from .synth import DatasetFormatError

    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except (KeyError, DatasetFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
