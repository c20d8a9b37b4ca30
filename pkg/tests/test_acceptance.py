"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The two training criteria take real wall-clock time (about 20 min and 2 h on
one core); deselect them with ``-m "not long"`` for a quick run.
"""
import time

import numpy as np
import pytest
from test_cmda import cmda_oracle, randomized
from test_metrics import mc_bev_iou, random_pair
from test_stage2 import kde_oracle

from radcamfuse.cmda import CMDA
from radcamfuse.config import RunConfig
from radcamfuse.gradsuite import TOLERANCE, run_suite
from radcamfuse.metrics import EvalConfig, FrameBoxes, bev_iou, count_gt, evaluate
from radcamfuse.model import Detector
from radcamfuse.rgiter import decode_boxes, encode_boxes
from radcamfuse.stage2 import in_box_pairs, kde_density
from radcamfuse.synth import SynthConfig, generate_scene
from radcamfuse.tensor import Tensor, ops
from radcamfuse.train import evaluate_model, run_ablation, summarize_ablation, train

# settings of the two training criteria; the desk preset gives a 128 x 128 base BEV and C_b = 64
OVERFIT = {"optim.name": "adam", "optim.lr": 0.003, "optim.weight_decay": 0.0, "optim.batch_size": 2,
           "optim.epochs": 80, "train.eval_every": 0}
ABLATION = {"optim.name": "adam", "optim.lr": 0.003, "optim.weight_decay": 0.0, "optim.batch_size": 2,
            "optim.epochs": 4, "train.eval_every": 0}
ABLATION_ROWS = [
    {"name": "full"},
    {"name": "stage1_only", "stage2.enabled": False},
    {"name": "concat_stage1", "fusion.mode": "concat", "stage2.enabled": False},
    {"name": "radar_only_stage1", "fusion.mode": "radar_only", "stage2.enabled": False},
    {"name": "camera_only_stage1", "fusion.mode": "camera_only", "stage2.enabled": False},
]


def test_criterion_1_gradient_suite(report):
    t0 = time.time()
    rows = run_suite()
    secs = time.time() - t0
    names = {r[0] for r in rows}
    need = {"conv2d", "bilinear_sample", "depth_lift", "rgiter", "cmda", "gpe", "ggf", "refine_head", "losses"}
    worst = max(r[1] for r in rows)
    ok = need <= names and all(r[3] for r in rows) and secs < 120
    report("1 gradient suite", ok, f"{len(rows)} checks, max rel err {worst:.2e} (< {TOLERANCE:g}), {secs:.1f}s")
    assert ok


def test_criterion_2_oracles(report):
    rng = np.random.default_rng(20)
    # (a) deformable attention against the explicit double sum
    mod = randomized(CMDA(6, 4, rng, heads=3, points=4), rng)
    fmap = rng.normal(size=(9, 11, 4))
    q = rng.normal(size=(25, 6))
    ref = rng.uniform(-1, 11, size=(25, 2))
    e_a = np.abs(mod(Tensor(q), ref, Tensor(fmap)).data - cmda_oracle(mod, q, ref, fmap)).max()
    # (b) density against the pairwise kernel sum
    pts = rng.normal(size=(120, 3)) * [2.0, 1.0, 0.5]
    e_b = max(np.abs(kde_density(pts, h) - kde_oracle(pts, h)).max() for h in (0.1, 0.5, 2.0))
    # (c) rotated BEV IoU against Monte Carlo on 1000 pairs
    e_c = 0.0
    for _ in range(1000):
        a, b = random_pair(rng)
        e_c = max(e_c, abs(bev_iou(a, b) - mc_bev_iou(a, b, rng, n=500_000)))
    # (d) box coding round trip
    anchors = np.column_stack([rng.uniform(-30, 30, (2000, 3)), rng.uniform(0.3, 8, (2000, 3)),
                               rng.uniform(-np.pi, np.pi, 2000)])
    gt = np.column_stack([anchors[:, :3] + rng.normal(0, 2, (2000, 3)), rng.uniform(0.3, 8, (2000, 3)),
                          rng.uniform(-np.pi, np.pi, 2000)])
    e_d = np.abs(decode_boxes(anchors, encode_boxes(anchors, gt)) - gt).max()
    ok = e_a <= 1e-10 and e_b <= 1e-9 and e_c < 0.01 and e_d <= 1e-9
    report("2 oracles", ok, f"cmda {e_a:.1e}, kde {e_b:.1e}, bev iou vs MC {e_c:.4f}, coding {e_d:.1e}")
    assert ok


def test_criterion_3_degenerate_attention(report):
    rng = np.random.default_rng(30)
    C = 6
    mod = CMDA(4, C, rng, heads=1, points=1, c_head=C, c_out=C)
    mod.offsets.weight.data[:] = 0.0
    mod.offsets.bias.data[:] = 0.0
    mod.value.weight.data[:] = np.eye(C)
    mod.out.weight.data[:] = np.eye(C)
    fmap = rng.normal(size=(10, 12, C))
    ref = rng.uniform(-1.5, 12.5, size=(200, 2))
    out = mod(Tensor(rng.normal(size=(200, 4))), ref, Tensor(fmap)).data
    err = np.abs(out - ops.bilinear_sample(Tensor(fmap), ref).data).max()
    ok = err <= 1e-12
    report("3 degenerate attention", ok, f"max |CMDA - bilinear| = {err:.1e}")
    assert ok


@pytest.fixture(scope="module")
def overfit_run():
    cfg = RunConfig(OVERFIT, preset="desk")
    scenes = [generate_scene(SynthConfig(seed=0), i) for i in range(32)]
    t0 = time.time()
    model, hist = train(cfg, scenes)
    res = evaluate_model(model, scenes, iou_override=0.25)
    return cfg, hist, res, time.time() - t0


@pytest.mark.long
def test_criterion_4_overfit(report, overfit_run):
    cfg, hist, res, secs = overfit_run
    drop = hist[0]["loss"] / hist[-1]["loss"]
    ok_map = res["mAP_3d"] >= 0.80
    ok_loss = drop >= 10.0
    ok = ok_map and ok_loss and secs <= 20 * 60 and len(hist) <= 300 and cfg.base_grid.shape[:2] == (128, 128)
    report("4 overfit", ok, f"train mAP@0.25 {res['mAP_3d']:.3f} (>= 0.80), loss {hist[0]['loss']:.3f} -> "
                            f"{hist[-1]['loss']:.3f} ({drop:.1f}x, need 10x), {len(hist)} epochs, {secs / 60:.1f} min")
    assert ok


@pytest.mark.long
def test_overfit_loss_decreases_for_ten_epochs(overfit_run):
    losses = [r["loss"] for r in overfit_run[1][:10]]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


@pytest.mark.long
def test_criterion_5_ablation_ordering(report, tmp_path):
    t0 = time.time()
    base = RunConfig(ABLATION, preset="desk")
    data = SynthConfig(seed=100)
    scenes = [generate_scene(data, i) for i in range(640)]
    res = run_ablation(base, scenes[:512], scenes[512:], rows=ABLATION_ROWS, seeds=[0, 1, 2], out_dir=tmp_path)
    secs = time.time() - t0
    t = {r["name"]: r for r in summarize_ablation(res)}
    a = t["full"]["mAP_3d"] > t["stage1_only"]["mAP_3d"]
    b = t["stage1_only"]["proposal_recall"] >= t["concat_stage1"]["proposal_recall"]
    c = t["radar_only_stage1"]["mAP_3d"] > t["camera_only_stage1"]["mAP_3d"]
    ok = a and b and c and secs <= 2 * 3600
    report("5 ablation ordering", ok,
           f"full {t['full']['mAP_3d']:.4f} vs stage1 {t['stage1_only']['mAP_3d']:.4f} ({'ok' if a else 'no'}); "
           f"recall rgiter {t['stage1_only']['proposal_recall']:.4f} vs concat "
           f"{t['concat_stage1']['proposal_recall']:.4f} ({'ok' if b else 'no'}); radar {t['radar_only_stage1']['mAP_3d']:.4f}"
           f" vs camera {t['camera_only_stage1']['mAP_3d']:.4f} ({'ok' if c else 'no'}); {secs / 60:.1f} min")
    assert ok


def test_criterion_6_point_free_proposals(report):
    cfg = RunConfig({"stage2.U": 4}, preset="desk")
    model = Detector(cfg, np.random.default_rng(60))
    rng = np.random.default_rng(61)
    n_free = n_total = 0
    exact = True
    for fid in range(4):
        sc = generate_scene(SynthConfig(seed=6), fid)
        pyr, fb, cls, reg = model.stage1(sc)
        props = model.proposals(cls, reg, train=False).boxes
        gt = sc.box_array()
        jitter = gt + rng.normal(0, 0.3, gt.shape) * [1, 1, 0.2, 0.2, 0.2, 0.2, 0.2]
        far = np.column_stack([rng.uniform(2, 24, (10, 2)) * [1, 0] + [0, 11.5], np.zeros(10),
                               np.full((10, 3), 0.6), np.zeros(10)])  # small boxes near the grid edge
        boxes = np.concatenate([props, gt, jitter, far])
        x = model.stage_inputs(sc, pyr, fb)
        pid, _ = in_box_pairs(x.points, boxes, x.point_voxel)
        free = np.setdiff1d(np.arange(len(boxes)), pid)
        conf, d, ex = model.stage2(boxes, x)
        G = model.U ** 3
        f_pt = ex["f_b_pt"].data.reshape(len(boxes), G, -1)
        conf0, d0, _ = model.stage2(boxes, x, replace_pgf=Tensor(np.zeros_like(ex["f_b_pt"].data)))
        exact &= not f_pt[free].any()
        exact &= np.array_equal(conf0.data[free], conf.data[free]) and np.array_equal(d0.data[free], d.data[free])
        n_free += free.size
        n_total += len(boxes)
    ok = bool(exact) and n_free > 0
    report("6 point-free proposals", ok, f"{n_free} of {n_total} proposals without radar points: "
                                         f"f_b_pt zero and refinement bit-identical = {bool(exact)}")
    assert ok


def test_criterion_7_metric_self_test(report):
    scenes = [generate_scene(SynthConfig(seed=7), i) for i in range(16)]
    gts = [FrameBoxes(s.box_array(), s.class_array()) for s in scenes]
    dets = [FrameBoxes(g.boxes, g.classes, np.ones(len(g))) for g in gts]
    maps = {r: evaluate(dets, gts, EvalConfig(region=r))["mAP_3d"] for r in ("entire", "corridor")}
    # corridor in the camera frame, x_cam = -y and z_cam = x, written out independently of region_mask
    inside = [(np.abs(g.boxes[:, 1]) < 4) & (g.boxes[:, 0] > 0) & (g.boxes[:, 0] < 25) for g in gts]
    peripheral = [g for g, m in zip(gts, inside) if not m.all()]
    reduces = bool(peripheral) and all(count_gt([g], "corridor") < count_gt([g], "entire") for g in peripheral)
    reduces &= count_gt(gts, "corridor") == sum(int(m.sum()) for m in inside)
    ok = maps["entire"] == pytest.approx(1.0) and maps["corridor"] == pytest.approx(1.0) and reduces
    report("7 metric self-test", ok, f"mAP entire {maps['entire']:.4f}, corridor {maps['corridor']:.4f}; "
                                     f"{len(peripheral)} scenes with peripheral boxes, corridor count "
                                     f"{count_gt(gts, 'corridor')} < entire {count_gt(gts, 'entire')}")
    assert ok
