import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from radcamfuse.geometry import ObjectClass
from radcamfuse.metrics import (EvalConfig, FrameBoxes, average_precision, bev_iou, bev_iou_matrix, count_gt,
                                evaluate, interpolated_ap, iou3d, iou3d_matrix, mean_ap, pr_curve,
                                proposal_recall, read_detections, region_mask, write_detections, write_report)

CAR = int(ObjectClass.Car)


def mc_bev_iou(a, b, rng, n=200_000):
    """Monte-Carlo IoU of two rotated rectangles from uniform samples over their joint bounding square."""
    def inside(p, box):
        c, s = np.cos(box[6]), np.sin(box[6])
        d = p - box[:2]
        lx = d[:, 0] * c + d[:, 1] * s
        ly = -d[:, 0] * s + d[:, 1] * c
        return (np.abs(lx) <= box[3] / 2) & (np.abs(ly) <= box[4] / 2)

    r = max(np.hypot(a[3], a[4]), np.hypot(b[3], b[4])) / 2
    lo = np.minimum(a[:2], b[:2]) - r
    hi = np.maximum(a[:2], b[:2]) + r
    p = rng.uniform(lo, hi, size=(n, 2))
    ia, ib = inside(p, a), inside(p, b)
    u = (ia | ib).sum()
    return (ia & ib).sum() / u if u else 0.0


def random_pair(rng):
    a = np.array([*rng.uniform(-1, 1, 2), 0, *rng.uniform(0.5, 3, 2), 1, rng.uniform(-np.pi, np.pi)])
    b = a.copy()
    b[:2] += rng.uniform(-1.5, 1.5, 2)
    b[3:5] = rng.uniform(0.5, 3, 2)
    b[6] = rng.uniform(-np.pi, np.pi)
    return a, b


def test_identical_boxes_iou_one():
    b = np.array([1.0, 2.0, 0.0, 4.0, 2.0, 1.5, 0.3])
    assert bev_iou(b, b) == pytest.approx(1.0, abs=1e-9)
    assert iou3d(b, b) == pytest.approx(1.0, abs=1e-9)


def test_half_offset_squares():
    a = np.array([0, 0, 0, 2, 2, 1, 0.0])
    b = np.array([1, 0, 0, 2, 2, 1, 0.0])
    assert bev_iou(a, b) == pytest.approx(1 / 3, abs=1e-12)
    c = b.copy()
    c[2] = 0.5  # half the height overlaps: intersection 1, union 4 + 4 - 1
    assert iou3d(a, c) == pytest.approx(1.0 / 7.0, abs=1e-12)


def test_disjoint_and_degenerate_are_zero():
    a = np.array([0, 0, 0, 2, 2, 1, 0.0])
    assert bev_iou(a, a + [10, 0, 0, 0, 0, 0, 0]) == 0.0
    flat = a.copy()
    flat[3] = 0.0
    assert bev_iou(a, flat) == 0.0
    assert iou3d_matrix(np.zeros((0, 7)), a).shape == (0, 1)


def test_bev_iou_matches_monte_carlo():
    rng = np.random.default_rng(0)
    for _ in range(60):
        a, b = random_pair(rng)
        assert abs(bev_iou(a, b) - mc_bev_iou(a, b, rng)) < 0.01


def test_iou3d_matches_monte_carlo():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a, b = random_pair(rng)
        a[5], b[5] = rng.uniform(0.5, 2, 2)
        b[2] = rng.uniform(-1, 1)
        n = 200_000
        # tight sampling box so the union holds enough samples
        r = max(np.hypot(a[3], a[4]), np.hypot(b[3], b[4])) / 2
        lo = np.array([*np.minimum(a[:2], b[:2]) - r, min(a[2] - a[5] / 2, b[2] - b[5] / 2)])
        hi = np.array([*np.maximum(a[:2], b[:2]) + r, max(a[2] + a[5] / 2, b[2] + b[5] / 2)])
        p = rng.uniform(lo, hi, size=(n, 3))

        def inside(box):
            c, s = np.cos(box[6]), np.sin(box[6])
            d = p - box[:3]
            lx = d[:, 0] * c + d[:, 1] * s
            ly = -d[:, 0] * s + d[:, 1] * c
            return (np.abs(lx) <= box[3] / 2) & (np.abs(ly) <= box[4] / 2) & (np.abs(d[:, 2]) <= box[5] / 2)

        ia, ib = inside(a), inside(b)
        mc = (ia & ib).sum() / max((ia | ib).sum(), 1)
        assert abs(iou3d(a, b) - mc) < 0.01


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_iou_symmetric_and_rigid_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = random_pair(rng)
    assert bev_iou(a, b) == pytest.approx(bev_iou(b, a), abs=1e-9)
    th = rng.uniform(-np.pi, np.pi)
    t = rng.uniform(-5, 5, 2)
    R = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])

    def move(x):
        y = x.copy()
        y[:2] = R @ x[:2] + t
        y[6] = x[6] + th
        return y

    assert bev_iou(move(a), move(b)) == pytest.approx(bev_iou(a, b), abs=1e-7)


def frame(boxes, classes=None, scores=None):
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 7)
    classes = np.full(len(boxes), CAR) if classes is None else classes
    return FrameBoxes(boxes, classes, scores)


def unit_box(x, y=0.0):
    return [x, y, 0.0, 4.0, 2.0, 1.5, 0.0]


def test_perfect_and_empty_detections():
    gt = [frame([unit_box(10), unit_box(20, 3)])]
    assert average_precision([frame(gt[0].boxes, scores=[0.9, 0.8])], gt, CAR) == pytest.approx(1.0)
    assert average_precision([frame(np.zeros((0, 7)), scores=[])], gt, CAR) == 0.0


def test_hand_computed_ap():
    # scores 0.9 TP, 0.8 FP, 0.7 TP against two GT
    gt = [frame([unit_box(10), unit_box(20)])]
    det = [frame([unit_box(10), unit_box(40), unit_box(20)], scores=[0.9, 0.8, 0.7])]
    p, r, n = pr_curve(det, gt, CAR, EvalConfig())
    np.testing.assert_allclose(p, [1.0, 0.5, 2 / 3])
    np.testing.assert_allclose(r, [0.5, 0.5, 1.0])
    assert n == 2
    assert average_precision(det, gt, CAR, EvalConfig()) == pytest.approx((20 + 20 * 2 / 3) / 40)
    assert average_precision(det, gt, CAR, EvalConfig(recall_positions=11)) == pytest.approx((6 + 5 * 2 / 3) / 11)


def test_duplicate_detection_counts_once():
    gt = [frame([unit_box(10)])]
    det = [frame([unit_box(10), unit_box(10.1)], scores=[0.9, 0.8])]
    p, r, _ = pr_curve(det, gt, CAR, EvalConfig())
    np.testing.assert_allclose(r, [1.0, 1.0])
    np.testing.assert_allclose(p, [1.0, 0.5])


def test_interpolation_takes_max_to_the_right():
    p = np.array([1.0, 0.2, 0.9])
    r = np.array([0.3, 0.5, 1.0])
    assert interpolated_ap(p, r, 40) == pytest.approx(np.mean([1.0] * 12 + [0.9] * 28))


def test_class_without_gt_is_skipped():
    gt = [frame([unit_box(10)])]
    m, per = mean_ap([frame([unit_box(10)], scores=[1.0])], gt)
    assert m == pytest.approx(1.0)
    assert np.isnan(per["Truck"])


def test_proposal_recall_two_of_three():
    gt = [frame([unit_box(10), unit_box(20), unit_box(30)])]
    props = [frame([unit_box(10.2), unit_box(20.1), unit_box(45)])]
    assert proposal_recall(props, gt, 0.25) == pytest.approx(2 / 3)


def test_corridor_convention():
    # camera frame x_cam = -y, z_cam = x
    b = np.array([unit_box(10, 0), unit_box(10, 5), unit_box(30, 0), unit_box(10, -3.9), unit_box(-1, 0)])
    assert region_mask(b, "corridor").tolist() == [True, False, False, True, False]
    assert region_mask(b, "entire").all()
    assert count_gt([frame(b)], "corridor") == 2


def test_ap_monotone_in_threshold():
    rng = np.random.default_rng(3)
    gt = [frame([unit_box(10 + 5 * i, rng.uniform(-3, 3)) for i in range(4)]) for _ in range(3)]
    det = [frame(g.boxes + rng.normal(0, 0.3, g.boxes.shape) * [1, 1, 0.2, 0.2, 0.2, 0.2, 0.1],
                 scores=rng.uniform(0.2, 1, len(g))) for g in gt]
    aps = [average_precision(det, gt, CAR, EvalConfig({ObjectClass.Car: t})) for t in (0.1, 0.3, 0.5, 0.7, 0.9)]
    assert all(a >= b - 1e-12 for a, b in zip(aps, aps[1:]))


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        EvalConfig(recall_positions=20)
    with pytest.raises(ValueError):
        EvalConfig({ObjectClass.Car: 0.0})


def test_detection_file_round_trip(tmp_path):
    f = frame([unit_box(10), unit_box(12, 1)], classes=np.array([0, 3]), scores=[0.5, 0.25])
    write_detections(tmp_path / "d.txt", f)
    g = read_detections(tmp_path / "d.txt")
    np.testing.assert_allclose(g.boxes, f.boxes)
    assert g.classes.tolist() == [0, 3]
    (tmp_path / "bad.txt").write_text("Car 0.5 1 2 3\n")
    with pytest.raises(ValueError, match=":1:"):
        read_detections(tmp_path / "bad.txt")


def test_evaluate_self_and_report(tmp_path):
    rng = np.random.default_rng(4)
    gts = [frame([unit_box(rng.uniform(5, 20), rng.uniform(-3, 3))], classes=np.array([c])) for c in range(4)]
    dets = [FrameBoxes(g.boxes, g.classes, np.ones(len(g))) for g in gts]
    for region in ("entire", "corridor"):
        res = evaluate(dets, gts, EvalConfig(region=region), proposals=gts)
        assert res["mAP_3d"] == pytest.approx(1.0)
        assert res["mAP_bev"] == pytest.approx(1.0)
        assert res["proposal_recall"] == 1.0
    files = write_report(res, tmp_path)
    assert len(files) == 5 and all(p.exists() for p in files)
