"""Finite-difference checks of every differentiable block, on small random shapes in float64."""
from __future__ import annotations

import contextlib
import fnmatch
import time
from typing import Callable

import numpy as np

from .backbone import CameraEncoder, DepthLift, RadarEncoder
from .cmda import CMDA, FuseMLP
from .geometry import Calibration, GridSpec
from .rgiter import AnchorTargets, BEVFusion, rpn_loss
from .stage2 import (GridGuidedFusion, GridPositionEncoder, PointGuidedFusion, RefineHead, SelfAttention,
                     StageInputs, refine_loss, refine_targets)
from .tensor import LayerNorm, Tensor, grad_check, ops, precision, weighted
from .tensor.core import make

TOLERANCE = 1e-4

_GRID = GridSpec(0, -3.2, -3, 6.4, 3.2, 2, 0.8, 0.8, 5.0)  # 8 x 8 x 1
_BOX = np.array([[3.0, 0.2, 0.0, 2.0, 1.2, 1.4, 0.3]])


def _calib() -> Calibration:
    K = np.array([[20.0, 0, 16], [0, 20.0, 8], [0, 0, 1]])
    R = np.array([[0, -1, 0], [0, 0, -1], [1, 0, 0.0]])
    return Calibration(np.hstack([K @ R, np.zeros((3, 1))]))


def _proj(seed: int):
    return lambda out: weighted(out, np.random.default_rng(seed))


def _stage_inputs(rng, cv=2, ci=2, cf=2, n=5) -> StageInputs:
    b = _BOX[0]
    loc = rng.uniform(-0.4, 0.4, (n, 3)) * b[3:6]
    c, s = np.cos(b[6]), np.sin(b[6])
    xyz = np.stack([b[0] + c * loc[:, 0] - s * loc[:, 1], b[1] + s * loc[:, 0] + c * loc[:, 1], b[2] + loc[:, 2]], 1)
    pts = np.concatenate([xyz, rng.normal(size=(n, 2))], 1)
    return StageInputs(pts, Tensor(rng.normal(size=(n, cv))), np.arange(n), Tensor(rng.normal(size=(4, 8, ci))),
                       Tensor(rng.normal(size=(8, 8, cf))), _calib(), _GRID, 4)


def check_conv2d():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(5, 6, 3)))
    k = Tensor(rng.normal(size=(3, 3, 3, 2)))
    b = Tensor(rng.normal(size=2))
    p = _proj(1)
    return max(grad_check(lambda: p(ops.conv2d(x, k, b, stride=1, padding=1)), [x, k, b]),
               grad_check(lambda: p(ops.conv2d(x, k, b, stride=2, padding=1)), [x, k]))


def check_bilinear_sample():
    rng = np.random.default_rng(2)
    fmap = Tensor(rng.normal(size=(4, 5, 2)))
    # keep coordinates off the integer lattice where the interpolant has kinks
    coords = Tensor(np.floor(rng.uniform(-1, 5, size=(6, 2))) + rng.uniform(0.1, 0.9, size=(6, 2)))
    return grad_check(lambda: _proj(3)(ops.bilinear_sample(fmap, coords)), [fmap, coords])


def check_depth_lift():
    rng = np.random.default_rng(4)
    lift = DepthLift(2, 2, 4, rng, d_max=6.0)
    fv = Tensor(rng.normal(size=(2, 4, 2)))
    p = _proj(5)
    return grad_check(lambda: p(lift(fv, _calib(), _GRID, 8)), [fv, lift.depth_head.weight, lift.context.bias])


def check_encoders():
    rng = np.random.default_rng(6)
    cam = CameraEncoder((8, 8), 4, rng)
    img = Tensor(rng.normal(size=(8, 8, 3)))
    rad = RadarEncoder(_GRID, 3, (2, 2, 2), rng)
    pts = np.concatenate([rng.uniform([0.5, -3, -1], [6, 3, 1], (20, 3)), rng.normal(size=(20, 2))], 1)
    p = _proj(7)
    e1 = grad_check(lambda: p(cam(img)), [img, cam.c1.weight, cam.c4.bias])
    e2 = grad_check(lambda: p(ops.concat([ops.reshape(b, (-1, 1)) for b in rad(pts)[1]], axis=0)),
                    [rad.voxel_fc.weight, rad.conv1.weight])
    return max(e1, e2)


def check_rgiter():
    rng = np.random.default_rng(8)
    f = BEVFusion((2, 3, 2), 3, rng)
    cam = Tensor(rng.normal(size=(8, 8, 2)))
    rad = [Tensor(rng.normal(size=(8, 8, 2))), Tensor(rng.normal(size=(4, 4, 3))), Tensor(rng.normal(size=(2, 2, 2)))]
    p = _proj(9)
    return grad_check(lambda: p(f(cam, rad)), [cam, rad[0], rad[1], rad[2], f.occ0.conv.weight, f.cam_down1.weight,
                                               f.fuse2.weight, f.merge.weight])


def check_cmda():
    rng = np.random.default_rng(10)
    m = CMDA(3, 2, rng, heads=2, points=2, c_head=2)
    m.offsets.weight.data[:] = rng.normal(0, 0.5, m.offsets.weight.shape)
    m.offsets.bias.data[:] = rng.normal(0, 0.7, m.offsets.bias.shape)
    q = Tensor(rng.normal(size=(3, 3)))
    fmap = Tensor(rng.normal(size=(5, 5, 2)))
    ref = Tensor(rng.uniform(0.5, 3.5, size=(3, 2)))
    fm = FuseMLP(3, 3, rng)
    p = _proj(11)
    e1 = grad_check(lambda: p(m(q, ref, fmap)), [q, fmap, ref, m.value.weight, m.offsets.weight, m.attn.bias,
                                                  m.out.weight])
    e2 = grad_check(lambda: p(fm(q, m(q, ref, fmap))), [q, fm.mlp.fc1.weight])
    return max(e1, e2)


def check_pgf():
    rng = np.random.default_rng(12)
    x = _stage_inputs(rng)
    pgf = PointGuidedFusion(2, 2, 3, rng, U=2, heads=1, points=2)
    return grad_check(lambda: _proj(13)(pgf(_BOX, x)), [x.voxel_feats, x.cam_fv, pgf.point_fc.weight,
                                                         pgf.fuse.mlp.fc2.weight])


def check_gpe():
    rng = np.random.default_rng(14)
    x = _stage_inputs(rng)
    gpe = GridPositionEncoder(4, rng, U=2)
    enc = GridPositionEncoder.inputs(_BOX, x.points, 2, _GRID)
    return grad_check(lambda: _proj(15)(gpe(enc)), [gpe.mlp.fc1.weight, gpe.mlp.fc2.bias])


def check_ggf():
    rng = np.random.default_rng(16)
    x = _stage_inputs(rng)
    ggf = GridGuidedFusion(2, 2, 4, rng, U=2, heads=1, points=2)
    # spread the sampling points, otherwise the attention weights see identical values
    for m in (ggf.cmda_fv, ggf.cmda_bev):
        m.offsets.bias.data[:] = rng.normal(0, 0.7, m.offsets.bias.shape)
    return grad_check(lambda: _proj(17)(ggf(_BOX, x)), [x.cam_fv, x.fb, ggf.cmda_fv.attn.weight,
                                                         ggf.fuse_bev.mlp.fc1.weight])


def check_self_attention():
    rng = np.random.default_rng(18)
    sa = SelfAttention(4, rng, heads=2)
    x = Tensor(rng.normal(size=(2, 3, 4)))
    ln = LayerNorm(4)
    return max(grad_check(lambda: _proj(19)(sa(x)), [x, sa.qkv.weight, sa.proj.weight, sa.norm.gamma]),
               grad_check(lambda: _proj(20)(ln(x)), [x]))


def check_refine_head():
    rng = np.random.default_rng(21)
    head = RefineHead(4, 3, rng, hidden=8)
    f = Tensor(rng.normal(size=(2, 4, 3)))

    def out():
        c, d = head(f)
        return ops.add(_proj(22)(c), _proj(23)(d))

    return grad_check(out, [f, head.fc.weight, head.cls.fc2.weight, head.reg.fc1.bias])


def check_losses():
    rng = np.random.default_rng(24)
    n = 10
    labels = rng.integers(-1, 2, n)
    pos = np.nonzero(labels == 1)[0]
    t = AnchorTargets(labels, rng.normal(size=(pos.size, 7)), pos, np.arange(pos.size))
    logits = Tensor(rng.normal(size=n))
    reg = Tensor(rng.normal(size=(n, 7)))
    e1 = grad_check(lambda: rpn_loss(logits, reg, t)[0], [logits, reg])
    props = _BOX + rng.normal(0, 0.1, (3, 7))
    rt = refine_targets(props, _BOX, 0.3)
    c, d = Tensor(rng.normal(size=3)), Tensor(rng.normal(size=(3, 7)))
    e2 = grad_check(lambda: refine_loss(c, d, rt)[0], [c, d])
    return max(e1, e2)


SUITE: dict[str, Callable[[], float]] = {
    "conv2d": check_conv2d,
    "bilinear_sample": check_bilinear_sample,
    "depth_lift": check_depth_lift,
    "encoders": check_encoders,
    "rgiter": check_rgiter,
    "cmda": check_cmda,
    "pgf": check_pgf,
    "gpe": check_gpe,
    "ggf": check_ggf,
    "self_attention": check_self_attention,
    "refine_head": check_refine_head,
    "losses": check_losses,
}


@contextlib.contextmanager
def corrupted_sigmoid():
    """Swap in a sigmoid whose backward drops the (1 - s) factor; used as a negative control."""
    good = ops.sigmoid

    def bad(a):
        y = good(a).data
        return make(y, (a,), lambda g: a._accum(g * y))

    ops.sigmoid = bad
    try:
        yield
    finally:
        ops.sigmoid = good


def select(patterns=None) -> list:
    names = list(SUITE)
    if not patterns:
        return names
    out = [n for n in names if any(fnmatch.fnmatch(n, p) for p in patterns)]
    if not out:
        raise ValueError(f"no gradient checks match {list(patterns)}")
    return out


def run_suite(patterns=None, corrupt: bool = False, tol: float = TOLERANCE) -> list:
    """Returns rows ``(name, max_rel_error, seconds, passed)``."""
    names = select(patterns)
    rows = []
    ctx = corrupted_sigmoid() if corrupt else contextlib.nullcontext()
    with precision("float64"), ctx:
        for n in names:
            t0 = time.time()
            err = SUITE[n]()
            rows.append((n, err, time.time() - t0, err < tol))
    return rows


def format_table(rows) -> str:
    lines = [f"{'check':<16} {'max rel err':>12} {'time s':>7}  result"]
    for n, e, t, ok in rows:
        lines.append(f"{n:<16} {e:>12.3e} {t:>7.2f}  {'PASS' if ok else 'FAIL'}")
    return "\n".join(lines)
