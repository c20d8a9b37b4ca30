"""Small dense encoders that produce the radar/camera feature pyramid.

BEV maps are ``[ny, nx, C]``: row index follows y, column index follows x, so a
continuous BEV coordinate ``(u, v)`` from :func:`geometry.bev_project` samples
column ``u`` and row ``v``. Cell centres sit at half-integer ``(u, v)``; the
sampling node of cell ``i`` is therefore ``u - 0.5``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .geometry import Calibration, GridSpec, voxel_indices
from .tensor import Conv2d, Linear, Module, Tensor, get_dtype, ops

N_VOXEL_STATS = 6  # mean (dx, dy, dz, doppler, rcs) + log point count


@dataclass
class RadarVoxels:
    """Sparse voxel features at the fine radar scale.

    ``coords[V, 3]`` voxel indices, ``features[V, C]`` and ``point_voxel[N]``
    (row into ``features`` per input point, -1 for points out of range).
    """

    coords: np.ndarray
    features: Tensor
    point_voxel: np.ndarray


@dataclass
class FeaturePyramid:
    radar_voxel: RadarVoxels
    radar_bev: list
    cam_fv: Tensor
    cam_bev: Tensor


def voxel_stats(points: np.ndarray, grid: GridSpec):
    """Per-voxel mean of centre-relative position and measurements, plus log count.

    Returns ``coords[V, 3]``, ``stats[V, 6]`` and ``point_voxel[N]``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 5)
    idx, ok = voxel_indices(pts[:, :3], grid)
    point_voxel = np.full(pts.shape[0], -1, dtype=np.int64)
    if not ok.any():
        return np.zeros((0, 3), dtype=np.int64), np.zeros((0, N_VOXEL_STATS)), point_voxel
    nx, ny, nz = grid.shape
    flat = (idx[ok, 0] * ny + idx[ok, 1]) * nz + idx[ok, 2]
    uniq, inv = np.unique(flat, return_inverse=True)
    point_voxel[ok] = inv
    V = uniq.size
    coords = np.stack([uniq // (ny * nz), (uniq // nz) % ny, uniq % nz], axis=1)
    centre = grid.mins + (coords + 0.5) * grid.sizes
    sel = pts[ok]
    rel = np.concatenate([(sel[:, :3] - centre[inv]) / grid.sizes, sel[:, 3:5]], axis=1)
    count = np.bincount(inv, minlength=V).astype(np.float64)
    sums = np.stack([np.bincount(inv, weights=rel[:, c], minlength=V) for c in range(5)], axis=1)
    stats = np.concatenate([sums / count[:, None], np.log1p(count)[:, None]], axis=1)
    # doppler in m/s and rcs in dBsm are brought to O(1)
    stats[:, 3] /= 5.0
    stats[:, 4] /= 10.0
    return coords, stats, point_voxel


class RadarEncoder(Module):
    """Voxel features -> height-collapsed BEV -> three stride-doubling scales.

    Convolutions carry no bias so an empty cloud gives an all-zero pyramid.
    """

    def __init__(self, grid: GridSpec, c_voxel: int, channels, rng):
        self.grid = grid
        self.voxel_fc = Linear(N_VOXEL_STATS, c_voxel, rng)
        c0, c1, c2 = channels
        self.conv0 = Conv2d(c_voxel, c0, 3, rng, bias=False)
        self.conv1 = Conv2d(c0, c1, 3, rng, stride=2, bias=False)
        self.conv2 = Conv2d(c1, c2, 3, rng, stride=2, bias=False)
        self.channels = tuple(channels)
        self.c_voxel = c_voxel

    def __call__(self, points: np.ndarray):
        nx, ny, _ = self.grid.shape
        coords, stats, pv = voxel_stats(points, self.grid)
        feats = ops.relu(self.voxel_fc(Tensor(stats.astype(get_dtype()))))
        cell = coords[:, 1] * nx + coords[:, 0]
        bev = ops.reshape(ops.scatter_rows(feats, cell, ny * nx), (ny, nx, self.c_voxel))
        b0 = ops.relu(self.conv0(bev))
        b1 = ops.relu(self.conv1(b0))
        b2 = ops.relu(self.conv2(b1))
        return RadarVoxels(coords, feats, pv), [b0, b1, b2]


class CameraEncoder(Module):
    """Four 3x3 conv blocks, strides 2, 2, 1, 1: front-view features at 1/4 resolution."""

    def __init__(self, image_hw, c_img: int, rng):
        self.image_hw = tuple(image_hw)
        half = max(c_img // 2, 4)
        self.c1 = Conv2d(3, half, 3, rng, stride=2)
        self.c2 = Conv2d(half, c_img, 3, rng, stride=2)
        self.c3 = Conv2d(c_img, c_img, 3, rng)
        self.c4 = Conv2d(c_img, c_img, 3, rng)

    def __call__(self, image) -> Tensor:
        img = image if isinstance(image, Tensor) else None
        if img is None:
            arr = np.asarray(image)
            if arr.shape[:2] != self.image_hw:
                raise ValueError(f"camera_encode: expected image {self.image_hw}, got {arr.shape[:2]}")
            img = Tensor(arr.astype(get_dtype()) / 255.0 - 0.5)
        elif img.shape[:2] != self.image_hw:
            raise ValueError(f"camera_encode: expected image {self.image_hw}, got {img.shape[:2]}")
        x = ops.relu(self.c1(img))
        x = ops.relu(self.c2(x))
        x = ops.relu(self.c3(x))
        return ops.relu(self.c4(x))


def depth_bin_centres(D: int, d_max: float, d_min: float = 1.0) -> np.ndarray:
    return d_min + (np.arange(D) + 0.5) * (d_max - d_min) / D


def bilinear_splat_weights(uv_node: np.ndarray, ny: int, nx: int):
    """Row/col/weight triplets that spread each point onto its 4 neighbouring cells."""
    u, v = uv_node[:, 0], uv_node[:, 1]
    x0, y0 = np.floor(u), np.floor(v)
    tx, ty = u - x0, v - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    src = np.arange(uv_node.shape[0])
    rows, cols, vals = [], [], []
    for dx, dy, w in ((0, 0, (1 - tx) * (1 - ty)), (1, 0, tx * (1 - ty)),
                      (0, 1, (1 - tx) * ty), (1, 1, tx * ty)):
        xx, yy = x0 + dx, y0 + dy
        ok = (xx >= 0) & (xx < nx) & (yy >= 0) & (yy < ny) & (w > 0)
        rows.append(yy[ok] * nx + xx[ok])
        cols.append(src[ok])
        vals.append(w[ok])
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def lift_matrix(calib: Calibration, grid: GridSpec, fv_hw, stride: int, depths: np.ndarray):
    """Sparse ``[ny*nx, Hf*Wf*D]`` matrix splatting frustum samples into BEV cells.

    Column ``(pixel * D + d)`` is the feature at FV pixel ``pixel`` placed at
    depth ``depths[d]`` along its ray. Samples outside the grid's z range or
    BEV extent are dropped.
    """
    Hf, Wf = fv_hw
    nx, ny, _ = grid.shape
    D = len(depths)
    jj, ii = np.meshgrid(np.arange(Wf), np.arange(Hf))
    uv_img = np.stack([(jj.ravel() + 0.5) * stride, (ii.ravel() + 0.5) * stride], axis=1)
    P = uv_img.shape[0]
    uv_rep = np.repeat(uv_img, D, axis=0)
    d_rep = np.tile(depths, P)
    xyz = calib.back_project(uv_rep, d_rep)
    zin = (xyz[:, 2] >= grid.z_min) & (xyz[:, 2] < grid.z_max)
    uvb = np.stack([(xyz[:, 0] - grid.x_min) / grid.x_size, (xyz[:, 1] - grid.y_min) / grid.y_size], axis=1) - 0.5
    r, c, w = bilinear_splat_weights(uvb, ny, nx)
    keep = zin[c]
    return sp.csr_matrix((w[keep], (r[keep], c[keep])), shape=(ny * nx, P * D))


class DepthLift(Module):
    """Categorical depth per FV pixel, outer product with context, splat to BEV."""

    def __init__(self, c_in: int, c_out: int, D: int, rng, d_max: float, d_min: float = 1.0):
        self.depth_head = Conv2d(c_in, D, 3, rng, gain=1.0)
        self.context = Conv2d(c_in, c_out, 1, rng)
        self.D = D
        self.c_out = c_out
        self.depths = depth_bin_centres(D, d_max, d_min)
        self._cache: dict = {}

    def matrix(self, calib: Calibration, grid: GridSpec, fv_hw, stride: int):
        key = (calib.T.tobytes(), grid, tuple(fv_hw), stride)
        S = self._cache.get(key)
        if S is None:
            S = lift_matrix(calib, grid, fv_hw, stride, self.depths).astype(get_dtype())
            self._cache[key] = S
        return S

    def depth_probs(self, cam_fv: Tensor) -> Tensor:
        Hf, Wf, _ = cam_fv.shape
        logits = ops.reshape(self.depth_head(cam_fv), (Hf * Wf, self.D))
        return ops.softmax(logits, axis=-1)

    def __call__(self, cam_fv: Tensor, calib: Calibration, grid: GridSpec, stride: int = 4,
                 probs: Tensor | None = None) -> Tensor:
        Hf, Wf, _ = cam_fv.shape
        nx, ny, _ = grid.shape
        if probs is None:
            probs = self.depth_probs(cam_fv)
        ctx = ops.reshape(self.context(cam_fv), (Hf * Wf, self.c_out))
        frustum = ops.reshape(ops.outer(probs, ctx), (Hf * Wf * self.D, self.c_out))
        S = self.matrix(calib, grid, (Hf, Wf), stride)
        if S.dtype != frustum.data.dtype:
            S = S.astype(frustum.data.dtype)
        return ops.reshape(ops.sparse_matmul(S, frustum), (ny, nx, self.c_out))
