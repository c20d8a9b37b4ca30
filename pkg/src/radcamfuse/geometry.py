"""Coordinate transforms: camera projection, voxel/BEV indexing, oriented boxes.

World frame is the radar frame: x forward, y left, z up. Boxes rotate about z;
``yaw`` is measured counter-clockwise from +x and ``l`` lies along the heading.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import Tensor
from .tensor.core import make


class PointBehindCamera(ValueError):
    """Homogeneous depth is not positive."""


class ObjectClass(enum.IntEnum):
    Car = 0
    Pedestrian = 1
    Cyclist = 2
    Truck = 3


CLASS_NAMES = [c.name for c in ObjectClass]


def normalize_yaw(yaw):
    """Wrap to (-pi, pi]."""
    y = np.mod(np.asarray(yaw, dtype=np.float64) + np.pi, 2 * np.pi) - np.pi
    y = np.where(y <= -np.pi, y + 2 * np.pi, y)
    return float(y) if np.ndim(y) == 0 else y


@dataclass
class Calibration:
    """3x4 camera projection matrix (intrinsics times extrinsics)."""

    T: np.ndarray

    def __post_init__(self):
        self.T = np.asarray(self.T, dtype=np.float64).reshape(3, 4)

    def to_text(self) -> str:
        return " ".join(f"{v:.9g}" for v in self.T.ravel()) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<calib>") -> "Calibration":
        vals = text.split()
        if len(vals) != 12:
            raise ValueError(f"{source}:1: expected 12 reals, got {len(vals)}")
        try:
            return cls(np.array([float(v) for v in vals]))
        except ValueError as exc:
            raise ValueError(f"{source}:1: {exc}") from None

    def back_project(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        """World points whose projection is ``uv`` at homogeneous depth ``depth``."""
        M = self.T[:, :3]
        t = self.T[:, 3]
        h = np.concatenate([uv * depth[:, None], depth[:, None]], axis=1) - t
        return np.linalg.solve(M, h.T).T


@dataclass(frozen=True)
class GridSpec:
    x_min: float = 0.0
    y_min: float = -25.6
    z_min: float = -3.0
    x_max: float = 51.2
    y_max: float = 25.6
    z_max: float = 2.0
    x_size: float = 0.05
    y_size: float = 0.05
    z_size: float = 0.1

    def __post_init__(self):
        for a in "xyz":
            lo, hi, sz = getattr(self, f"{a}_min"), getattr(self, f"{a}_max"), getattr(self, f"{a}_size")
            if not hi > lo:
                raise ValueError(f"GridSpec: {a}_max must exceed {a}_min")
            if not sz > 0:
                raise ValueError(f"GridSpec: {a}_size must be positive")
            n = (hi - lo) / sz
            if abs(n - round(n)) > 1e-6:
                raise ValueError(f"GridSpec: {a} extent is not a whole number of cells")

    @property
    def shape(self):
        """Cell counts (nx, ny, nz)."""
        return tuple(int(round((getattr(self, f"{a}_max") - getattr(self, f"{a}_min"))
                               / getattr(self, f"{a}_size"))) for a in "xyz")

    @property
    def mins(self):
        return np.array([self.x_min, self.y_min, self.z_min])

    @property
    def maxs(self):
        return np.array([self.x_max, self.y_max, self.z_max])

    @property
    def sizes(self):
        return np.array([self.x_size, self.y_size, self.z_size])

    def coarsen(self, factor: int, z_factor: int | None = None) -> "GridSpec":
        zf = factor if z_factor is None else z_factor
        nz = self.shape[2]
        zf = min(zf, nz)
        z_size = (self.z_max - self.z_min) / max(1, nz // zf)
        return GridSpec(self.x_min, self.y_min, self.z_min, self.x_max, self.y_max, self.z_max,
                        self.x_size * factor, self.y_size * factor, z_size)

    def contains(self, pts) -> np.ndarray:
        p = np.asarray(pts)[:, :3]
        return ((p >= self.mins) & (p < self.maxs)).all(axis=1)


@dataclass
class Box3D:
    center: tuple
    size: tuple
    yaw: float
    class_id: ObjectClass = ObjectClass.Car
    score: float | None = None
    features: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        self.center = tuple(float(v) for v in self.center)
        self.size = tuple(float(v) for v in self.size)
        if min(self.size) <= 0:
            raise ValueError("Box3D: l, w, h must be positive")
        self.yaw = normalize_yaw(self.yaw)
        self.class_id = ObjectClass(int(self.class_id))
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise ValueError("Box3D: score must lie in [0, 1]")

    def as_array(self) -> np.ndarray:
        return np.array([*self.center, *self.size, self.yaw])

    @classmethod
    def from_array(cls, a, class_id=ObjectClass.Car, score=None) -> "Box3D":
        return cls(tuple(a[:3]), tuple(a[3:6]), float(a[6]), class_id, score)


def boxes_to_array(boxes) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 7))
    return np.stack([b.as_array() for b in boxes])


def bev_boxes(arr: np.ndarray) -> np.ndarray:
    """[N, 7] -> [N, 5] (x, y, l, w, yaw)."""
    return np.ascontiguousarray(arr[:, [0, 1, 3, 4, 6]], dtype=np.float64)


# ------------------------------------------------------------------ projection

def project_to_image(p, calib: Calibration):
    """Pixel (u, v) of one world point; raises PointBehindCamera if w <= 0."""
    h = calib.T @ np.append(np.asarray(p, dtype=np.float64)[:3], 1.0)
    if h[2] <= 0:
        raise PointBehindCamera(f"point {tuple(p)} has homogeneous depth {h[2]:.4g}")
    return h[0] / h[2], h[1] / h[2]


def project_points(pts: np.ndarray, calib: Calibration):
    """Vectorised projection; returns ``uv[N, 2]`` and a ``valid`` mask (w > 0)."""
    pts = np.asarray(pts, dtype=np.float64)[:, :3]
    h = pts @ calib.T[:, :3].T + calib.T[:, 3]
    valid = h[:, 2] > 0
    w = np.where(valid, h[:, 2], 1.0)
    return h[:, :2] / w[:, None], valid


def project_points_tensor(p: Tensor, calib: Calibration) -> Tensor:
    """Differentiable projection of ``p[N, 3]``. Rows behind the camera map to (0, 0)."""
    M = calib.T[:, :3].astype(p.data.dtype)
    t = calib.T[:, 3].astype(p.data.dtype)
    h = p.data @ M.T + t
    valid = h[:, 2] > 0
    w = np.where(valid, h[:, 2], 1.0)
    uv = np.where(valid[:, None], h[:, :2] / w[:, None], 0.0)

    def bw(g):
        g = np.where(valid[:, None], g, 0.0)
        # d(u)/dh = (1/w, 0, -u/w), d(v)/dh = (0, 1/w, -v/w)
        gh = np.stack([g[:, 0] / w, g[:, 1] / w, -(g[:, 0] * uv[:, 0] + g[:, 1] * uv[:, 1]) / w], axis=1)
        p._accum(gh @ M)

    return make(uv.astype(p.data.dtype), (p,), bw)


# ------------------------------------------------------------------ voxels / BEV

def _cell_index(coord, lo, size):
    q = (np.asarray(coord, dtype=np.float64) - lo) / size
    # rounding guard so that coordinates on a boundary land in the upper cell
    return np.floor(np.round(q, 9)).astype(np.int64)


def voxel_indices(pts: np.ndarray, grid: GridSpec):
    """Per-point (ix, iy, iz) and an in-range mask."""
    pts = np.asarray(pts, dtype=np.float64)
    if pts.size == 0:
        return np.zeros((0, 3), dtype=np.int64), np.zeros(0, dtype=bool)
    idx = np.stack([_cell_index(pts[:, i], grid.mins[i], grid.sizes[i]) for i in range(3)], axis=1)
    ok = ((idx >= 0) & (idx < np.array(grid.shape))).all(axis=1)
    return idx, ok


def voxelize(points: np.ndarray, grid: GridSpec):
    """Map voxel index -> list of point indices; also returns the dropped count."""
    idx, ok = voxel_indices(points, grid)
    vox: dict = {}
    for i in np.nonzero(ok)[0]:
        vox.setdefault(tuple(int(v) for v in idx[i]), []).append(int(i))
    return vox, int((~ok).sum())


def bev_project(xy, grid: GridSpec):
    """Continuous BEV cell coordinates (u, v) of world (x, y)."""
    xy = np.asarray(xy, dtype=np.float64)
    u = (xy[..., 0] - grid.x_min) / grid.x_size
    v = (xy[..., 1] - grid.y_min) / grid.y_size
    return np.stack([u, v], axis=-1)


def bev_unproject(uv, grid: GridSpec):
    uv = np.asarray(uv, dtype=np.float64)
    return np.stack([uv[..., 0] * grid.x_size + grid.x_min, uv[..., 1] * grid.y_size + grid.y_min], axis=-1)


# ------------------------------------------------------------------ boxes

def to_box_frame(pts: np.ndarray, box) -> np.ndarray:
    b = box.as_array() if isinstance(box, Box3D) else np.asarray(box)
    d = np.asarray(pts, dtype=np.float64)[:, :3] - b[:3]
    c, s = np.cos(b[6]), np.sin(b[6])
    return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)


def points_in_box(points: np.ndarray, box) -> np.ndarray:
    b = box.as_array() if isinstance(box, Box3D) else np.asarray(box, dtype=np.float64)
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64)[:, :3])
    return np.nonzero(kernels.points_in_boxes(pts, b[None, :].astype(np.float64))[0])[0]


def box_grid_local(size, U: int) -> np.ndarray:
    """Lattice centres in the box frame, x-major then y then z."""
    l, w, h = size
    t = (np.arange(U) + 0.5) / U - 0.5
    gx, gy, gz = np.meshgrid(t * l, t * w, t * h, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def box_grid_centers(box, U: int) -> np.ndarray:
    """World coordinates of the U^3 lattice cell centres of ``box``."""
    if U < 1:
        raise ValueError("U must be >= 1")
    b = box.as_array() if isinstance(box, Box3D) else np.asarray(box, dtype=np.float64)
    loc = box_grid_local(b[3:6], U)
    c, s = np.cos(b[6]), np.sin(b[6])
    x = c * loc[:, 0] - s * loc[:, 1] + b[0]
    y = s * loc[:, 0] + c * loc[:, 1] + b[1]
    return np.stack([x, y, loc[:, 2] + b[2]], axis=1)


def box_grid_cell_index(pts: np.ndarray, box, U: int) -> np.ndarray:
    """Flat lattice cell id (x-major) of each point, -1 when the point is outside the box."""
    b = box.as_array() if isinstance(box, Box3D) else np.asarray(box, dtype=np.float64)
    loc = to_box_frame(pts, b)
    out = np.full(loc.shape[0], -1, dtype=np.int64)
    inside = (np.abs(loc) <= b[3:6] * 0.5).all(axis=1)
    frac = (loc + b[3:6] * 0.5) / (b[3:6] / U)
    cell = np.clip(np.floor(np.round(frac, 9)).astype(np.int64), 0, U - 1)
    flat = cell[:, 0] * U * U + cell[:, 1] * U + cell[:, 2]
    out[inside] = flat[inside]
    return out


def box_corners(box) -> np.ndarray:
    """8 world-frame corners, bottom face first (counter-clockwise), then top."""
    b = box.as_array() if isinstance(box, Box3D) else np.asarray(box, dtype=np.float64)
    l, w, h = b[3:6] * 0.5
    loc = np.array([[l, w, -h], [-l, w, -h], [-l, -w, -h], [l, -w, -h],
                    [l, w, h], [-l, w, h], [-l, -w, h], [l, -w, h]])
    c, s = np.cos(b[6]), np.sin(b[6])
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return loc @ R.T + b[:3]


def rigid_transform(pts: np.ndarray, yaw: float, t) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    return np.asarray(pts, dtype=np.float64)[:, :3] @ R.T + np.asarray(t, dtype=np.float64)


def transform_box(box: Box3D, yaw: float, t) -> Box3D:
    c = rigid_transform(np.array([box.center]), yaw, t)[0]
    return Box3D(tuple(c), box.size, box.yaw + yaw, box.class_id, box.score)
