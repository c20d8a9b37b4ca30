"""Synthetic radar + camera scenes and the KITTI-like dataset layout.

Per frame::

    points/NNNNNN.txt   x y z doppler rcs
    labels/NNNNNN.txt   class x y z l w h yaw
    calib/NNNNNN.txt    12 reals, row-major 3x4
    image/NNNNNN.ppm    binary P6

plus ``dataset.json`` listing frame ids, split, grid spec and class names.
"""
from __future__ import annotations

import dataclasses
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import (CLASS_NAMES, Box3D, Calibration, GridSpec, ObjectClass, bev_boxes, box_corners,
                       boxes_to_array, project_points)
from . import kernels

GROUND_Z = -1.5

# (l, w, h) priors and per-class radar statistics
SIZE_PRIOR = {
    ObjectClass.Car: (3.9, 1.6, 1.56),
    ObjectClass.Pedestrian: (0.8, 0.6, 1.73),
    ObjectClass.Cyclist: (1.76, 0.6, 1.73),
    ObjectClass.Truck: (6.5, 2.5, 3.0),
}
RCS_PRIOR = {  # dBsm mean, sigma
    ObjectClass.Car: (10.0, 3.0),
    ObjectClass.Pedestrian: (-5.0, 2.0),
    ObjectClass.Cyclist: (0.0, 2.0),
    ObjectClass.Truck: (15.0, 3.0),
}
MAX_SPEED = {ObjectClass.Car: 10.0, ObjectClass.Pedestrian: 1.5, ObjectClass.Cyclist: 5.0, ObjectClass.Truck: 8.0}
CLASS_COLOR = {
    ObjectClass.Car: (200, 40, 40),
    ObjectClass.Pedestrian: (40, 200, 60),
    ObjectClass.Cyclist: (40, 80, 220),
    ObjectClass.Truck: (220, 200, 40),
}

DESK_GRID = GridSpec(0.0, -12.8, -3.0, 25.6, 12.8, 2.0, 0.05, 0.05, 0.1)


class DatasetFormatError(ValueError):
    pass


@dataclass
class RadarPointCloud:
    """N x 5 array of (x, y, z, doppler, rcs)."""

    data: np.ndarray = field(default_factory=lambda: np.zeros((0, 5)))

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64).reshape(-1, 5)
        if not np.isfinite(self.data).all():
            raise ValueError("RadarPointCloud: non-finite values")

    def __len__(self):
        return self.data.shape[0]

    @property
    def xyz(self):
        return self.data[:, :3]

    @property
    def measurements(self):
        return self.data[:, 3:5]


@dataclass
class Scene:
    frame_id: int
    boxes: list
    cloud: RadarPointCloud
    image: np.ndarray  # uint8 [H, W, 3]
    calib: Calibration

    def box_array(self):
        return boxes_to_array(self.boxes)

    def class_array(self):
        return np.array([int(b.class_id) for b in self.boxes], dtype=np.int64)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (self.frame_id == other.frame_id and self.boxes == other.boxes
                and np.array_equal(self.cloud.data, other.cloud.data)
                and np.array_equal(self.image, other.image)
                and np.array_equal(self.calib.T, other.calib.T))


@dataclass
class SynthConfig:
    seed: int = 0
    n_scenes: int = 32
    val_fraction: float = 0.2
    boxes_per_scene: tuple = (3, 8)
    class_mix: tuple = (0.45, 0.25, 0.2, 0.1)
    points_per_object: tuple = (20.0, 6.0, 8.0, 35.0)
    points_jitter: bool = True
    clutter_rate: float = 60.0
    pos_sigma: float = 0.05
    size_sigma: float = 0.05
    doppler_rel_sigma: float = 0.05
    static_fraction: float = 0.5
    image_hw: tuple = (64, 128)
    hfov_deg: float = 90.0
    camera_offset: tuple = (0.0, 0.0, 0.0)
    grid: GridSpec = DESK_GRID

    def __post_init__(self):
        if abs(sum(self.class_mix) - 1.0) > 1e-9:
            raise ValueError("SynthConfig: class_mix must sum to 1")
        if min(self.points_per_object) < 0 or self.clutter_rate < 0 or self.pos_sigma < 0:
            raise ValueError("SynthConfig: rates and sigmas must be non-negative")
        if isinstance(self.grid, dict):
            self.grid = GridSpec(**self.grid)
        self.boxes_per_scene = tuple(self.boxes_per_scene)
        self.class_mix = tuple(self.class_mix)
        self.points_per_object = tuple(self.points_per_object)
        self.image_hw = tuple(self.image_hw)
        self.camera_offset = tuple(self.camera_offset)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["grid"] = dataclasses.asdict(self.grid)
        return d


def make_calibration(cfg: SynthConfig) -> Calibration:
    H, W = cfg.image_hw
    f = (W / 2) / np.tan(np.radians(cfg.hfov_deg) / 2)
    K = np.array([[f, 0, W / 2], [0, f, H / 2], [0, 0, 1.0]])
    # radar (x fwd, y left, z up) -> camera (x right, y down, z fwd)
    R = np.array([[0, -1, 0], [0, 0, -1], [1, 0, 0]], dtype=np.float64)
    t = -R @ np.asarray(cfg.camera_offset, dtype=np.float64)
    return Calibration(K @ np.concatenate([R, t[:, None]], axis=1))


def _q9(a):
    """Quantise to 9 significant digits so text files round-trip exactly."""
    a = np.asarray(a, dtype=np.float64)
    return np.array([float(f"{v:.9g}") for v in a.ravel()]).reshape(a.shape)


def _sample_boxes(cfg: SynthConfig, rng):
    g = cfg.grid
    n = int(rng.integers(cfg.boxes_per_scene[0], cfg.boxes_per_scene[1] + 1))
    half_fov = np.tan(np.radians(cfg.hfov_deg) / 2)
    boxes = []
    tries = 0
    while len(boxes) < n and tries < 50 * max(n, 1):
        tries += 1
        cls = ObjectClass(int(rng.choice(4, p=cfg.class_mix)))
        size = np.array(SIZE_PRIOR[cls]) * np.exp(rng.normal(0, cfg.size_sigma, 3))
        x = rng.uniform(g.x_min + 3.0, g.x_max - 2.0)
        ylim = min(x * half_fov * 0.85, g.y_max - 1.5)
        y = rng.uniform(max(-ylim, g.y_min + 1.5), ylim)
        yaw = rng.uniform(-np.pi, np.pi)
        cand = np.array([x, y, GROUND_Z + size[2] / 2, *size, yaw])
        if boxes:
            big = bev_boxes(np.stack([cand]))
            big[:, 2:4] += 0.6  # keep a gap between objects
            others = bev_boxes(boxes_to_array(boxes))
            if kernels.bev_intersection_matrix(big, others).max() > 0:
                continue
        boxes.append(Box3D(tuple(cand[:3]), tuple(cand[3:6]), float(cand[6]), cls))
    return boxes


def _visible_faces(box):
    """(centre, normal, tangent_u, tangent_v, area) for faces seen from the origin."""
    c = np.array(box.center)
    l, w, h = box.size
    cy, sy = np.cos(box.yaw), np.sin(box.yaw)
    fx = np.array([cy, sy, 0.0])
    fy = np.array([-sy, cy, 0.0])
    fz = np.array([0.0, 0.0, 1.0])
    faces = [
        (c + fx * l / 2, fx, fy * w, fz * h, w * h), (c - fx * l / 2, -fx, fy * w, fz * h, w * h),
        (c + fy * w / 2, fy, fx * l, fz * h, l * h), (c - fy * w / 2, -fy, fx * l, fz * h, l * h),
        (c + fz * h / 2, fz, fx * l, fy * w, l * w),
    ]
    out = []
    for ctr, nrm, tu, tv, area in faces:
        cosang = -np.dot(nrm, ctr) / np.linalg.norm(ctr)
        if cosang > 0.05:
            out.append((ctr, tu, tv, area * cosang))
    return out


def _object_points(box, n, cfg, rng, velocity):
    faces = _visible_faces(box)
    if n == 0 or not faces:
        return np.zeros((0, 5))
    wts = np.array([f[3] for f in faces])
    pick = rng.choice(len(faces), size=n, p=wts / wts.sum())
    a = rng.uniform(-0.5, 0.5, size=(n, 2))
    pts = np.empty((n, 3))
    for i, k in enumerate(pick):
        ctr, tu, tv, _ = faces[k]
        pts[i] = ctr + a[i, 0] * tu + a[i, 1] * tv
    pts += rng.normal(0, cfg.pos_sigma, size=pts.shape)
    radial = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    # multiplicative noise: a static target always reads zero doppler
    doppler = (radial @ velocity) * (1.0 + rng.normal(0, cfg.doppler_rel_sigma, n))
    mu, sd = RCS_PRIOR[box.class_id]
    rcs = rng.normal(mu, sd, n)
    return np.concatenate([pts, doppler[:, None], rcs[:, None]], axis=1)


def _clutter(cfg, rng):
    g = cfg.grid
    n = int(rng.poisson(cfg.clutter_rate)) if cfg.clutter_rate > 0 else 0
    xyz = np.stack([rng.uniform(g.x_min + 0.5, g.x_max, n), rng.uniform(g.y_min, g.y_max, n),
                    rng.uniform(GROUND_Z, GROUND_Z + 2.5, n)], axis=1)
    return np.concatenate([xyz, rng.normal(0, 0.3, (n, 1)), rng.normal(-10, 5, (n, 1))], axis=1)


def _fill_convex(img, poly, color):
    H, W, _ = img.shape
    x0 = max(int(np.floor(poly[:, 0].min())), 0)
    x1 = min(int(np.ceil(poly[:, 0].max())), W - 1)
    y0 = max(int(np.floor(poly[:, 1].min())), 0)
    y1 = min(int(np.ceil(poly[:, 1].max())), H - 1)
    if x1 < x0 or y1 < y0:
        return
    xs, ys = np.meshgrid(np.arange(x0, x1 + 1) + 0.5, np.arange(y0, y1 + 1) + 0.5)
    area = np.sum(poly[:, 0] * np.roll(poly[:, 1], -1) - np.roll(poly[:, 0], -1) * poly[:, 1])
    sgn = 1.0 if area > 0 else -1.0
    inside = np.ones(xs.shape, dtype=bool)
    for i in range(len(poly)):
        a, b = poly[i], poly[(i + 1) % len(poly)]
        cross = (b[0] - a[0]) * (ys - a[1]) - (b[1] - a[1]) * (xs - a[0])
        inside &= sgn * cross >= 0
    img[y0:y1 + 1, x0:x1 + 1][inside] = color


_FACES = [(0, 1, 2, 3), (4, 5, 6, 7), (0, 1, 5, 4), (1, 2, 6, 5), (2, 3, 7, 6), (3, 0, 4, 7)]


def render_image(boxes, calib: Calibration, cfg: SynthConfig, rng) -> np.ndarray:
    H, W = cfg.image_hw
    img = np.empty((H, W, 3), dtype=np.float64)
    # horizon row = projection of a far ground point
    horizon = project_points(np.array([[1e4, 0, GROUND_Z]]), calib)[0][0, 1]
    sky = np.arange(H)[:, None] < horizon
    img[:] = np.where(sky[..., None], np.array([150.0, 180.0, 210.0]), np.array([90.0, 90.0, 85.0]))
    img += rng.normal(0, 12.0, size=img.shape)
    cam = np.linalg.solve(calib.T[:, :3], -calib.T[:, 3])
    # painter's algorithm: far boxes first, back faces culled
    order = sorted(boxes, key=lambda b: -np.hypot(b.center[0], b.center[1]))
    for b in order:
        corners = box_corners(b)
        cam_depth = corners @ calib.T[2, :3] + calib.T[2, 3]
        if (cam_depth <= 0.1).any():
            continue
        uv, _ = project_points(corners, calib)
        base = np.array(CLASS_COLOR[b.class_id], dtype=np.float64)
        centre = np.array(b.center)
        for face in _FACES:
            ctr = corners[list(face)].mean(0)
            nrm = ctr - centre
            nrm /= np.linalg.norm(nrm)
            if np.dot(nrm, cam - ctr) <= 0:
                continue
            shade = 0.65 + 0.35 * abs(nrm[2]) + 0.1 * nrm[0]
            _fill_convex(img, uv[list(face)], base * shade)
    return np.clip(np.round(img), 0, 255).astype(np.uint8)


def generate_scene(cfg: SynthConfig, frame_id: int) -> Scene:
    """Pure function of ``(cfg, frame_id)``; the rng stream is seeded from both."""
    rng = np.random.default_rng([cfg.seed, frame_id])
    calib = make_calibration(cfg)
    boxes = _sample_boxes(cfg, rng)
    clouds = []
    for b in boxes:
        mean = cfg.points_per_object[int(b.class_id)]
        n = int(rng.poisson(mean)) if cfg.points_jitter else int(round(mean))
        if rng.uniform() < cfg.static_fraction:
            vel = np.zeros(3)
        else:
            speed = rng.uniform(0, MAX_SPEED[b.class_id]) * rng.choice([-1.0, 1.0])
            vel = speed * np.array([np.cos(b.yaw), np.sin(b.yaw), 0.0])
        clouds.append(_object_points(b, n, cfg, rng, vel))
    clouds.append(_clutter(cfg, rng))
    cloud = np.concatenate(clouds, axis=0)
    cloud = cloud[cfg.grid.contains(cloud)]
    image = render_image(boxes, calib, cfg, rng)
    q_boxes = [Box3D(tuple(_q9(b.center)), tuple(_q9(b.size)), float(_q9(b.yaw)), b.class_id) for b in boxes]
    return Scene(frame_id, q_boxes, RadarPointCloud(_q9(cloud)), image, Calibration(_q9(calib.T)))


# ------------------------------------------------------------------ file IO

def _fmt(v):
    return f"{v:.9g}"


def write_ppm(path, img: np.ndarray):
    H, W, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetFormatError(f"{path}:1: truncated PPM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6":
        raise DatasetFormatError(f"{path}:1: not a binary P6 file")
    W, H, maxv = (int(t) for t in tokens[1:])
    if maxv != 255:
        raise DatasetFormatError(f"{path}:1: only 8-bit PPM supported")
    pos += 1
    body = raw[pos:pos + W * H * 3]
    if len(body) != W * H * 3:
        raise DatasetFormatError(f"{path}:1: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(H, W, 3).copy()


def _read_rows(path, ncols, parse):
    rows = []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != ncols:
                raise DatasetFormatError(f"{path}:{ln}: expected {ncols} fields, got {len(parts)}")
            try:
                rows.append(parse(parts))
            except (ValueError, KeyError) as exc:
                raise DatasetFormatError(f"{path}:{ln}: {exc}") from None
    return rows


def save_scene(root, scene: Scene) -> None:
    root = Path(root)
    stem = f"{scene.frame_id:06d}"
    for sub in ("points", "labels", "calib", "image"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    with open(root / "points" / f"{stem}.txt", "w") as fh:
        for row in scene.cloud.data:
            fh.write(" ".join(_fmt(v) for v in row) + "\n")
    with open(root / "labels" / f"{stem}.txt", "w") as fh:
        for b in scene.boxes:
            vals = [*b.center, *b.size, b.yaw]
            fh.write(b.class_id.name + " " + " ".join(_fmt(v) for v in vals) + "\n")
    (root / "calib" / f"{stem}.txt").write_text(scene.calib.to_text())
    write_ppm(root / "image" / f"{stem}.ppm", scene.image)


def load_labels(path) -> list:
    def parse(p):
        v = [float(x) for x in p[1:]]
        return Box3D(tuple(v[:3]), tuple(v[3:6]), v[6], ObjectClass[p[0]])

    return _read_rows(path, 8, parse)


def load_scene(root, frame_id: int) -> Scene:
    root = Path(root)
    stem = f"{frame_id:06d}"
    pts = _read_rows(root / "points" / f"{stem}.txt", 5, lambda p: [float(x) for x in p])
    boxes = load_labels(root / "labels" / f"{stem}.txt")
    cpath = root / "calib" / f"{stem}.txt"
    calib = Calibration.from_text(cpath.read_text(), str(cpath))
    image = read_ppm(root / "image" / f"{stem}.ppm")
    return Scene(frame_id, boxes, RadarPointCloud(np.array(pts).reshape(-1, 5)), image, calib)


def _gen_and_save(args):
    cfg, fid, root = args
    save_scene(root, generate_scene(cfg, fid))
    return fid


def split_assignment(cfg: SynthConfig) -> dict:
    n = cfg.n_scenes
    n_val = int(round(n * cfg.val_fraction))
    perm = np.random.default_rng([cfg.seed, 7919]).permutation(n)
    val = set(perm[:n_val].tolist())
    return {fid: ("val" if fid in val else "train") for fid in range(n)}


def generate_dataset(cfg: SynthConfig, root, workers: int = 1) -> dict:
    """Write ``cfg.n_scenes`` frames plus ``dataset.json``; returns the manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg, fid, str(root)) for fid in range(cfg.n_scenes)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            list(ex.map(_gen_and_save, jobs))
    else:
        for j in jobs:
            _gen_and_save(j)
    split = split_assignment(cfg)
    manifest = {
        "frames": [{"id": fid, "split": split[fid]} for fid in range(cfg.n_scenes)],
        "grid": dataclasses.asdict(cfg.grid),
        "classes": CLASS_NAMES,
        "synth": cfg.to_dict(),
    }
    tmp = root / "dataset.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, root / "dataset.json")
    return manifest


def load_manifest(root) -> dict:
    return json.loads((Path(root) / "dataset.json").read_text())


def frame_ids(manifest: dict, split: str) -> list:
    return [f["id"] for f in manifest["frames"] if split in ("all", f["split"])]
