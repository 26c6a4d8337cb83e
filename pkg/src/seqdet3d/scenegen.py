"""Deterministic synthetic LiDAR-like scenes and their text file format.

A scene is a handful of boxes on a flat ground plane with points sampled on
the box faces that look toward the sensor, thinning with range, plus ground
clutter. Every stored float is rounded to 6 decimals at generation time so
the text format round-trips exactly.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geometry import Box3D, iou_bev, points_in_box_mask, range_to_ego, yaw_normalize
from .tokenizer import VocabLayout

CATEGORY_NAMES = (
    "car",
    "truck",
    "construction_vehicle",
    "bus",
    "trailer",
    "barrier",
    "motorcycle",
    "bicycle",
    "pedestrian",
    "traffic_cone",
)

# (mean l, w, h) in meters, loosely nuScenes-like
DEFAULT_SIZE_PRIORS = (
    (4.6, 1.9, 1.7),
    (6.9, 2.5, 2.8),
    (6.4, 2.8, 3.2),
    (10.5, 2.9, 3.5),
    (12.0, 2.9, 3.9),
    (2.4, 0.6, 1.0),
    (2.1, 0.8, 1.5),
    (1.7, 0.6, 1.3),
    (0.8, 0.7, 1.8),
    (0.45, 0.45, 1.0),
)

MAX_ATTEMPTS = 10_000
OVERLAP_CAP = 0.01
YAW_LIMIT = 3.141592  # below pi after 6-decimal rounding


class GenerationError(RuntimeError):
    pass


class SceneFormatError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    half_extent: float = 24.0
    center_margin: float = 1.0
    k_min: int = 1
    k_max: int = 6
    size_priors: tuple = DEFAULT_SIZE_PRIORS
    size_sigma: float = 0.06  # relative
    category_weights: tuple | None = None
    points_near: int = 160  # points on a box at zero range
    density_decay: float = 12.0  # meters
    clutter_points: int = 300
    point_noise: float = 0.03
    velocity_sigma: float = 2.0
    ground_z: float = -1.8

    def __post_init__(self):
        if not 0 <= self.k_min <= self.k_max:
            raise ValueError(f"need 0 <= k_min <= k_max, got {self.k_min}, {self.k_max}")
        if self.half_extent <= self.center_margin:
            raise ValueError("field of view smaller than the center margin")

    @property
    def num_categories(self) -> int:
        return len(self.size_priors)

    def check_layout(self, layout: VocabLayout, t_max: int | None = None) -> None:
        """Raise if generated boxes could fall outside the codec ranges or T_max."""
        for name in ("x", "y"):
            a = layout.attr(name)
            if not (a.min <= -self.half_extent and self.half_extent < a.max):
                raise ValueError(f"field of view exceeds the {name} token range")
        if self.num_categories > layout.num_categories:
            raise ValueError("more categories than the layout supports")
        if t_max is not None and self.k_max * 10 + 2 > t_max:
            raise ValueError(f"k_max={self.k_max} needs T_max >= {self.k_max * 10 + 2}, got {t_max}")


@dataclass
class Scene:
    scene_id: str
    points: np.ndarray  # (N, 4): x, y, z, intensity
    boxes: list[Box3D] = field(default_factory=list)
    seed: int = 0

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.seed == other.seed
            and self.boxes == other.boxes
            and self.points.shape == other.points.shape
            and bool(np.array_equal(self.points, other.points))
        )


def _r6(v) -> float:
    return round(float(v), 6)


def _sample_box(cfg: GenConfig, rng: np.random.Generator) -> Box3D:
    ncat = cfg.num_categories
    p = None
    if cfg.category_weights is not None:
        w = np.asarray(cfg.category_weights, dtype=float)
        p = w / w.sum()
    cat = int(rng.choice(ncat, p=p))
    l0, w0, h0 = cfg.size_priors[cat]
    dims = [max(0.1, d * (1.0 + cfg.size_sigma * rng.standard_normal())) for d in (l0, w0, h0)]
    lim = cfg.half_extent - cfg.center_margin
    x, y = rng.uniform(-lim, lim, size=2)
    yaw = rng.uniform(-YAW_LIMIT, YAW_LIMIT)
    h = _r6(dims[2])
    z = cfg.ground_z + 0.5 * h + 0.05 * rng.standard_normal()
    vx, vy = np.clip(cfg.velocity_sigma * rng.standard_normal(2), -29.0, 29.0)
    return Box3D(
        x=_r6(x), y=_r6(y), z=_r6(z), l=_r6(dims[0]), w=_r6(dims[1]), h=h,
        yaw=_r6(yaw), vx=_r6(vx), vy=_r6(vy), category=cat,
    )


def _face_points(box: Box3D, n: int, cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Points on the faces visible from the origin, nudged inward so they stay inside."""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    hl, hw, hh = 0.5 * box.l, 0.5 * box.w, 0.5 * box.h
    # side faces: (local normal, half extent along face, face area)
    faces = []
    for nx, ny, ext, other in ((1, 0, hw, hl), (-1, 0, hw, hl), (0, 1, hl, hw), (0, -1, hl, hw)):
        gx, gy = c * nx - s * ny, s * nx + c * ny
        fx, fy = box.x + gx * other, box.y + gy * other
        if gx * fx + gy * fy < 0.0:  # faces the sensor
            faces.append((nx, ny, ext, other, 2 * ext * box.h))
    faces.append((0, 0, 0.0, 0.0, box.l * box.w))  # top
    areas = np.array([f[4] for f in faces])
    which = rng.choice(len(faces), size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=n)
    v = rng.uniform(-1.0, 1.0, size=n)
    inset = np.minimum(np.abs(cfg.point_noise * rng.standard_normal(n)), 0.2)
    lx = np.empty(n)
    ly = np.empty(n)
    lz = np.empty(n)
    for i, fi in enumerate(which):
        nx, ny, ext, other, _ = faces[fi]
        if nx == 0 and ny == 0:
            lx[i] = u[i] * hl
            ly[i] = v[i] * hw
            lz[i] = hh - min(inset[i], hh)
        elif nx != 0:
            lx[i] = nx * (other - min(inset[i], other))
            ly[i] = u[i] * ext
            lz[i] = v[i] * hh
        else:
            lx[i] = u[i] * ext
            ly[i] = ny * (other - min(inset[i], other))
            lz[i] = v[i] * hh
    # shrink by a hair so 6-decimal rounding cannot push a point outside
    lx *= 1.0 - 1e-4
    ly *= 1.0 - 1e-4
    lz *= 1.0 - 1e-4
    px = box.x + c * lx - s * ly
    py = box.y + s * lx + c * ly
    pz = box.z + lz
    inten = np.clip(0.5 + 0.05 * box.category + 0.1 * rng.standard_normal(n), 0.0, 1.0)
    return np.stack([px, py, pz, inten], axis=1)


def expected_points(box: Box3D, cfg: GenConfig) -> int:
    return max(1, int(round(cfg.points_near / (1.0 + range_to_ego(box) / cfg.density_decay))))


def generate_scene(cfg: GenConfig, seed: int, scene_id: str | None = None) -> Scene:
    rng = np.random.default_rng(seed)
    k = int(rng.integers(cfg.k_min, cfg.k_max + 1))
    boxes: list[Box3D] = []
    attempts = 0
    while len(boxes) < k:
        attempts += 1
        if attempts > MAX_ATTEMPTS:
            raise GenerationError(
                f"placed {len(boxes)}/{k} boxes after {MAX_ATTEMPTS} attempts; field of view too crowded"
            )
        cand = _sample_box(cfg, rng)
        if all(iou_bev(cand, b) < OVERLAP_CAP for b in boxes):
            boxes.append(cand)

    chunks = [np.zeros((0, 4))]
    for b in boxes:
        chunks.append(_face_points(b, expected_points(b, cfg), cfg, rng))
    nc = cfg.clutter_points
    lim = cfg.half_extent
    clutter = np.stack(
        [
            rng.uniform(-lim, lim, nc),
            rng.uniform(-lim, lim, nc),
            cfg.ground_z + 0.03 * rng.standard_normal(nc),
            rng.uniform(0.0, 0.3, nc),
        ],
        axis=1,
    )
    chunks.append(clutter)
    pts = np.round(np.concatenate(chunks, axis=0), 6)
    keep = (np.abs(pts[:, 0]) <= lim) & (np.abs(pts[:, 1]) <= lim)
    pts = pts[keep] + 0.0  # drop negative zeros
    # every box keeps at least one return
    extra = [
        (b.x, b.y, b.z, 0.5) for b in boxes if not points_in_box_mask(pts, b).any()
    ]
    if extra:
        pts = np.concatenate([pts, np.array(extra)], axis=0)
    return Scene(scene_id or f"scene-{seed}", pts, boxes, int(seed))


def scene_seed(base_seed: int, index: int) -> int:
    return (int(base_seed) * 1_000_003 + int(index)) % (2**63)


def generate_dataset(cfg: GenConfig, count: int, seed: int) -> list[Scene]:
    return [
        generate_scene(cfg, scene_seed(seed, i), scene_id=f"s{seed}-{i:05d}") for i in range(count)
    ]


def dihedral_scene(scene: Scene, k: int) -> Scene:
    """Apply one of the 8 symmetries of the ego-centered square: ``k % 4``
    quarter turns, then a mirror in the x axis when ``k >= 4``. Ranges are
    unchanged, so near-to-far order is too."""
    if not 0 <= k < 8:
        raise ValueError(f"symmetry index must be in [0, 8), got {k}")
    if k == 0:
        return scene
    turns, mirror = k % 4, k >= 4
    c, s = [(1, 0), (0, 1), (-1, 0), (0, -1)][turns]

    def xy(x, y):
        x, y = c * x - s * y, s * x + c * y
        return (x, -y) if mirror else (x, y)

    pts = scene.points.copy()
    pts[:, 0], pts[:, 1] = xy(scene.points[:, 0], scene.points[:, 1])
    boxes = []
    for b in scene.boxes:
        x, y = xy(b.x, b.y)
        vx, vy = xy(b.vx, b.vy)
        yaw = b.yaw + turns * 0.5 * math.pi
        yaw = yaw_normalize(-yaw if mirror else yaw)
        boxes.append(replace(b, x=x, y=y, vx=vx, vy=vy, yaw=yaw))
    return Scene(scene.scene_id, pts, boxes, scene.seed)


def points_in_box(scene: Scene, box: Box3D) -> int:
    return int(points_in_box_mask(scene.points, box).sum())


def point_counts(scene: Scene) -> list[int]:
    return [points_in_box(scene, b) for b in scene.boxes]


# ----------------------------------------------------------------------------
# text format


def _f(v: float) -> str:
    s = f"{v:.6f}"
    return "0.000000" if s == "-0.000000" else s


def format_box(b: Box3D) -> str:
    vals = (b.x, b.y, b.z, b.l, b.w, b.h, b.yaw, b.vx, b.vy)
    return "b " + str(int(b.category)) + " " + " ".join(_f(v) for v in vals)


def parse_box(line: str, lineno: int = 0) -> Box3D:
    parts = line.split()
    if len(parts) != 11 or parts[0] != "b":
        raise SceneFormatError(f"line {lineno}: expected 'b <category> <9 floats>', got {line!r}")
    try:
        cat = int(parts[1])
        vals = [float(p) for p in parts[2:]]
        return Box3D(*vals[:7], vx=vals[7], vy=vals[8], category=cat)
    except ValueError as e:
        raise SceneFormatError(f"line {lineno}: {e}") from None


def format_scene(scene: Scene) -> str:
    lines = [f"scene {scene.scene_id} {len(scene.points)} {len(scene.boxes)} {scene.seed}"]
    for x, y, z, i in scene.points:
        lines.append(f"p {_f(x)} {_f(y)} {_f(z)} {_f(i)}")
    lines.extend(format_box(b) for b in scene.boxes)
    return "\n".join(lines) + "\n"


def parse_scene(text: str) -> Scene:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise SceneFormatError("line 1: empty scene file")
    head = lines[0].split()
    if len(head) != 5 or head[0] != "scene":
        raise SceneFormatError(f"line 1: expected 'scene <id> <num_points> <num_boxes> <seed>', got {lines[0]!r}")
    try:
        npts, nbox, seed = int(head[2]), int(head[3]), int(head[4])
    except ValueError:
        raise SceneFormatError(f"line 1: non-integer counts in header {lines[0]!r}") from None
    if npts < 0 or nbox < 0:
        raise SceneFormatError("line 1: negative record counts")
    body = lines[1:]
    got_p = sum(1 for ln in body if ln.startswith("p "))
    got_b = sum(1 for ln in body if ln.startswith("b "))
    if len(body) < npts + nbox:
        raise SceneFormatError(
            f"truncated scene: expected {npts} point and {nbox} box records, "
            f"found {got_p} point and {got_b} box records"
        )
    if len(body) > npts + nbox:
        raise SceneFormatError(
            f"line {npts + nbox + 2}: unexpected extra record (header declares {npts} points, {nbox} boxes)"
        )
    pts = np.empty((npts, 4))
    for i in range(npts):
        ln = body[i]
        parts = ln.split()
        if len(parts) != 5 or parts[0] != "p":
            raise SceneFormatError(f"line {i + 2}: expected 'p <x> <y> <z> <intensity>', got {ln!r}")
        try:
            pts[i] = [float(v) for v in parts[1:]]
        except ValueError:
            raise SceneFormatError(f"line {i + 2}: malformed number in {ln!r}") from None
        if not np.all(np.isfinite(pts[i])):
            raise SceneFormatError(f"line {i + 2}: non-finite value")
    boxes = [parse_box(body[npts + j], npts + j + 2) for j in range(nbox)]
    return Scene(head[1], pts, boxes, seed)


def write_scene(scene: Scene, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_scene(scene))


def read_scene(path) -> Scene:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_scene(fh.read())


def write_dataset(scenes: list[Scene], out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for s in scenes:
        name = f"{s.scene_id}.scene"
        write_scene(s, out / name)
        names.append(name)
    (out / "manifest.txt").write_text("".join(n + "\n" for n in names), encoding="utf-8")
    return out


def read_manifest(data_dir) -> list[Path]:
    d = Path(data_dir)
    mpath = d / "manifest.txt"
    if not mpath.exists():
        raise FileNotFoundError(f"no manifest.txt in {d}")
    names = [ln.strip() for ln in mpath.read_text(encoding="utf-8").splitlines() if ln.strip()]
    return [d / n for n in names]


def read_dataset(data_dir) -> list[Scene]:
    return [read_scene(p) for p in read_manifest(data_dir)]


def dataset_exists(data_dir) -> bool:
    return os.path.exists(os.path.join(data_dir, "manifest.txt"))
