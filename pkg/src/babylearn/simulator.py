"""Deterministic synthetic world: shape classes moving over cluttered
backgrounds, with ground truth for every frame.

Target concepts are the classes the pipeline learns. "Learned" classes play
the part of previously known concepts: they appear as distractors in videos
and supply other-concept negatives. Frames are rendered on demand from a
per-video random stream, so a corpus of thousands of frames costs almost no
memory until a video is opened.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .core import BoundingBox, GroundTruthBox, iou_matrix
from .mining import Frame, VideoClip, grid_proposals

# (shape, rgb, texture, texture frequency in cycles per object radius)
CLASS_TABLE = [
    ("triangle", (0.85, 0.30, 0.20), "stripes", 1.2),
    ("ellipse", (0.25, 0.75, 0.30), "checker", 1.0),
    ("star", (0.30, 0.40, 0.90), "stripes", 1.2),
    ("square", (0.90, 0.60, 0.15), "checker", 1.0),
    ("hexagon", (0.20, 0.65, 0.70), "stripes", 1.2),
    ("pentagon", (0.60, 0.30, 0.80), "plain", 0.0),
    ("cross", (0.85, 0.80, 0.25), "plain", 0.0),
    ("diamond", (0.75, 0.30, 0.80), "checker", 1.0),
]


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    shape: str
    color: tuple[float, float, float]
    texture: str
    frequency: float


@dataclass(frozen=True)
class WorldConfig:
    n_classes: int = 3
    n_learned_classes: int = 3
    videos_per_class: int = 120
    frames_per_video: int = 40
    noisy_fraction: float = 0.3
    image_size: tuple[int, int] = (96, 96)  # width, height
    object_radius: tuple[float, float] = (10.0, 16.0)
    rotation_range: float = np.pi
    velocity_std: float = 0.6
    rotation_drift_std: float = 0.02
    scale_drift_std: float = 0.01
    color_jitter: float = 0.12
    max_distractors: int = 3
    pixel_noise: float = 0.005
    clutter_rects: tuple[int, int] = (3, 7)
    n_jitter: int = 4
    jitter_std: float = 0.05
    n_random_proposals: int = 20
    grid_positions: int = 3
    grid_scales: tuple[float, ...] = (0.25, 0.35, 0.5)
    test_frames: int = 150
    test_random_proposals: int = 100
    test_grid_stride: float = 1.0 / 12.0
    test_grid_scales: tuple[float, ...] = (0.2, 0.26, 0.33, 0.42)
    test_grid_aspects: tuple[float, ...] = (0.75, 1.0, 1.33)
    background_frames: int = 40
    learned_instances_per_class: int = 40
    seed_pool_per_class: int = 40
    dedup_iou: float = 0.95
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noisy_fraction <= 1.0:
            raise ValueError("noisy_fraction must lie in [0, 1]")
        counts = (self.n_classes, self.videos_per_class, self.frames_per_video)
        if any(c <= 0 for c in counts) or self.n_learned_classes < 0:
            raise ValueError("class, video and frame counts must be positive")
        if self.n_classes + self.n_learned_classes > len(CLASS_TABLE):
            raise ValueError(f"at most {len(CLASS_TABLE)} classes are available")
        if min(self.image_size) < 16:
            raise ValueError("image side must be at least 16 pixels")

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    @property
    def classes(self) -> list[ClassSpec]:
        n = self.n_classes + self.n_learned_classes
        return [ClassSpec(i, *CLASS_TABLE[i]) for i in range(n)]

    @property
    def target_classes(self) -> list[int]:
        return list(range(self.n_classes))

    @property
    def learned_classes(self) -> list[int]:
        return list(range(self.n_classes, self.n_classes + self.n_learned_classes))


def derive_rng(seed: int, *keys) -> np.random.Generator:
    """Independent stream per (seed, key...) so generation order never matters."""
    text = ":".join(str(k) for k in (seed, *keys))
    digest = hashlib.sha256(text.encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


@dataclass
class Pose:
    cx: float
    cy: float
    radius: float
    angle: float


@dataclass
class SceneObject:
    class_id: int
    color: np.ndarray
    poses: list[Pose] = field(default_factory=list)


def _polygon_mask(u, v, k, phase=0.0):
    inside = np.ones(u.shape, dtype=bool)
    apothem = np.cos(np.pi / k)
    for i in range(k):
        a = phase + 2 * np.pi * (i + 0.5) / k
        inside &= u * np.cos(a) + v * np.sin(a) <= apothem
    return inside


def shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Membership of object-local coordinates (unit radius) in a shape."""
    if shape == "ellipse":
        return u ** 2 + (v / 0.55) ** 2 <= 1.0
    if shape == "triangle":
        return _polygon_mask(u, v, 3, phase=np.pi / 6)
    if shape == "square":
        return _polygon_mask(u, v, 4, phase=np.pi / 4)
    if shape == "pentagon":
        return _polygon_mask(u, v, 5)
    if shape == "hexagon":
        return _polygon_mask(u, v, 6)
    if shape == "diamond":
        return np.abs(u) + np.abs(v) / 0.6 <= 1.0
    if shape == "cross":
        arm = 0.33
        return ((np.abs(u) <= 1) & (np.abs(v) <= arm)) | ((np.abs(v) <= 1) & (np.abs(u) <= arm))
    if shape == "star":
        r = np.hypot(u, v)
        phi = np.arctan2(v, u)
        # five spikes: boundary radius oscillates between 0.45 and 1
        t = np.abs(((phi * 5 / (2 * np.pi)) % 1.0) - 0.5) * 2
        return r <= 0.45 + 0.55 * t
    raise ValueError(f"unknown shape {shape!r}")


def _texture(spec: ClassSpec, u, v):
    if spec.texture == "stripes":
        return np.where(np.sin(2 * np.pi * spec.frequency * u) >= 0, 1.0, 0.6)
    if spec.texture == "checker":
        s = np.sin(2 * np.pi * spec.frequency * u) * np.sin(2 * np.pi * spec.frequency * v)
        return np.where(s >= 0, 1.0, 0.6)
    return np.ones_like(u)


def draw_object(canvas: np.ndarray, spec: ClassSpec, color: np.ndarray, pose: Pose):
    """Paint one object in place; returns its tight pixel box or ``None``."""
    h, w = canvas.shape[:2]
    r = pose.radius
    x0, x1 = max(int(np.floor(pose.cx - r - 1)), 0), min(int(np.ceil(pose.cx + r + 1)), w)
    y0, y1 = max(int(np.floor(pose.cy - r - 1)), 0), min(int(np.ceil(pose.cy + r + 1)), h)
    if x1 <= x0 or y1 <= y0:
        return None
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx = (xs + 0.5 - pose.cx) / r
    dy = (ys + 0.5 - pose.cy) / r
    c, s = np.cos(pose.angle), np.sin(pose.angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    mask = shape_mask(spec.shape, u, v)
    if not mask.any():
        return None
    shade = _texture(spec, u, v)
    patch = canvas[y0:y1, x0:x1]
    patch[mask] = (shade[..., None] * color)[mask]
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return BoundingBox.from_corners(x0 + cols[0], y0 + rows[0], x0 + cols[-1] + 1.0, y0 + rows[-1] + 1.0)


def make_background(rng: np.random.Generator, cfg: WorldConfig) -> np.ndarray:
    """Band-limited colored noise plus random clutter rectangles."""
    w, h = cfg.width, cfg.height
    coarse = rng.normal(0.0, 1.0, size=(6, 6, 3))
    field_ = ndimage.zoom(coarse, (h / 6, w / 6, 1), order=1)[:h, :w]
    base = rng.uniform(0.35, 0.6, size=3)
    img = base + 0.08 * field_
    n_rects = int(rng.integers(cfg.clutter_rects[0], cfg.clutter_rects[1] + 1))
    for _ in range(n_rects):
        rw, rh = rng.uniform(6, w / 2.5), rng.uniform(6, h / 2.5)
        x, y = rng.uniform(-rw / 2, w - rw / 2), rng.uniform(-rh / 2, h - rh / 2)
        gray = rng.uniform(0.2, 0.8)
        tint = gray + rng.uniform(-0.12, 0.12, size=3)
        xa, xb = int(max(x, 0)), int(min(x + rw, w))
        ya, yb = int(max(y, 0)), int(min(y + rh, h))
        img[ya:yb, xa:xb] = tint
    return np.clip(img, 0.0, 1.0)


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap to 8-bit levels so in-memory and on-disk frames agree exactly."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def render_frame(background: np.ndarray, objects: list[tuple[ClassSpec, np.ndarray, Pose]],
                 noise: np.ndarray | None = None) -> tuple[np.ndarray, list[BoundingBox | None]]:
    """Rasterize objects back to front over the background (no anti-aliasing)."""
    canvas = background.copy()
    boxes = [draw_object(canvas, spec, color, pose) for spec, color, pose in objects]
    if noise is not None:
        canvas = canvas + noise
    return quantize(canvas), boxes


# ---------------------------------------------------------------------------
# Proposals
# ---------------------------------------------------------------------------


def _clip_boxes(arr: np.ndarray, w: int, h: int) -> np.ndarray:
    x1 = np.clip(arr[:, 0] - arr[:, 2] / 2, 0, w)
    x2 = np.clip(arr[:, 0] + arr[:, 2] / 2, 0, w)
    y1 = np.clip(arr[:, 1] - arr[:, 3] / 2, 0, h)
    y2 = np.clip(arr[:, 1] + arr[:, 3] / 2, 0, h)
    out = np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=1)
    return out[(out[:, 2] >= 2) & (out[:, 3] >= 2)]


def dedup_boxes(arr: np.ndarray, threshold: float) -> np.ndarray:
    """Drop boxes overlapping an earlier kept box at IoU above ``threshold``."""
    if len(arr) == 0:
        return arr
    ov = iou_matrix(arr, arr)
    keep = np.ones(len(arr), dtype=bool)
    for i in range(len(arr)):
        if keep[i]:
            later = np.arange(len(arr)) > i
            keep &= ~(later & (ov[i] > threshold))
    return arr[keep]


def random_boxes(rng: np.random.Generator, n: int, w: int, h: int,
                 size_range: tuple[float, float]) -> np.ndarray:
    sizes = rng.uniform(size_range[0], size_range[1], size=n) * min(w, h)
    aspect = np.exp(rng.uniform(np.log(0.7), np.log(1.4), size=n))
    bw, bh = sizes * np.sqrt(aspect), sizes / np.sqrt(aspect)
    cx = rng.uniform(bw / 2, w - bw / 2)
    cy = rng.uniform(bh / 2, h - bh / 2)
    return np.stack([cx, cy, bw, bh], axis=1)


def generate_proposals(rng: np.random.Generator, width: int, height: int,
                       gt_boxes: list[BoundingBox], cfg: WorldConfig,
                       use_gt: bool = True) -> list[BoundingBox]:
    """Jittered ground truth, uniform random boxes and a coarse grid, deduplicated.

    The ground-truth arm is only used for video frames; test frames call this
    with ``use_gt=False`` so nothing about the answer leaks into evaluation.
    """
    parts = []
    if use_gt:
        for b in gt_boxes:
            base = b.as_array()
            jit = np.repeat(base[None, :], cfg.n_jitter, axis=0)
            if cfg.jitter_std > 0:
                noise = rng.normal(0.0, cfg.jitter_std, size=(cfg.n_jitter, 4))
                jit[:, 0] += noise[:, 0] * base[2]
                jit[:, 1] += noise[:, 1] * base[3]
                jit[:, 2] *= np.exp(noise[:, 2])
                jit[:, 3] *= np.exp(noise[:, 3])
            parts.append(jit)
        n_random = cfg.n_random_proposals
        parts.append(random_boxes(rng, n_random, width, height, (0.15, 0.5)))
        parts.append(grid_proposals(width, height, positions=cfg.grid_positions,
                                    scales=cfg.grid_scales, aspects=(1.0,)))
    else:
        parts.append(random_boxes(rng, cfg.test_random_proposals, width, height, (0.15, 0.5)))
        parts.append(grid_proposals(width, height, stride_fraction=cfg.test_grid_stride,
                                    scales=cfg.test_grid_scales, aspects=cfg.test_grid_aspects))
    arr = _clip_boxes(np.vstack([p for p in parts if len(p)]), width, height)
    arr = dedup_boxes(arr, cfg.dedup_iou)
    return [BoundingBox(*row) for row in arr]


# ---------------------------------------------------------------------------
# Worlds
# ---------------------------------------------------------------------------


def _instance_color(rng: np.random.Generator, spec: ClassSpec, jitter: float) -> np.ndarray:
    return np.clip(np.array(spec.color) * np.exp(rng.normal(0.0, jitter, size=3)), 0.0, 1.0)


def _random_pose(rng: np.random.Generator, cfg: WorldConfig) -> Pose:
    r = rng.uniform(*cfg.object_radius)
    return Pose(rng.uniform(r + 1, cfg.width - r - 1), rng.uniform(r + 1, cfg.height - r - 1),
                r, rng.uniform(-cfg.rotation_range, cfg.rotation_range))


def _trajectory(rng: np.random.Generator, cfg: WorldConfig, n_frames: int) -> list[Pose]:
    pose = _random_pose(rng, cfg)
    vx, vy = rng.normal(0.0, cfg.velocity_std, size=2)
    spin = rng.normal(0.0, cfg.rotation_drift_std)
    poses = []
    cx, cy, r, ang = pose.cx, pose.cy, pose.radius, pose.angle
    for _ in range(n_frames):
        poses.append(Pose(cx, cy, r, ang))
        r = float(np.clip(r * np.exp(rng.normal(0.0, cfg.scale_drift_std)), *cfg.object_radius))
        ang += spin + rng.normal(0.0, cfg.rotation_drift_std / 2)
        cx, cy = cx + vx, cy + vy
        if not r + 1 <= cx <= cfg.width - r - 1:
            vx = -vx
            cx = float(np.clip(cx, r + 1, cfg.width - r - 1))
        if not r + 1 <= cy <= cfg.height - r - 1:
            vy = -vy
            cy = float(np.clip(cy, r + 1, cfg.height - r - 1))
    return poses


@dataclass(frozen=True)
class VideoSpec:
    """Recipe for one synthetic video; ``clip()`` renders it."""

    video_id: str
    index: int
    target_class: int
    noisy: bool
    cfg: WorldConfig

    def _stream(self, *keys):
        return derive_rng(self.cfg.rng_seed, "video", self.index, *keys)

    @cached_property
    def objects(self) -> list[SceneObject]:
        cfg = self.cfg
        rng = self._stream("objects")
        specs = cfg.classes
        objs = []
        if not self.noisy:
            spec = specs[self.target_class]
            objs.append(SceneObject(spec.class_id, _instance_color(rng, spec, cfg.color_jitter),
                                    _trajectory(rng, cfg, cfg.frames_per_video)))
        n_distract = int(rng.integers(0, cfg.max_distractors + 1)) if cfg.learned_classes else 0
        for _ in range(n_distract):
            spec = specs[int(rng.choice(cfg.learned_classes))]
            objs.append(SceneObject(spec.class_id, _instance_color(rng, spec, cfg.color_jitter),
                                    _trajectory(rng, cfg, cfg.frames_per_video)))
        order = rng.permutation(len(objs))
        return [objs[i] for i in order]

    def clip(self) -> VideoClip:
        cfg = self.cfg
        specs = cfg.classes
        background = make_background(self._stream("background"), cfg)
        noise_rng = self._stream("noise")
        prop_rng = self._stream("proposals")
        frames = []
        for t in range(cfg.frames_per_video):
            scene = [(specs[o.class_id], o.color, o.poses[t]) for o in self.objects]
            noise = noise_rng.normal(0.0, cfg.pixel_noise, size=background.shape)
            image, boxes = render_frame(background, scene, noise)
            gts = [GroundTruthBox(b, o.class_id, t) for o, b in zip(self.objects, boxes) if b is not None]
            proposals = generate_proposals(prop_rng, cfg.width, cfg.height, [g.box for g in gts], cfg)
            frames.append(Frame(t, image, proposals, gts))
        return VideoClip(self.video_id, frames)


@dataclass
class LabeledImage:
    image: np.ndarray
    gts: list[GroundTruthBox]
    proposals: list[BoundingBox]
    frame_id: int = 0


@dataclass
class LabeledCorpus:
    cfg: WorldConfig
    videos: list[VideoSpec]
    background_images: list[LabeledImage]
    learned_images: list[LabeledImage]
    seed_images: dict[int, list[LabeledImage]]
    test_images: list[LabeledImage]

    @property
    def noisy_count(self) -> int:
        return sum(v.noisy for v in self.videos)

    def manifest(self) -> dict:
        return {
            "classes": [c.__dict__ for c in self.cfg.classes],
            "target_classes": self.cfg.target_classes,
            "learned_classes": self.cfg.learned_classes,
            "videos": [{"video_id": v.video_id, "target_class": v.target_class, "noisy": v.noisy}
                       for v in self.videos],
            "noisy_count": self.noisy_count,
        }


def _still(rng: np.random.Generator, cfg: WorldConfig, class_ids: list[int], frame_id: int,
           use_gt_proposals: bool) -> LabeledImage:
    specs = cfg.classes
    background = make_background(rng, cfg)
    poses: list[Pose] = []
    for _ in class_ids:
        for _attempt in range(50):
            pose = _random_pose(rng, cfg)
            # keep objects apart so no annotation is fully hidden
            if all(np.hypot(pose.cx - q.cx, pose.cy - q.cy) > pose.radius + q.radius for q in poses):
                break
        poses.append(pose)
    scene = [(specs[c], _instance_color(rng, specs[c], cfg.color_jitter), pose)
             for c, pose in zip(class_ids, poses)]
    noise = rng.normal(0.0, cfg.pixel_noise, size=background.shape)
    image, boxes = render_frame(background, scene, noise)
    gts = [GroundTruthBox(b, c, frame_id) for c, b in zip(class_ids, boxes) if b is not None]
    proposals = generate_proposals(rng, cfg.width, cfg.height, [g.box for g in gts], cfg,
                                   use_gt=use_gt_proposals)
    return LabeledImage(image, gts, proposals, frame_id)


def generate_world(cfg: WorldConfig = WorldConfig()) -> LabeledCorpus:
    """Build the full corpus; identical configs give identical corpora."""
    videos = []
    n_noisy = int(round(cfg.noisy_fraction * cfg.videos_per_class))
    for c in cfg.target_classes:
        noisy_idx = set(derive_rng(cfg.rng_seed, "noisy", c)
                        .permutation(cfg.videos_per_class)[:n_noisy].tolist())
        for k in range(cfg.videos_per_class):
            index = c * cfg.videos_per_class + k
            videos.append(VideoSpec(f"v{index:05d}", index, c, k in noisy_idx, cfg))
    # interleave classes so any prefix of the corpus covers every concept
    order = derive_rng(cfg.rng_seed, "video-order").permutation(len(videos))
    videos = [videos[i] for i in order]

    backgrounds = [_still(derive_rng(cfg.rng_seed, "bg", i), cfg, [], i, True)
                   for i in range(cfg.background_frames)]
    learned = []
    for c in cfg.learned_classes:
        for i in range(cfg.learned_instances_per_class):
            learned.append(_still(derive_rng(cfg.rng_seed, "learned", c, i), cfg, [c], len(learned), True))
    seeds = {c: [_still(derive_rng(cfg.rng_seed, "seed", c, i), cfg, [c], i, True)
                 for i in range(cfg.seed_pool_per_class)]
             for c in cfg.target_classes}
    tests = []
    all_classes = cfg.target_classes + cfg.learned_classes
    for i in range(cfg.test_frames):
        rng = derive_rng(cfg.rng_seed, "test", i)
        extra = int(rng.integers(0, 3))
        classes = [cfg.target_classes[i % cfg.n_classes]] + [int(rng.choice(all_classes)) for _ in range(extra)]
        tests.append(_still(rng, cfg, classes, i, False))
    return LabeledCorpus(cfg, videos, backgrounds, learned, seeds, tests)


# ---------------------------------------------------------------------------
# On-disk corpus
# ---------------------------------------------------------------------------

CORPUS_FORMAT = "babylearn-corpus"
CORPUS_VERSION = 1
ANNOTATION_FILE = "annotations.csv"
PROPOSAL_FILE = "proposals.csv"
ANNOTATION_HEADER = "frame_id,class_id,cx,cy,w,h"
PROPOSAL_HEADER = "frame_id,cx,cy,w,h"


class CorpusError(ValueError):
    pass


def _frame_name(frame_id: int) -> str:
    return f"{frame_id:06d}.png"


def write_png(path: Path, image: np.ndarray) -> None:
    # frames are already on 8-bit levels, so this round-trips exactly
    Image.fromarray(np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)).save(path)


def read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def _nums(b: BoundingBox) -> str:
    # repr of a Python float round-trips exactly
    return ",".join(repr(float(v)) for v in (b.cx, b.cy, b.w, b.h))


def _write_frames(directory: Path, frames: list[tuple[int, np.ndarray, list[GroundTruthBox], list[BoundingBox]]]):
    directory.mkdir(parents=True, exist_ok=True)
    ann = [ANNOTATION_HEADER]
    props = [PROPOSAL_HEADER]
    for frame_id, image, gts, proposals in frames:
        write_png(directory / _frame_name(frame_id), image)
        for g in gts:
            b = g.box
            ann.append(f"{frame_id},{g.class_id},{_nums(b)}")
        for b in proposals:
            props.append(f"{frame_id},{_nums(b)}")
    (directory / ANNOTATION_FILE).write_text("\n".join(ann) + "\n")
    (directory / PROPOSAL_FILE).write_text("\n".join(props) + "\n")


def _read_table(path: Path, header: str) -> list[list[str]]:
    if not path.exists():
        return []
    lines = path.read_text().splitlines()
    if not lines or lines[0].strip() != header:
        raise CorpusError(f"{path}: expected header {header!r}")
    rows = []
    for lineno, line in enumerate(lines[1:], 2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != header.count(",") + 1:
            raise CorpusError(f"{path}:{lineno}: malformed record {line!r}")
        rows.append(parts)
    return rows


def _read_frames(directory: Path):
    """``(frame_id, image, gts, proposals)`` for every numbered image, in order."""
    if not directory.is_dir():
        raise CorpusError(f"missing frame directory {directory}")
    gts: dict[int, list[GroundTruthBox]] = {}
    for r in _read_table(directory / ANNOTATION_FILE, ANNOTATION_HEADER):
        fid = int(r[0])
        gts.setdefault(fid, []).append(GroundTruthBox(BoundingBox(*map(float, r[2:])), int(r[1]), fid))
    props: dict[int, list[BoundingBox]] | None = None
    if (directory / PROPOSAL_FILE).exists():
        props = {}
        for r in _read_table(directory / PROPOSAL_FILE, PROPOSAL_HEADER):
            props.setdefault(int(r[0]), []).append(BoundingBox(*map(float, r[1:])))
    out = []
    for path in sorted(directory.glob("*.png")):
        fid = int(path.stem)
        out.append((fid, read_png(path), gts.get(fid, []), None if props is None else props.get(fid, [])))
    return out


@dataclass(frozen=True)
class DiskVideo:
    """A video directory; frames are decoded when ``clip()`` is called."""

    video_id: str
    directory: Path

    def clip(self) -> VideoClip:
        frames = [Frame(fid, img, props, gts) for fid, img, gts, props in _read_frames(self.directory)]
        if not frames:
            raise CorpusError(f"video {self.video_id} has no frames")
        return VideoClip(self.video_id, frames)


@dataclass
class DiskCorpus:
    """Corpus read back from disk; same attributes the pipeline uses on
    :class:`LabeledCorpus`."""

    root: Path
    manifest: dict
    videos: list[DiskVideo]
    background_images: list[LabeledImage]
    learned_images: list[LabeledImage]
    seed_images: dict[int, list[LabeledImage]]
    test_images: list[LabeledImage]

    @property
    def noisy_count(self) -> int:
        return sum(bool(v["noisy"]) for v in self.manifest["videos"])


def _stills(images: list[LabeledImage]):
    return [(img.frame_id, img.image, img.gts, img.proposals) for img in images]


def write_corpus(corpus: LabeledCorpus, root: str | Path) -> dict:
    """Write videos, still-image sets and ``manifest.json`` under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for v in corpus.videos:
        clip = v.clip()
        _write_frames(root / "videos" / v.video_id,
                      [(f.frame_id, f.image, f.annotations, f.proposals or []) for f in clip.frames])
    _write_frames(root / "stills" / "background", _stills(corpus.background_images))
    _write_frames(root / "stills" / "learned", _stills(corpus.learned_images))
    for c, images in sorted(corpus.seed_images.items()):
        _write_frames(root / "stills" / f"seed_{c}", _stills(images))
    _write_frames(root / "stills" / "test", _stills(corpus.test_images))
    manifest = {"format": CORPUS_FORMAT, "version": CORPUS_VERSION,
                "world": dataclasses.asdict(corpus.cfg), **corpus.manifest()}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def _labeled(directory: Path) -> list[LabeledImage]:
    return [LabeledImage(img, gts, props or [], fid) for fid, img, gts, props in _read_frames(directory)]


def read_corpus(root: str | Path) -> DiskCorpus:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise CorpusError(f"{root}: no manifest.json")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorpusError(f"{path}: {exc}") from exc
    if manifest.get("format") != CORPUS_FORMAT or manifest.get("version") != CORPUS_VERSION:
        raise CorpusError(f"{path}: unsupported corpus format")
    videos = [DiskVideo(v["video_id"], root / "videos" / v["video_id"]) for v in manifest["videos"]]
    for v in videos:
        if not v.directory.is_dir():
            raise CorpusError(f"missing video directory {v.directory}")
    seeds = {c: _labeled(root / "stills" / f"seed_{c}") for c in manifest["target_classes"]}
    return DiskCorpus(root, manifest, videos, _labeled(root / "stills" / "background"),
                      _labeled(root / "stills" / "learned"), seeds, _labeled(root / "stills" / "test"))


def world_config_from_dict(d: dict) -> WorldConfig:
    fields = {f.name: f for f in dataclasses.fields(WorldConfig)}
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items() if k in fields}
    return WorldConfig(**kwargs)
