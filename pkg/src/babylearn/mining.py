"""Per-video instance mining: key frames, the video seed, and the two
instances tracked from it through the affinity graph."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .core import BoundingBox, GroundTruthBox, boxes_to_array, iou_matrix
from .detector import ENSEMBLE, DetectorModel
from .features import DEFAULT_DESCRIPTOR, DescriptorConfig, FrameFeatures, descriptor_distance, frame_descriptor
from .graphshift import (AffinityParams, Region, build_affinity, cross_frame_variance, graph_shift_mode,
                         select_tracked_instances)

logger = logging.getLogger(__name__)

DEFAULT_GIST_THRESHOLD = 0.008
# Raw-margin seed thresholds calibrated on the simulator. An exemplar scores
# its own training crop at the margin (1.0), so held-out instances stay below
# 1; retrained detectors see many positives and generalize past the margin.
DEFAULT_SEED_THRESHOLD = 0.5
DEFAULT_EXEMPLAR_SEED_THRESHOLD = 0.0
DEFAULT_GRAPH_CAP = 200


@dataclass
class Frame:
    frame_id: int
    image: np.ndarray
    proposals: list[BoundingBox] | None = None
    annotations: list[GroundTruthBox] = field(default_factory=list)


@dataclass
class VideoClip:
    video_id: str
    frames: list[Frame]

    def __post_init__(self):
        ids = [f.frame_id for f in self.frames]
        if any(b <= a for a, b in zip(ids, ids[1:])):
            raise ValueError(f"frame ids of video {self.video_id} must be strictly increasing")


@dataclass
class KeyFrame:
    frame_id: int
    descriptor: np.ndarray
    boxes: np.ndarray           # (R, 4) center format
    features: np.ndarray        # (R, D)
    width: int = 0
    height: int = 0


@dataclass
class KeyFrameSet:
    video_id: str
    frames: list[KeyFrame]

    @property
    def frame_ids(self) -> list[int]:
        return [k.frame_id for k in self.frames]


@dataclass(frozen=True)
class MinedInstance:
    video_id: str
    frame_id: int
    box: BoundingBox
    feature: np.ndarray
    source_iteration: int
    seed_score: float
    seed_frame_id: int = -1

    def __eq__(self, other):
        if not isinstance(other, MinedInstance):
            return NotImplemented
        return (self.video_id == other.video_id and self.frame_id == other.frame_id
                and self.box == other.box and np.array_equal(self.feature, other.feature)
                and self.source_iteration == other.source_iteration
                and self.seed_score == other.seed_score
                and self.seed_frame_id == other.seed_frame_id)


@dataclass(frozen=True)
class MiningParams:
    gist_threshold: float = DEFAULT_GIST_THRESHOLD
    seed_threshold: float = DEFAULT_SEED_THRESHOLD
    graph_cap: int = DEFAULT_GRAPH_CAP
    instances_per_video: int = 2
    affinity: AffinityParams = AffinityParams()
    graph_tol: float = 1e-8
    graph_max_iter: int = 10000
    exemplar_seed_threshold: float = DEFAULT_EXEMPLAR_SEED_THRESHOLD

    def threshold_for(self, detector: DetectorModel) -> float:
        return self.exemplar_seed_threshold if detector.variant == ENSEMBLE else self.seed_threshold


def grid_proposals(width: int, height: int, positions: int | None = None,
                   stride_fraction: float = 1.0 / 8.0, scales: Sequence[float] = (0.25, 0.4, 0.6),
                   aspects: Sequence[float] = (0.75, 1.0, 1.33)) -> np.ndarray:
    """Sliding windows over the frame as an ``(N, 4)`` center-format array.

    ``scales`` are box sides relative to the shorter frame side and
    ``aspects`` are width/height ratios. Either ``positions`` per axis or a
    stride (fraction of the frame side) lays out the centers.
    """
    side = min(width, height)
    out = []
    for s in scales:
        for a in aspects:
            bw, bh = s * side * np.sqrt(a), s * side / np.sqrt(a)
            if positions is not None:
                xs = np.linspace(bw / 2, width - bw / 2, positions)
                ys = np.linspace(bh / 2, height - bh / 2, positions)
            else:
                xs = np.arange(bw / 2, width - bw / 2 + 1e-9, stride_fraction * width)
                ys = np.arange(bh / 2, height - bh / 2 + 1e-9, stride_fraction * height)
            gx, gy = np.meshgrid(xs, ys)
            out.append(np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, bw), np.full(gx.size, bh)], 1))
    return np.vstack(out) if out else np.zeros((0, 4))


def select_key_frames(clip: VideoClip, gist_threshold: float = DEFAULT_GIST_THRESHOLD,
                      cfg: DescriptorConfig = DEFAULT_DESCRIPTOR) -> list[tuple[Frame, np.ndarray]]:
    """Frames whose global descriptor moved more than ``gist_threshold`` away
    from the last accepted key frame; the first frame always qualifies."""
    if not clip.frames:
        raise ValueError(f"video {clip.video_id} has no frames")
    keys = []
    last = None
    for frame in clip.frames:
        desc = frame_descriptor(frame.image, cfg)
        if last is None or descriptor_distance(desc, last) > gist_threshold:
            keys.append((frame, desc))
            last = desc
    return keys


def extract_keyframes(clip: VideoClip, gist_threshold: float = DEFAULT_GIST_THRESHOLD,
                      cfg: DescriptorConfig = DEFAULT_DESCRIPTOR) -> KeyFrameSet:
    """Key frames with proposal boxes and region descriptors attached."""
    out = []
    for frame, desc in select_key_frames(clip, gist_threshold, cfg):
        h, w = frame.image.shape[:2]
        if frame.proposals is None:
            boxes = grid_proposals(w, h)
        else:
            boxes = boxes_to_array(frame.proposals)
        feats = FrameFeatures(frame.image, cfg).describe(boxes)
        out.append(KeyFrame(frame.frame_id, desc, boxes, feats, w, h))
    return KeyFrameSet(clip.video_id, out)


def select_video_seed(keyframes: KeyFrameSet, detector: DetectorModel,
                      seed_threshold: float = DEFAULT_SEED_THRESHOLD,
                      scores: list[np.ndarray] | None = None):
    """Highest-scoring region in the video if it beats ``seed_threshold``.

    Returns ``(key frame index, region index, score)`` or ``None``.
    """
    best = None
    for k, kf in enumerate(keyframes.frames):
        if len(kf.boxes) == 0:
            continue
        s = scores[k] if scores is not None else detector.score(kf.features)
        # NMS keeps the top box, so the arg-max over raw scores is the best detection
        i = int(np.argmax(s))
        if best is None or s[i] > best[2]:
            best = (k, i, float(s[i]))
    if best is None or not best[2] > seed_threshold:
        return None
    return best


def _graph_regions(keyframes: KeyFrameSet, scores: list[np.ndarray], seed: tuple[int, int, float],
                   cap: int) -> tuple[list[Region], int]:
    rows = []
    for k, kf in enumerate(keyframes.frames):
        for i in range(len(kf.boxes)):
            rows.append((k, i, float(scores[k][i])))
    seed_key = (seed[0], seed[1])
    others = [r for r in rows if (r[0], r[1]) != seed_key]
    others.sort(key=lambda r: (-r[2], r[0], r[1]))
    chosen = [(seed[0], seed[1], seed[2])] + others[: max(cap - 1, 0)]
    regions = []
    for k, i, s in chosen:
        kf = keyframes.frames[k]
        regions.append(Region(kf.frame_id, BoundingBox(*kf.boxes[i]), kf.features[i], s, i))
    return regions, 0


def video_affinity_params(keyframes: KeyFrameSet, base: AffinityParams = AffinityParams()) -> AffinityParams:
    """Fill in frame size and any missing variance from the whole video.

    Variances are the mean squared cross-frame distance over every key-frame
    proposal, not just the capped graph: the top-scoring regions crowd around
    one object and would shrink the bandwidth to their own spread.
    """
    frames = [kf for kf in keyframes.frames if len(kf.boxes)]
    first = keyframes.frames[0]
    width, height = float(first.width or 1), float(first.height or 1)
    var_x, var_p = base.appearance_variance, base.position_variance
    if frames and (var_x is None or var_p is None):
        ids = np.concatenate([np.full(len(kf.boxes), kf.frame_id) for kf in frames])
        if var_x is None:
            var_x = cross_frame_variance(np.vstack([kf.features for kf in frames]), ids) or None
        if var_p is None:
            scale = np.array([width, height, width, height])
            var_p = cross_frame_variance(np.vstack([kf.boxes for kf in frames]) / scale, ids) or None
    return AffinityParams(base.alpha, base.detect_floor, var_x, var_p, width, height)


def mine_keyframes(keyframes: KeyFrameSet, detector: DetectorModel, params: MiningParams = MiningParams(),
                   consumed: Iterable[tuple[str, int]] = (), iteration: int = 0) -> list[MinedInstance]:
    """Seed detection, affinity graph, mode seeking and instance selection on
    pre-extracted key frames. Never raises: failures give an empty list."""
    try:
        consumed = set(consumed)
        live = [kf for kf in keyframes.frames if (keyframes.video_id, kf.frame_id) not in consumed]
        if not live:
            return []
        kfs = KeyFrameSet(keyframes.video_id, live)
        scores = [detector.score(kf.features) if len(kf.boxes) else np.zeros(0) for kf in live]
        seed = select_video_seed(kfs, detector, params.threshold_for(detector), scores)
        if seed is None:
            return []
        regions, seed_row = _graph_regions(kfs, scores, seed, params.graph_cap)
        aff = video_affinity_params(kfs, params.affinity)
        graph = build_affinity(regions, aff, seed_row)
        mode = graph_shift_mode(graph, seed_row, params.graph_tol, params.graph_max_iter)
        picked = select_tracked_instances(graph, mode, params.instances_per_video)
        return [MinedInstance(keyframes.video_id, regions[r].frame_id, regions[r].box,
                              np.asarray(regions[r].feature), iteration, seed[2],
                              live[seed[0]].frame_id)
                for r in picked]
    except Exception:  # mining must never abort an iteration
        logger.exception("mining failed for video %s", keyframes.video_id)
        return []


def mine_video(clip: VideoClip, detector: DetectorModel, params: MiningParams = MiningParams(),
               consumed: Iterable[tuple[str, int]] = (), iteration: int = 0,
               cfg: DescriptorConfig = DEFAULT_DESCRIPTOR) -> list[MinedInstance]:
    try:
        keyframes = extract_keyframes(clip, params.gist_threshold, cfg)
    except Exception:
        logger.exception("key-frame extraction failed for video %s", clip.video_id)
        return []
    return mine_keyframes(keyframes, detector, params, consumed, iteration)


def seed_frame_of(keyframes: KeyFrameSet, detector: DetectorModel, params: MiningParams,
                  consumed: Iterable[tuple[str, int]] = ()) -> int | None:
    """Frame id holding the video seed under the current ledger, if any."""
    consumed = set(consumed)
    live = [kf for kf in keyframes.frames if (keyframes.video_id, kf.frame_id) not in consumed]
    seed = select_video_seed(KeyFrameSet(keyframes.video_id, live), detector, params.threshold_for(detector))
    return None if seed is None else live[seed[0]].frame_id


def proposal_recall(gts: Sequence[GroundTruthBox], proposals: Sequence[BoundingBox] | np.ndarray,
                    iou_threshold: float = 0.5) -> float:
    if not gts:
        return 1.0
    props = proposals if isinstance(proposals, np.ndarray) else boxes_to_array(proposals)
    if len(props) == 0:
        return 0.0
    ov = iou_matrix(boxes_to_array([g.box for g in gts]), props)
    return float(np.mean(ov.max(axis=1) >= iou_threshold))
