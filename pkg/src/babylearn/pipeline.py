"""The self-paced loop: seeds, negatives, exemplar bootstrap, video mining
iterations, box regression, evaluation and state persistence."""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
from scipy.cluster.vq import kmeans2

from .config import RunConfig
from .core import BoundingBox, GroundTruthBox, ScoredBox, average_precision, boxes_to_array, iou_matrix, nms_order
from .detector import (BBoxRegressor, DetectorModel, LinearModel, decode_box,
                       train_bbox_regressor, train_detector)
from .features import DescriptorConfig, FrameFeatures
from .mining import KeyFrameSet, MinedInstance, VideoClip, extract_keyframes, mine_keyframes

logger = logging.getLogger(__name__)

STATE_FORMAT = "babylearn-state"
STATE_VERSION = 1
SEED_SOURCE = "seed"
BACKGROUND = -1


class VideoSource(Protocol):
    video_id: str

    def clip(self) -> VideoClip: ...


class LabeledFrame(Protocol):
    image: np.ndarray
    gts: list[GroundTruthBox]
    proposals: list[BoundingBox]
    frame_id: int


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------


@dataclass
class NegativePool:
    features: np.ndarray
    class_ids: np.ndarray  # BACKGROUND for background regions, else the concept id

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64).reshape(len(self.class_ids), -1)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.class_ids)

    def for_concept(self, class_id: int) -> np.ndarray:
        return self.features[self.class_ids != class_id]

    def extended(self, features: np.ndarray, class_id: int) -> "NegativePool":
        features = np.asarray(features, dtype=np.float64).reshape(-1, self.features.shape[1])
        return NegativePool(np.vstack([self.features, features]),
                            np.concatenate([self.class_ids, np.full(len(features), class_id)]))

    def __eq__(self, other):
        if not isinstance(other, NegativePool):
            return NotImplemented
        return np.array_equal(self.features, other.features) and np.array_equal(self.class_ids, other.class_ids)


@dataclass
class IterationRecord:
    iteration: int
    class_id: int
    pool_size: int
    videos_mined: int
    mined: int
    ap: float = math.nan

    def __eq__(self, other):
        if not isinstance(other, IterationRecord):
            return NotImplemented
        same_ap = self.ap == other.ap or (math.isnan(self.ap) and math.isnan(other.ap))
        return (self.iteration, self.class_id, self.pool_size, self.videos_mined, self.mined) == \
            (other.iteration, other.class_id, other.pool_size, other.videos_mined, other.mined) and same_ap


@dataclass
class PipelineState:
    iteration: int
    positives: dict[int, list[MinedInstance]]
    negatives: NegativePool
    detectors: dict[int, DetectorModel]
    regressors: dict[int, BBoxRegressor | None] = field(default_factory=dict)
    consumed: set[tuple[str, int]] = field(default_factory=set)
    rng_seed: int = 0
    history: list[IterationRecord] = field(default_factory=list)

    @property
    def classes(self) -> list[int]:
        return sorted(self.detectors)

    def copy(self) -> "PipelineState":
        return PipelineState(self.iteration, {c: list(p) for c, p in self.positives.items()},
                             self.negatives, dict(self.detectors), dict(self.regressors),
                             set(self.consumed), self.rng_seed, list(self.history))

    def positive_features(self, class_id: int) -> np.ndarray:
        return np.vstack([p.feature for p in self.positives[class_id]])


# ---------------------------------------------------------------------------
# Seeds and negatives
# ---------------------------------------------------------------------------


def select_seeds(features: np.ndarray, k: int = 10, n_seeds: int = 2, rng_seed: int = 0) -> list[int]:
    """Indices of the members nearest the centroids of the ``n_seeds`` largest
    k-means clusters. Ties go to the lower cluster or sample index."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("need a non-empty (N, D) positive set")
    if len(X) <= n_seeds:
        return list(range(len(X)))
    n_distinct = len(np.unique(X, axis=0))
    k = max(1, min(k, n_distinct))
    if k == 1:
        centroids = X.mean(axis=0, keepdims=True)
        labels = np.zeros(len(X), dtype=np.int64)
    else:
        centroids, labels = kmeans2(X, k, iter=100, minit="++", seed=rng_seed, missing="raise")
    sizes = np.bincount(labels, minlength=len(centroids))
    clusters = sorted(range(len(centroids)), key=lambda c: (-sizes[c], c))
    chosen = []
    for c in clusters:
        if len(chosen) >= n_seeds or sizes[c] == 0:
            break
        members = np.flatnonzero(labels == c)
        d = np.sum((X[members] - centroids[c]) ** 2, axis=1)
        chosen.append(int(members[np.argmin(d)]))
    return chosen


def labeled_instances(images: Iterable[LabeledFrame], class_id: int,
                      descriptor: DescriptorConfig) -> tuple[list[BoundingBox], np.ndarray]:
    """Ground-truth boxes of one class and their descriptors."""
    boxes, feats = [], []
    for img in images:
        own = [g.box for g in img.gts if g.class_id == class_id]
        if own:
            boxes.extend(own)
            feats.append(FrameFeatures(img.image, descriptor).describe(own))
    if not feats:
        return [], np.zeros((0, descriptor.dim))
    return boxes, np.vstack(feats)


def instance_negatives(images: Iterable[LabeledFrame], descriptor: DescriptorConfig,
                       min_iou: float = 0.5) -> list[tuple[np.ndarray, int]]:
    """Proposals overlapping an annotated object at ``min_iou`` or more,
    labeled with that object's class."""
    out = []
    for img in images:
        if not img.gts or not img.proposals:
            continue
        props = boxes_to_array(img.proposals)
        ov = iou_matrix(props, boxes_to_array([g.box for g in img.gts]))
        best = ov.argmax(axis=1)
        hit = ov.max(axis=1) >= min_iou
        if not hit.any():
            continue
        feats = FrameFeatures(img.image, descriptor).describe(props[hit])
        for f, j in zip(feats, best[hit]):
            out.append((f, img.gts[j].class_id))
    return out


def assemble_negative_pool(background_frames: Sequence[tuple[np.ndarray, Sequence[BoundingBox] | None]],
                           other_concept_instances: Sequence[tuple[np.ndarray, int]],
                           descriptor: DescriptorConfig,
                           proposal_gen: Callable[[np.ndarray], np.ndarray] | None = None,
                           rng_seed: int = 0) -> NegativePool:
    """Every background proposal plus every other-concept instance, shuffled
    deterministically so any prefix mixes both sources."""
    from .mining import grid_proposals

    feats, ids = [], []
    for image, proposals in background_frames:
        if proposals is None:
            h, w = image.shape[:2]
            boxes = proposal_gen(image) if proposal_gen else grid_proposals(w, h)
        else:
            boxes = boxes_to_array(proposals)
        if len(boxes):
            feats.append(FrameFeatures(image, descriptor).describe(boxes))
            ids.append(np.full(len(boxes), BACKGROUND))
    if other_concept_instances:
        feats.append(np.vstack([f for f, _ in other_concept_instances]))
        ids.append(np.array([c for _, c in other_concept_instances]))
    if not feats:
        raise ValueError("no negatives")
    X = np.vstack(feats)
    y = np.concatenate(ids)
    order = np.random.default_rng(rng_seed).permutation(len(y))
    return NegativePool(X[order], y[order])


def seed_instances(boxes: Sequence[BoundingBox], features: np.ndarray) -> list[MinedInstance]:
    return [MinedInstance(SEED_SOURCE, i, b, np.asarray(f), 0, 0.0)
            for i, (b, f) in enumerate(zip(boxes, features))]


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------


def bootstrap(seeds: dict[int, list[MinedInstance]], negatives: NegativePool,
              cfg: RunConfig = RunConfig()) -> PipelineState:
    """One exemplar SVM per seed, each with hard-negative mining."""
    tcfg = cfg.train_config()
    detectors = {}
    for c in sorted(seeds):
        if not seeds[c]:
            raise ValueError(f"concept {c} has no seed instances")
        pos = np.vstack([s.feature for s in seeds[c]])
        detectors[c] = train_detector(pos, negatives.for_concept(c), tcfg, c, cfg.nms_threshold, exemplar=True)
    history = [IterationRecord(0, c, len(seeds[c]), 0, 0) for c in sorted(seeds)]
    return PipelineState(0, {c: list(s) for c, s in seeds.items()}, negatives, detectors,
                         {c: None for c in seeds}, set(), cfg.rng_seed, history)


class KeyFrameCache:
    """Key frames with proposal features per video, extracted once.

    Features never change between iterations, so the cache is shared by
    every concept and iteration of a run.
    """

    def __init__(self, gist_threshold: float, descriptor: DescriptorConfig):
        self.gist_threshold = gist_threshold
        self.descriptor = descriptor
        self._store: dict[str, KeyFrameSet] = {}
        # ground truth kept aside for evaluation only; mining never sees it
        self.annotations: dict[str, dict[int, list[GroundTruthBox]]] = {}

    def get(self, video: VideoSource | VideoClip) -> KeyFrameSet:
        vid = video.video_id
        if vid not in self._store:
            clip = video if isinstance(video, VideoClip) else video.clip()
            self._store[vid] = extract_keyframes(clip, self.gist_threshold, self.descriptor)
            self.annotations[vid] = {f.frame_id: list(f.annotations) for f in clip.frames}
        return self._store[vid]

    def items(self):
        return self._store.items()

    def __len__(self) -> int:
        return len(self._store)


def video_batch(videos: Sequence, iteration: int, per_iteration: int) -> list:
    """Rolling window over the corpus for a 0-based iteration index."""
    n = len(videos)
    if n == 0:
        return []
    per_iteration = min(per_iteration, n)
    start = (iteration * per_iteration) % n
    return [videos[(start + i) % n] for i in range(per_iteration)]


def videos_per_iteration(cfg: RunConfig, corpus_size: int) -> int:
    # 0 rescans the whole corpus each iteration; the ledger keeps frames from
    # being mined twice
    if cfg.videos_per_iteration > 0:
        return cfg.videos_per_iteration
    return max(1, corpus_size)


def run_iteration(state: PipelineState, batch: Sequence[VideoSource | VideoClip],
                  cfg: RunConfig = RunConfig(), cache: KeyFrameCache | None = None) -> PipelineState:
    """Mine every video for every concept, then retrain concepts that grew.

    The input state is left untouched; the ledger is read as a snapshot
    during mining and extended only once all concepts have been mined.
    """
    if cache is None:
        cache = KeyFrameCache(cfg.gist_threshold, cfg.descriptor())
    params = cfg.mining_params()
    new = state.copy()
    iteration = state.iteration + 1
    snapshot = frozenset(state.consumed)
    keyframes = [cache.get(v) for v in batch]

    mined: dict[int, list[MinedInstance]] = {}
    for c in state.classes:
        det = state.detectors[c]

        def work(kfs, det=det):
            return mine_keyframes(kfs, det, params, snapshot, iteration)

        if cfg.workers > 1:
            with ThreadPoolExecutor(cfg.workers) as pool:
                per_video = list(pool.map(work, keyframes))
        else:
            per_video = [work(k) for k in keyframes]
        mined[c] = [inst for found in per_video for inst in found]
        videos_mined = sum(1 for found in per_video if found)
        new.history.append(IterationRecord(iteration, c, len(state.positives[c]) + len(mined[c]),
                                           videos_mined, len(mined[c])))

    for c in state.classes:
        for inst in mined[c]:
            new.consumed.add((inst.video_id, inst.frame_id))
            new.consumed.add((inst.video_id, inst.seed_frame_id))
        new.positives[c].extend(mined[c])
        if cfg.mined_as_negatives and mined[c]:
            new.negatives = new.negatives.extended(np.vstack([m.feature for m in mined[c]]), c)

    tcfg = cfg.train_config()
    for c in state.classes:
        if not mined[c]:
            logger.info("iteration %d: concept %d mined nothing, keeping its detector", iteration, c)
            continue
        new.detectors[c] = train_detector(new.positive_features(c), new.negatives.for_concept(c),
                                          tcfg, c, cfg.nms_threshold, exemplar=False)
    new.iteration = iteration
    return new


def knowledge_update(state: PipelineState, descriptor: DescriptorConfig) -> DescriptorConfig:
    """Feature-refresh hook run between the main and the extra iterations.

    A learned backbone would be fine-tuned on the positive pools here and
    return a new descriptor parameterization; the hand-crafted descriptor
    has nothing to learn, so this returns it unchanged.
    """
    return descriptor


# ---------------------------------------------------------------------------
# Box regression
# ---------------------------------------------------------------------------


def regression_top_k(cfg: RunConfig, n_candidates: int) -> int:
    return max(1, min(cfg.regression_top_k, int(math.ceil(cfg.regression_fraction * n_candidates))))


def train_regressor_stage(state: PipelineState, cache: KeyFrameCache,
                          cfg: RunConfig = RunConfig()) -> PipelineState:
    """Fit one box regressor per concept from its most confident detections.

    The best detection of every cached key frame is a candidate; the top
    ``regression_top_k`` of them act as pseudo ground truth, each paired with
    the proposals of its frame that overlap it above ``regression_iou``.
    """
    if state.iteration < 1:
        raise ValueError("box regression needs at least one completed iteration")
    new = state.copy()
    frames = [kf for _, kfs in sorted(cache.items()) for kf in kfs.frames if len(kf.boxes)]
    for c in state.classes:
        det = state.detectors[c]
        candidates = []
        for k, kf in enumerate(frames):
            s = det.score(kf.features)
            i = int(np.argmax(s))
            candidates.append((float(s[i]), k, i))
        candidates.sort(key=lambda t: (-t[0], t[1], t[2]))
        top = candidates[: regression_top_k(cfg, len(candidates))]
        pairs = []
        for _, k, i in top:
            kf = frames[k]
            ov = iou_matrix(kf.boxes[i:i + 1], kf.boxes)[0]
            target = BoundingBox(*kf.boxes[i])
            # the detection itself would be a zero-offset pair that only biases toward no move
            for j in np.flatnonzero((ov > cfg.regression_iou) & (np.arange(len(ov)) != i)):
                pairs.append(((BoundingBox(*kf.boxes[j]), kf.features[j]), target))
        try:
            new.regressors[c] = train_bbox_regressor(pairs, cfg.ridge_lambda)
        except ValueError:
            logger.warning("concept %d: only %d regression pairs, no regressor", c, len(pairs))
            new.regressors[c] = None
    return new


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class Detection:
    raw: ScoredBox
    refined: ScoredBox


def detect_frames(state: PipelineState, images: Sequence[LabeledFrame], cfg: RunConfig = RunConfig(),
                  use_regression: bool = False) -> dict[int, list[Detection]]:
    """Per-concept detections on labeled frames after optional regression and NMS."""
    descriptor = cfg.descriptor()
    out: dict[int, list[Detection]] = {c: [] for c in state.classes}
    for img in images:
        if not img.proposals:
            continue
        boxes = boxes_to_array(img.proposals)
        feats = FrameFeatures(img.image, descriptor).describe(boxes)
        for c in state.classes:
            det = state.detectors[c]
            scores = det.score(feats)
            top = np.lexsort((np.arange(len(scores)), -scores))[: cfg.eval_top_k]
            raw = boxes[top]
            refined = raw
            reg = state.regressors.get(c)
            if use_regression and reg is not None:
                refined = np.array([decode_box(BoundingBox(*b), d).as_array()
                                    for b, d in zip(raw, reg.predict(feats[top]))])
            keep = nms_order(refined, scores[top], det.nms_threshold)
            for i in keep:
                s = float(scores[top[i]])
                out[c].append(Detection(ScoredBox(BoundingBox(*raw[i]), s, img.frame_id, c),
                                        ScoredBox(BoundingBox(*refined[i]), s, img.frame_id, c)))
    return out


def evaluate(state: PipelineState, images: Sequence[LabeledFrame], cfg: RunConfig = RunConfig(),
             use_regression: bool = False) -> dict[int, float]:
    if not images:
        raise ValueError("empty test set")
    dets = detect_frames(state, images, cfg, use_regression)
    gts = [g for img in images for g in img.gts]
    result = {}
    for c in state.classes:
        class_gts = [g for g in gts if g.class_id == c]
        result[c] = average_precision([d.refined for d in dets[c]], class_gts, cfg.match_iou)
    return result


def center_errors(dets: Sequence[Detection], images: Sequence[LabeledFrame], class_id: int,
                  match_iou: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Center distance to the matched ground truth for raw and refined boxes
    of every raw detection that overlaps a ground truth at ``match_iou``."""
    by_frame: dict[int, list[GroundTruthBox]] = {}
    for img in images:
        by_frame[img.frame_id] = [g for g in img.gts if g.class_id == class_id]
    raw_err, ref_err = [], []
    for d in dets:
        gts = by_frame.get(d.raw.frame_id, [])
        if not gts:
            continue
        ov = iou_matrix(d.raw.box.as_array(), boxes_to_array([g.box for g in gts]))[0]
        j = int(np.argmax(ov))
        if ov[j] < match_iou:
            continue
        g = gts[j].box
        raw_err.append(math.hypot(d.raw.box.cx - g.cx, d.raw.box.cy - g.cy))
        ref_err.append(math.hypot(d.refined.box.cx - g.cx, d.refined.box.cy - g.cy))
    return np.array(raw_err), np.array(ref_err)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def _model_record(kind: str, class_id: int, index: int, m: LinearModel, **extra) -> dict:
    return {"kind": kind, "class_id": class_id, "index": index, "dim": m.dim,
            "weights": m.weights.tolist(), "bias": m.bias, **extra}


def _state_records(state: PipelineState) -> list[dict]:
    recs = [{"kind": "meta", "iteration": state.iteration, "rng_seed": state.rng_seed,
             "dim": int(state.negatives.features.shape[1])}]
    for c in state.classes:
        det = state.detectors[c]
        recs.append({"kind": "detector", "class_id": c, "variant": det.variant,
                     "nms_threshold": det.nms_threshold, "n_models": len(det.models)})
        for i, m in enumerate(det.models):
            recs.append(_model_record("svm", c, i, m))
    for c in sorted(state.regressors):
        reg = state.regressors[c]
        recs.append({"kind": "regressor", "class_id": c, "present": reg is not None})
        if reg is not None:
            for i, m in enumerate(reg.heads):
                recs.append(_model_record("regression_head", c, i, m))
    for c in sorted(state.positives):
        for p in state.positives[c]:
            recs.append({"kind": "positive", "class_id": c, "video_id": p.video_id,
                         "frame_id": p.frame_id, "box": [p.box.cx, p.box.cy, p.box.w, p.box.h],
                         "feature": np.asarray(p.feature).tolist(),
                         "source_iteration": p.source_iteration, "seed_score": p.seed_score,
                         "seed_frame_id": p.seed_frame_id})
    for f, cid in zip(state.negatives.features, state.negatives.class_ids):
        recs.append({"kind": "negative", "class_id": int(cid), "feature": f.tolist()})
    for vid, fid in sorted(state.consumed):
        recs.append({"kind": "consumed", "video_id": vid, "frame_id": int(fid)})
    for h in state.history:
        recs.append({"kind": "history", "iteration": h.iteration, "class_id": h.class_id,
                     "pool_size": h.pool_size, "videos_mined": h.videos_mined, "mined": h.mined,
                     "ap": None if math.isnan(h.ap) else h.ap})
    return recs


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write through a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_state(state: PipelineState, path: str | Path) -> None:
    """Versioned line-delimited JSON: header, one record per line, end marker."""
    recs = _state_records(state)
    lines = [json.dumps({"format": STATE_FORMAT, "version": STATE_VERSION, "records": len(recs)})]
    lines += [json.dumps(r) for r in recs]
    lines.append(json.dumps({"kind": "end", "records": len(recs)}))
    atomic_write_text(path, "\n".join(lines) + "\n")


class StateFileError(ValueError):
    pass


def load_state(path: str | Path) -> PipelineState:
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        raise StateFileError(f"{path}: empty state file")
    try:
        header = json.loads(lines[0])
        body = [json.loads(l) for l in lines[1:]]
    except json.JSONDecodeError as exc:
        raise StateFileError(f"{path}: corrupted state file ({exc})") from exc
    if header.get("format") != STATE_FORMAT:
        raise StateFileError(f"{path}: not a state file")
    if header.get("version") != STATE_VERSION:
        raise StateFileError(f"{path}: unsupported state version {header.get('version')}")
    n = header.get("records")
    if not body or body[-1].get("kind") != "end" or body[-1].get("records") != n or len(body) - 1 != n:
        raise StateFileError(f"{path}: truncated state file")
    body = body[:-1]

    meta = body[0]
    if meta.get("kind") != "meta":
        raise StateFileError(f"{path}: missing meta record")
    dim = meta["dim"]
    detectors_meta, svms, reg_meta, heads = {}, {}, {}, {}
    positives: dict[int, list[MinedInstance]] = {}
    neg_feats, neg_ids, consumed, history = [], [], set(), []
    for r in body[1:]:
        kind = r["kind"]
        if kind == "detector":
            detectors_meta[r["class_id"]] = r
        elif kind == "svm":
            svms.setdefault(r["class_id"], {})[r["index"]] = LinearModel(np.array(r["weights"]), r["bias"])
        elif kind == "regressor":
            reg_meta[r["class_id"]] = r["present"]
        elif kind == "regression_head":
            heads.setdefault(r["class_id"], {})[r["index"]] = LinearModel(np.array(r["weights"]), r["bias"])
        elif kind == "positive":
            positives.setdefault(r["class_id"], []).append(MinedInstance(
                r["video_id"], r["frame_id"], BoundingBox(*r["box"]), np.array(r["feature"]),
                r["source_iteration"], r["seed_score"], r["seed_frame_id"]))
        elif kind == "negative":
            neg_feats.append(r["feature"])
            neg_ids.append(r["class_id"])
        elif kind == "consumed":
            consumed.add((r["video_id"], r["frame_id"]))
        elif kind == "history":
            history.append(IterationRecord(r["iteration"], r["class_id"], r["pool_size"],
                                           r["videos_mined"], r["mined"],
                                           math.nan if r["ap"] is None else r["ap"]))
        else:
            raise StateFileError(f"{path}: unknown record kind {kind!r}")

    detectors = {}
    for c, m in detectors_meta.items():
        models = [svms.get(c, {}).get(i) for i in range(m["n_models"])]
        if any(x is None for x in models):
            raise StateFileError(f"{path}: detector {c} is missing models")
        detectors[c] = DetectorModel(m["variant"], tuple(models), c, m["nms_threshold"])
    regressors: dict[int, BBoxRegressor | None] = {}
    for c, present in reg_meta.items():
        if present:
            hs = [heads.get(c, {}).get(i) for i in range(4)]
            if any(h is None for h in hs):
                raise StateFileError(f"{path}: regressor {c} is missing heads")
            regressors[c] = BBoxRegressor(tuple(hs))
        else:
            regressors[c] = None
    negatives = NegativePool(np.array(neg_feats, dtype=np.float64).reshape(-1, dim), np.array(neg_ids))
    for c in detectors:
        positives.setdefault(c, [])
    return PipelineState(meta["iteration"], positives, negatives, detectors, regressors,
                         consumed, meta["rng_seed"], history)


def states_equal(a: PipelineState, b: PipelineState) -> bool:
    return (a.iteration == b.iteration and a.rng_seed == b.rng_seed and a.consumed == b.consumed
            and a.positives == b.positives and a.negatives == b.negatives
            and a.detectors == b.detectors and a.regressors == b.regressors
            and a.history == b.history)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("iteration", "class_id", "ap", "pool_size", "videos_mined")


def report_rows(state: PipelineState) -> list[dict]:
    return [{"iteration": h.iteration, "class_id": h.class_id, "ap": h.ap,
             "pool_size": h.pool_size, "videos_mined": h.videos_mined} for h in state.history]


def format_report(rows: Sequence[dict]) -> str:
    lines = [",".join(REPORT_COLUMNS)]
    for r in rows:
        ap = "" if r["ap"] is None or (isinstance(r["ap"], float) and math.isnan(r["ap"])) else repr(float(r["ap"]))
        lines.append(f"{r['iteration']},{r['class_id']},{ap},{r['pool_size']},{r['videos_mined']}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Corpus-level drivers
# ---------------------------------------------------------------------------


def corpus_seeds(corpus, cfg: RunConfig = RunConfig()) -> dict[int, list[MinedInstance]]:
    """k-means seed selection over each concept's labeled seed-source images."""
    descriptor = cfg.descriptor()
    seeds = {}
    for c in sorted(corpus.seed_images):
        boxes, feats = labeled_instances(corpus.seed_images[c], c, descriptor)
        if not boxes:
            raise ValueError(f"concept {c} has no labeled seed-source instances")
        idx = select_seeds(feats, cfg.kmeans_k, cfg.seed_count, cfg.rng_seed)
        seeds[c] = seed_instances([boxes[i] for i in idx], feats[idx])
    return seeds


def corpus_negatives(corpus, cfg: RunConfig = RunConfig()) -> NegativePool:
    descriptor = cfg.descriptor()
    background = [(img.image, img.proposals) for img in corpus.background_images]
    others = instance_negatives(corpus.learned_images, descriptor)
    return assemble_negative_pool(background, others, descriptor, rng_seed=cfg.rng_seed)


def bootstrap_corpus(corpus, cfg: RunConfig = RunConfig()) -> PipelineState:
    return bootstrap(corpus_seeds(corpus, cfg), corpus_negatives(corpus, cfg), cfg)


def set_ap(state: PipelineState, aps: dict[int, float]) -> None:
    """Attach AP values to the history records of the current iteration."""
    for h in state.history:
        if h.iteration == state.iteration and h.class_id in aps:
            h.ap = float(aps[h.class_id])


def run_loop(state: PipelineState, corpus, cfg: RunConfig = RunConfig(), n_iterations: int = 1,
             cache: KeyFrameCache | None = None, evaluate_each: bool = True,
             on_iteration: Callable[[PipelineState], None] | None = None) -> PipelineState:
    """Run ``n_iterations`` mining iterations over the corpus video schedule."""
    if cache is None:
        cache = KeyFrameCache(cfg.gist_threshold, cfg.descriptor())
    videos = list(corpus.videos)
    per_iter = videos_per_iteration(cfg, len(videos))
    for _ in range(n_iterations):
        batch = video_batch(videos, state.iteration, per_iter)
        state = run_iteration(state, batch, cfg, cache)
        if state.iteration == cfg.n_iterations and cfg.extra_iterations > 0:
            descriptor = knowledge_update(state, cache.descriptor)
            if descriptor != cache.descriptor:
                cache = KeyFrameCache(cfg.gist_threshold, descriptor)
        if evaluate_each and corpus.test_images:
            set_ap(state, evaluate(state, corpus.test_images, cfg))
        if on_iteration is not None:
            on_iteration(state)
    return state
