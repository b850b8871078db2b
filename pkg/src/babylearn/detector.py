"""Linear detectors: exemplar ensembles, retrained single SVMs, hard-negative
mining and bounding-box regression."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from .core import DEFAULT_NMS_THRESHOLD, BoundingBox, ScoredBox, boxes_to_array, nms_order

logger = logging.getLogger(__name__)

ENSEMBLE = "ensemble"
SINGLE = "single"
VIOLATION_SCORE = -1.0


@dataclass(frozen=True)
class TrainConfig:
    c_positive: float = 0.5
    c_negative: float = 0.01
    hn_rounds: int = 3
    hn_batch: int = 2000
    convergence_tol: float = 1e-6
    max_epochs: int = 20000
    ridge_lambda: float = 1.0
    # Unit-norm descriptors cannot reach the hinge margin under the exemplar
    # costs; the solver works on features multiplied by feature_scale and a
    # constant bias column of value bias_scale.
    feature_scale: float = 10.0
    bias_scale: float = 10.0

    def __post_init__(self):
        positive = dict(c_positive=self.c_positive, c_negative=self.c_negative,
                        convergence_tol=self.convergence_tol, max_epochs=self.max_epochs,
                        hn_batch=self.hn_batch, ridge_lambda=self.ridge_lambda,
                        feature_scale=self.feature_scale, bias_scale=self.bias_scale)
        for name, value in positive.items():
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.hn_rounds < 0:
            raise ValueError("hn_rounds must be >= 0")


@dataclass(frozen=True)
class LinearModel:
    weights: np.ndarray
    bias: float

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or not np.all(np.isfinite(w)) or not np.isfinite(self.bias):
            raise ValueError("linear model must have a finite 1-D weight vector and bias")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", float(self.bias))

    @property
    def dim(self) -> int:
        return len(self.weights)

    def score(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.shape[-1] != self.dim:
            raise ValueError(f"feature dimension {features.shape[-1]} != model dimension {self.dim}")
        return features @ self.weights + self.bias

    def __eq__(self, other):
        if not isinstance(other, LinearModel):
            return NotImplemented
        return self.bias == other.bias and np.array_equal(self.weights, other.weights)


@dataclass(frozen=True)
class DetectorModel:
    variant: str
    models: tuple[LinearModel, ...]
    class_id: int = 0
    nms_threshold: float = DEFAULT_NMS_THRESHOLD

    def __post_init__(self):
        if self.variant not in (ENSEMBLE, SINGLE):
            raise ValueError(f"unknown detector variant {self.variant!r}")
        if not self.models:
            raise ValueError("detector needs at least one linear model")
        if self.variant == SINGLE and len(self.models) != 1:
            raise ValueError("a single-SVM detector holds exactly one model")
        object.__setattr__(self, "models", tuple(self.models))

    @classmethod
    def ensemble(cls, models: Sequence[LinearModel], class_id: int = 0,
                 nms_threshold: float = DEFAULT_NMS_THRESHOLD) -> "DetectorModel":
        return cls(ENSEMBLE, tuple(models), class_id, nms_threshold)

    @classmethod
    def single(cls, model: LinearModel, class_id: int = 0,
               nms_threshold: float = DEFAULT_NMS_THRESHOLD) -> "DetectorModel":
        return cls(SINGLE, (model,), class_id, nms_threshold)

    @property
    def dim(self) -> int:
        return self.models[0].dim

    def score(self, features: np.ndarray) -> np.ndarray:
        """Raw margin per feature row; ensembles take the max over exemplars."""
        features = np.asarray(features, dtype=np.float64).reshape(-1, self.dim)
        if len(self.models) == 1:
            return self.models[0].score(features)
        w = np.stack([m.weights for m in self.models])
        b = np.array([m.bias for m in self.models])
        return np.max(features @ w.T + b, axis=1)


# ---------------------------------------------------------------------------
# SVM solver: dual coordinate descent for the L2-regularized hinge loss
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _primal(w, Z, y, C):
    reg = 0.5 * np.dot(w, w)
    loss = 0.0
    for i in range(Z.shape[0]):
        m = 1.0 - y[i] * np.dot(w, Z[i])
        if m > 0:
            loss += C[i] * m
    return reg + loss


@numba.njit(cache=True)
def _dual_cd(Z, y, C, tol, max_epochs):
    n, d = Z.shape
    alpha = np.zeros(n)
    w = np.zeros(d)
    qd = np.empty(n)
    for i in range(n):
        qd[i] = np.dot(Z[i], Z[i])
    history = np.empty(max_epochs + 1)
    # dual objective in minimisation form: 0.5 |w|^2 - sum(alpha)
    history[0] = 0.0
    asum = 0.0
    epochs = 0
    for epoch in range(max_epochs):
        for i in range(n):
            if qd[i] <= 0.0:
                continue
            g = y[i] * np.dot(w, Z[i]) - 1.0
            a_old = alpha[i]
            a_new = a_old - g / qd[i]
            if a_new < 0.0:
                a_new = 0.0
            elif a_new > C[i]:
                a_new = C[i]
            delta = a_new - a_old
            if delta != 0.0:
                alpha[i] = a_new
                asum += delta
                w += (delta * y[i]) * Z[i]
        epochs = epoch + 1
        dual_min = 0.5 * np.dot(w, w) - asum
        history[epochs] = dual_min
        primal = _primal(w, Z, y, C)
        gap = primal + dual_min
        if gap <= tol * max(abs(primal), 1e-12):
            break
    return w, alpha, history[: epochs + 1], epochs


@dataclass
class SVMFit:
    model: LinearModel
    objective: float
    dual_history: np.ndarray
    epochs: int
    converged: bool


def _as_matrix(vectors, name: str) -> np.ndarray:
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError(f"need at least one {name} example")
    return arr


def _design(pos: np.ndarray, neg: np.ndarray, cfg: TrainConfig):
    X = np.vstack([pos, neg])
    Z = np.hstack([X * cfg.feature_scale, np.full((len(X), 1), cfg.bias_scale)])
    y = np.concatenate([np.ones(len(pos)), -np.ones(len(neg))])
    C = np.concatenate([np.full(len(pos), cfg.c_positive), np.full(len(neg), cfg.c_negative)])
    return np.ascontiguousarray(Z), y, C


def _solver_weights(model: LinearModel, cfg: TrainConfig) -> np.ndarray:
    return np.concatenate([model.weights / cfg.feature_scale, [model.bias / cfg.bias_scale]])


def svm_objective(model: LinearModel, positives, negatives, cfg: TrainConfig) -> float:
    """Primal regularized hinge objective in the solver's coordinates."""
    pos = _as_matrix(positives, "positive")
    neg = _as_matrix(negatives, "negative")
    Z, y, C = _design(pos, neg, cfg)
    return float(_primal(_solver_weights(model, cfg), Z, y, C))


def fit_linear_svm(positives, negatives, cfg: TrainConfig = TrainConfig()) -> SVMFit:
    pos = _as_matrix(positives, "positive")
    neg = _as_matrix(negatives, "negative")
    if pos.shape[1] != neg.shape[1]:
        raise ValueError(f"dimension mismatch: positives {pos.shape[1]}, negatives {neg.shape[1]}")
    Z, y, C = _design(pos, neg, cfg)
    w, _, history, epochs = _dual_cd(Z, y, C, cfg.convergence_tol, cfg.max_epochs)
    model = LinearModel(w[:-1] * cfg.feature_scale, w[-1] * cfg.bias_scale)
    objective = float(_primal(w, Z, y, C))
    converged = objective + history[-1] <= cfg.convergence_tol * max(abs(objective), 1e-12)
    if not converged:
        logger.warning("SVM solver hit max_epochs=%d before reaching tol %.1e",
                       cfg.max_epochs, cfg.convergence_tol)
    return SVMFit(model, objective, history, epochs, bool(converged))


def train_linear_svm(positives, negatives, cfg: TrainConfig = TrainConfig()) -> LinearModel:
    """Train an asymmetric-cost linear SVM; deterministic for a fixed input order."""
    return fit_linear_svm(positives, negatives, cfg).model


def _batches(source) -> list[np.ndarray]:
    if isinstance(source, np.ndarray):
        source = [source] if source.ndim == 2 else [source.reshape(1, -1)]
    out = []
    for batch in source:
        arr = np.asarray(batch, dtype=np.float64)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if len(arr):
            out.append(arr)
    return out


def hard_negative_mine(model: LinearModel, positives, negatives, negative_source,
                       cfg: TrainConfig = TrainConfig()) -> LinearModel:
    """Grow the negative working set with margin violators and retrain.

    Each round scans every batch of ``negative_source``; source rows scoring
    above -1 that are not yet in the working set are added (at most
    ``hn_batch`` per round, most violating first) and the model is retrained.
    Stops after ``hn_rounds`` rounds or as soon as a scan finds nothing new.
    """
    batches = _batches(negative_source)
    if cfg.hn_rounds == 0 or not batches:
        return model
    pool = np.vstack(batches)
    working = _as_matrix(negatives, "negative")
    taken = np.zeros(len(pool), dtype=bool)
    for round_ in range(cfg.hn_rounds):
        scores = model.score(pool)
        candidates = np.flatnonzero((scores > VIOLATION_SCORE) & ~taken)
        if len(candidates) == 0:
            logger.debug("hard negative mining converged after %d rounds", round_)
            break
        order = candidates[np.lexsort((candidates, -scores[candidates]))][: cfg.hn_batch]
        taken[order] = True
        working = np.vstack([working, pool[order]])
        model = train_linear_svm(positives, working, cfg)
    return model


def train_detector(positives, negative_pool: np.ndarray, cfg: TrainConfig = TrainConfig(),
                   class_id: int = 0, nms_threshold: float = DEFAULT_NMS_THRESHOLD,
                   exemplar: bool = False) -> DetectorModel:
    """Train either one exemplar SVM per positive or one SVM on all positives.

    The first ``hn_batch`` pool rows seed the working set; the rest is the
    hard-negative source.
    """
    pos = _as_matrix(positives, "positive")
    neg = _as_matrix(negative_pool, "negative")
    start, rest = neg[: cfg.hn_batch], neg[cfg.hn_batch:]
    if exemplar:
        models = []
        for x in pos:
            m = train_linear_svm(x[None, :], start, cfg)
            models.append(hard_negative_mine(m, x[None, :], start, [rest], cfg))
        return DetectorModel.ensemble(models, class_id, nms_threshold)
    m = train_linear_svm(pos, start, cfg)
    m = hard_negative_mine(m, pos, start, [rest], cfg)
    return DetectorModel.single(m, class_id, nms_threshold)


def detect(frame_regions: Sequence[tuple[BoundingBox, np.ndarray]], model: DetectorModel,
           frame_id: int = 0) -> list[ScoredBox]:
    """Score every region and suppress overlaps at the model's NMS threshold."""
    if not frame_regions:
        return []
    boxes = [b for b, _ in frame_regions]
    feats = np.vstack([np.asarray(f, dtype=np.float64) for _, f in frame_regions])
    scores = model.score(feats)
    keep = nms_order(boxes_to_array(boxes), scores, model.nms_threshold)
    return [ScoredBox(boxes[i], float(scores[i]), frame_id, model.class_id) for i in keep]


# ---------------------------------------------------------------------------
# Bounding-box regression
# ---------------------------------------------------------------------------


def encode_box(proposal: BoundingBox, target: BoundingBox) -> np.ndarray:
    return np.array([
        (target.cx - proposal.cx) / proposal.w,
        (target.cy - proposal.cy) / proposal.h,
        np.log(target.w / proposal.w),
        np.log(target.h / proposal.h),
    ])


def decode_box(proposal: BoundingBox, deltas: np.ndarray) -> BoundingBox:
    dx, dy, dw, dh = (float(v) for v in deltas)
    return BoundingBox(proposal.cx + dx * proposal.w, proposal.cy + dy * proposal.h,
                       proposal.w * np.exp(dw), proposal.h * np.exp(dh))


@dataclass(frozen=True)
class BBoxRegressor:
    heads: tuple[LinearModel, LinearModel, LinearModel, LinearModel]

    def predict(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        return np.stack([h.score(features) for h in self.heads], axis=-1)


def train_bbox_regressor(pairs: Sequence[tuple[tuple[BoundingBox, np.ndarray], BoundingBox]],
                         ridge_lambda: float = 1.0) -> BBoxRegressor:
    """Closed-form ridge regression of the four box deltas.

    The bias column is penalized like every other weight, so a huge
    ``ridge_lambda`` shrinks all predictions to zero.
    """
    if len(pairs) < 4:
        raise ValueError("insufficient regression data")
    X = np.vstack([np.asarray(f, dtype=np.float64) for (_, f), _ in pairs])
    T = np.vstack([encode_box(p, t) for (p, _), t in pairs])
    Xa = np.hstack([X, np.ones((len(X), 1))])
    gram = Xa.T @ Xa + ridge_lambda * np.eye(Xa.shape[1])
    W = np.linalg.solve(gram, Xa.T @ T)
    heads = tuple(LinearModel(W[:-1, k], W[-1, k]) for k in range(4))
    return BBoxRegressor(heads)


def apply_bbox_regression(reg: BBoxRegressor, box: BoundingBox, feat: np.ndarray) -> BoundingBox:
    return decode_box(box, reg.predict(feat))
