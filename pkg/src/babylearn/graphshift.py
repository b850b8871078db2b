"""Affinity graphs over video regions and replicator-dynamics mode seeking."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numba
import numpy as np

from .core import BoundingBox

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Region:
    frame_id: int
    box: BoundingBox
    feature: np.ndarray
    score: float = 0.0
    region_id: int = 0


@dataclass(frozen=True)
class AffinityParams:
    alpha: float = 0.3
    detect_floor: float = -3.0
    appearance_variance: float | None = None
    position_variance: float | None = None
    frame_width: float = 1.0
    frame_height: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        for name in ("appearance_variance", "position_variance"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive, got {v}")


@dataclass
class AffinityGraph:
    A: np.ndarray
    region_index: list[tuple[int, int]]
    seed_row: int = 0

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def frame_of(self, row: int) -> int:
        return self.region_index[row][0]


@dataclass
class GraphMode:
    y: np.ndarray
    support: list[int]
    density: float
    iterations: int = 0
    degenerate: bool = False
    trajectory: list[float] = field(default_factory=list)
    # largest |sum(y) - 1| over every recorded iterate
    simplex_error: float = 0.0


def _positions(regions: Sequence[Region], params: AffinityParams) -> np.ndarray:
    scale = np.array([params.frame_width, params.frame_height, params.frame_width, params.frame_height])
    return np.array([[r.box.cx, r.box.cy, r.box.w, r.box.h] for r in regions]) / scale


def _sq_dists(X: np.ndarray) -> np.ndarray:
    sq = np.sum(X * X, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * X @ X.T
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def cross_frame_variance(X: np.ndarray, frames: np.ndarray) -> float:
    """Mean squared distance over ordered pairs of rows from different frames.

    Uses per-frame sums, so it costs O(N D) instead of O(N^2 D). Returns 0
    when every row shares one frame.
    """
    X = np.asarray(X, dtype=np.float64)
    frames = np.asarray(frames)
    n = len(X)

    def pair_sum(rows):
        # sum over ordered pairs of |x_i - x_j|^2
        return 2.0 * len(rows) * float(np.sum(rows * rows)) - 2.0 * float(np.sum(rows.sum(axis=0) ** 2))

    total, same, same_pairs = pair_sum(X), 0.0, 0
    for f in np.unique(frames):
        rows = X[frames == f]
        same += pair_sum(rows)
        same_pairs += len(rows) ** 2
    pairs = n * n - same_pairs
    return max(total - same, 0.0) / pairs if pairs else 0.0


def build_affinity(regions: Sequence[Region], params: AffinityParams = AffinityParams(),
                   seed_row: int = 0) -> AffinityGraph:
    """Fuse appearance and location similarity across frames.

    Off-diagonal entries between different frames are
    ``exp(-|x_i-x_j|^2/var_x) + alpha * exp(-|p_i-p_j|^2/var_p)``, with ``p``
    in frame-normalized coordinates. Same-frame pairs are zero. The diagonal
    is 1 for regions whose score exceeds ``detect_floor`` and 0 otherwise.
    When a variance is not given it is taken as the mean squared cross-frame
    distance of the video.
    """
    n = len(regions)
    if n == 0:
        raise ValueError("affinity graph needs at least one region")
    X = np.vstack([np.asarray(r.feature, dtype=np.float64) for r in regions])
    P = _positions(regions, params)
    frames = np.array([r.frame_id for r in regions])
    cross = frames[:, None] != frames[None, :]
    dx = _sq_dists(X)
    dp = _sq_dists(P)

    def variance(given, d):
        if given is not None:
            return given
        v = float(d[cross].mean()) if np.any(cross) else 0.0
        return v if v > 0 else 1.0

    var_x = variance(params.appearance_variance, dx)
    var_p = variance(params.position_variance, dp)
    A = np.exp(-dx / var_x) + params.alpha * np.exp(-dp / var_p)
    A = np.where(cross, A, 0.0)
    A = 0.5 * (A + A.T)
    scores = np.array([r.score for r in regions], dtype=np.float64)
    np.fill_diagonal(A, (scores > params.detect_floor).astype(np.float64))
    index = [(r.frame_id, r.region_id) for r in regions]
    return AffinityGraph(A, index, seed_row)


def _support(y: np.ndarray, support_eps: float) -> np.ndarray:
    return np.flatnonzero(y > support_eps * y.max())


def _stationary_point(A: np.ndarray, S: list[int], near: np.ndarray | None = None) -> np.ndarray | None:
    """Simplex point supported on ``S`` with ``(Ay)_i`` equal across ``S``.

    On a flat face the system is singular and has a whole affine family of
    solutions; the one nearest ``near`` (restricted to ``S``) is returned.
    """
    k = len(S)
    M = np.zeros((k + 1, k + 1))
    M[:k, :k] = A[np.ix_(S, S)]
    M[:k, k] = -1.0
    M[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    try:
        U, sv, Vt = np.linalg.svd(M)
    except np.linalg.LinAlgError:
        return None
    rank = int(np.sum(sv > sv[0] * 1e-10))
    sol = Vt[:rank].T @ ((U[:, :rank].T @ rhs) / sv[:rank])
    if np.linalg.norm(M @ sol - rhs) > 1e-9:
        return None
    if rank < k + 1:
        ref = np.zeros(k + 1)
        if near is not None:
            ref[:k] = near[S] / max(near[S].sum(), 1e-300)
            ref[k] = ref[:k] @ M[:k, :k] @ ref[:k]
        null = Vt[rank:].T
        sol = sol + null @ (null.T @ (ref - sol))
    if not np.all(np.isfinite(sol)) or not np.all(sol[:k] > 0):
        return None
    z = np.zeros(A.shape[0])
    z[S] = sol[:k]
    return z / z.sum()


def _accept(A: np.ndarray, z: np.ndarray | None, S: list[int], g_floor: float, tol: float) -> bool:
    if z is None:
        return False
    Az = A @ z
    g = float(z @ Az)
    outside = np.setdiff1d(np.arange(len(z)), S)
    return bool(g >= g_floor - 1e-12 and np.all(np.abs(Az[S] - g) <= tol)
                and np.all(Az[outside] <= g + tol))


def _polish(A: np.ndarray, y: np.ndarray, support_eps: float, tol: float):
    """Solve the stationarity system on the current support exactly.

    When the solution is infeasible or not a mode, the coordinate with the
    smallest ``y`` is dropped and the system re-solved. Returns the refined
    point when it is feasible, satisfies the outside conditions and does not
    lose density; otherwise ``None``.
    """
    S = list(_support(y, support_eps))
    g_start = float(y @ A @ y)
    while S:
        z = _stationary_point(A, S, y)
        if _accept(A, z, S, g_start, tol):
            return z
        S.remove(min(S, key=lambda i: (y[i], i)))
    return None


@numba.njit(cache=True)
def _replicate(A, y, tol, steps, trajectory, sums, offset):
    """Up to ``steps`` replicator updates; returns (y, steps taken, converged)."""
    for t in range(steps):
        Ay = A @ y
        g = np.dot(y, Ay)
        y_new = y * Ay / g
        y_new /= y_new.sum()
        change = np.max(np.abs(y_new - y))
        y = y_new
        if offset >= 0:
            trajectory[offset + t] = np.dot(y, A @ y)
            sums[offset + t] = y.sum()
        if change < tol:
            return y, t + 1, True
    return y, steps, False


# replicator steps between attempts to jump straight to the mode
CHECK_EVERY = 50
EARLY_SUPPORT = 1e-3


def _infect(A: np.ndarray, y: np.ndarray) -> np.ndarray:
    """One infection/immunization step with exact line search.

    Moves mass toward the row paying most above ``g``, or away from the
    supported row paying least below it, whichever gap is larger. Escapes the
    stalls of the multiplicative update: saddles where an outside row pays
    more than ``g`` but holds no mass, and flat faces where it crawls.
    """
    Ay = A @ y
    g = float(y @ Ay)
    r = Ay - g
    up = int(np.argmax(r))
    held = np.flatnonzero(y > 0)
    down = int(held[np.argmin(r[held])])
    if r[up] >= -r[down]:
        d = -y.copy()
        d[up] += 1.0
        cap = 1.0
    else:
        d = y.copy()
        d[down] -= 1.0
        # keeps y_down >= 0
        cap = y[down] / (1.0 - y[down]) if y[down] < 1.0 else 0.0
    slope = float(d @ Ay)
    curve = float(d @ A @ d)
    eps = cap if curve >= 0 else min(cap, -slope / curve)
    if eps <= 0.0 or slope <= 0.0:
        return y
    z = np.maximum(y + eps * d, 0.0)
    return z / z.sum()


def _kkt_gap(A: np.ndarray, y: np.ndarray, support_eps: float) -> float:
    Ay = A @ y
    g = float(y @ Ay)
    S = _support(y, support_eps)
    inside = float(np.max(np.abs(Ay[S] - g))) if len(S) else 0.0
    return max(inside, float(np.max(Ay - g)))


def graph_shift_mode(graph: AffinityGraph | np.ndarray, start_row: int | None = None,
                     tol: float = 1e-8, max_iter: int = 10000, support_eps: float = 1e-6,
                     record: bool = False) -> GraphMode:
    """Climb ``g(y) = y^T A y`` on the simplex from a seed-dominated start.

    Replicator updates ``y_i <- y_i (Ay)_i / g(y)`` run from
    ``0.9 * e_start + 0.1 * uniform`` until the largest coordinate change is
    below ``tol``. Every few dozen steps the first-order conditions are solved
    exactly on the clearly supported coordinates; a valid mode found that way
    that does not lose density ends the climb early. A stall next to a saddle
    (an outside row still pays more than ``g``) is escaped by shifting mass to
    that row, which also raises the density.
    """
    A = graph.A if isinstance(graph, AffinityGraph) else np.asarray(graph, dtype=np.float64)
    A = np.ascontiguousarray(A, dtype=np.float64)
    if start_row is None:
        start_row = graph.seed_row if isinstance(graph, AffinityGraph) else 0
    n = A.shape[0]
    if not 0 <= start_row < n:
        raise IndexError(f"start_row {start_row} outside graph of order {n}")

    y = np.full(n, 0.1 / n)
    y[start_row] += 0.9
    g = float(y @ A @ y)
    if g <= 0.0:
        e = np.zeros(n)
        e[start_row] = 1.0
        logger.info("graph_shift_mode: zero density at start row %d", start_row)
        return GraphMode(e, [start_row], 0.0, 0, degenerate=True)

    trajectory = [g] if record else []
    drift = abs(float(y.sum()) - 1.0)
    buffer = np.empty(CHECK_EVERY if record else 0)
    sums = np.empty(CHECK_EVERY if record else 0)

    def note(point):
        nonlocal drift
        if record:
            trajectory.append(float(point @ A @ point))
            drift = max(drift, abs(float(point.sum()) - 1.0))

    it = 0
    while it < max_iter:
        steps = min(CHECK_EVERY, max_iter - it)
        y, done, settled = _replicate(A, y, tol, steps, buffer, sums, 0 if record else -1)
        it += done
        if record and done:
            trajectory.extend(buffer[:done].tolist())
            drift = max(drift, float(np.max(np.abs(sums[:done] - 1.0))))
        if not settled:
            S = [int(i) for i in _support(y, EARLY_SUPPORT)]
            z = _stationary_point(A, S, y)
            settled = _accept(A, z, S, float(y @ A @ y), 10 * tol)
            if settled:
                y = z
                note(y)
        if settled:
            break
    # finish with infection/immunization steps, polishing as they go; a point
    # that already meets the mode conditions is kept, so on a flat face the
    # dynamics' support is not traded for a smaller tied one
    steps = 0
    while steps < max_iter and _kkt_gap(A, y, support_eps) > 10 * tol:
        polished = _polish(A, y, support_eps, 10 * tol)
        if polished is not None:
            y = polished
            note(y)
            if _kkt_gap(A, y, support_eps) <= 10 * tol:
                break
        stalled = False
        for _ in range(CHECK_EVERY):
            y_next = _infect(A, y)
            steps += 1
            if y_next is y:
                stalled = True
                break
            y = y_next
            note(y)
        if stalled:
            break
    it += steps
    support = [int(i) for i in _support(y, support_eps)]
    return GraphMode(y, support, float(y @ A @ y), it, False, trajectory, drift if record else 0.0)


def mode_kkt_violation(A: np.ndarray, mode: GraphMode) -> float:
    """Largest breach of the first-order mode conditions at ``mode.y``."""
    Ay = A @ mode.y
    g = float(mode.y @ Ay)
    S = np.array(mode.support)
    outside = np.setdiff1d(np.arange(len(mode.y)), S)
    inner = float(np.max(np.abs(Ay[S] - g))) if len(S) else 0.0
    outer = float(np.max(Ay[outside] - g)) if len(outside) else 0.0
    return max(inner, outer, 0.0)


def select_tracked_instances(graph: AffinityGraph, mode: GraphMode, count: int = 2) -> list[int]:
    """Rows from the seed's subgraph most similar to the seed, one per frame."""
    seed = graph.seed_row
    if seed not in mode.support:
        logger.info("select_tracked_instances: mode drift, seed row %d left the support", seed)
        return []
    candidates = [r for r in mode.support if r != seed]
    candidates.sort(key=lambda r: (-graph.A[seed, r], r))
    chosen: list[int] = []
    used_frames = {graph.frame_of(seed)}
    for r in candidates:
        if len(chosen) >= count:
            break
        f = graph.frame_of(r)
        if f in used_frames:
            continue
        chosen.append(r)
        used_frames.add(f)
    return chosen


def dump_graph(graph: AffinityGraph, mode: GraphMode) -> str:
    """Plain-text debug dump of the matrix, trajectory and support."""
    lines = [f"order {graph.n} seed {graph.seed_row}"]
    for i, (f, r) in enumerate(graph.region_index):
        row = " ".join(f"{v:.6g}" for v in graph.A[i])
        lines.append(f"row {i} frame {f} region {r}: {row}")
    lines.append("trajectory " + " ".join(f"{v:.12g}" for v in mode.trajectory))
    lines.append("y " + " ".join(f"{v:.6g}" for v in mode.y))
    lines.append("support " + " ".join(str(s) for s in mode.support))
    lines.append(f"density {mode.density:.12g}")
    return "\n".join(lines) + "\n"
