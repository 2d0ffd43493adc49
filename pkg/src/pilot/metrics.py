"""Evaluation metrics: assignment-matched DoA error, frame recall, Mann-Whitney U."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

ACTIVITY_THRESHOLD = 0.5


class DegenerateSampleError(ValueError):
    """All observations are identical, so the rank statistic has zero variance."""


def angular_error(pred, target, conventional: bool = False) -> np.ndarray:
    """DoA error in radians between (..., 2) angle arrays; see :func:`pilot.objective.doa_error`.

    Evaluated in the haversine form, which equals the law-of-cosines
    expression but stays accurate near 0 and pi: identical directions give
    exactly 0 and antipodes exactly pi.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    a1, e1 = pred[..., 0], pred[..., 1]
    a2, e2 = target[..., 0], target[..., 1]
    if conventional:
        a1, e1, a2, e2 = e1, a1, e2, a2
    h = np.sin(0.5 * (a2 - a1)) ** 2 + np.cos(a1) * np.cos(a2) * np.sin(0.5 * (e2 - e1)) ** 2
    return 2.0 * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def hungarian(cost) -> np.ndarray:
    """Minimum-cost assignment (Kuhn-Munkres with potentials, O(M^3)).

    Rectangular inputs are padded to square with a sentinel cost larger than
    any real entry. Returns ``perm`` over the padded square, row ``i`` taking
    column ``perm[i]``; indices beyond the original shape are padding.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    if np.isnan(cost).any():
        raise ValueError("cost matrix contains NaN")
    rows, cols = cost.shape
    n = max(rows, cols)
    if n == 0:
        return np.zeros(0, dtype=int)
    if rows != cols:
        sentinel = (np.abs(cost).max() + 1.0) * n if cost.size else 1.0
        square = np.full((n, n), sentinel)
        square[:rows, :cols] = cost
        cost = square

    # 1-based potentials formulation; column 0 is a virtual start column
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    owner = np.zeros(n + 1, dtype=int)  # owner[j]: row matched to column j
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            candidates = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(candidates)) + 1
            delta = candidates[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    perm = np.empty(n, dtype=int)
    perm[owner[1:] - 1] = np.arange(n)
    return perm


def assign(cost) -> tuple[np.ndarray, np.ndarray]:
    """Matched (rows, cols) of real entries of a possibly rectangular cost matrix."""
    cost = np.asarray(cost, dtype=np.float64)
    rows, cols = cost.shape
    perm = hungarian(cost)
    r = np.arange(min(len(perm), rows))
    keep = perm[r] < cols
    return r[keep], perm[r][keep]


@dataclass
class FrameResult:
    recall_hit: bool
    predicted_count: int
    true_count: int
    errors: list[float]
    pred_slots: list[int]  # prediction slot behind each error
    true_slots: list[int]


def frame_metrics(pred_gamma, pred_doa, true_active, true_doa, threshold: float = ACTIVITY_THRESHOLD,
                  conventional: bool = False) -> FrameResult:
    """Count agreement and Hungarian-matched DoA errors for one frame.

    Args:
        pred_gamma: (N,) predicted activity probabilities.
        pred_doa: (N, 2) predicted angles.
        true_active: (N,) 0/1 ground-truth activity.
        true_doa: (N, 2) ground-truth angles.
    """
    pred_idx = np.flatnonzero(np.asarray(pred_gamma) > threshold)
    true_idx = np.flatnonzero(np.asarray(true_active) > 0.5)
    hit = len(pred_idx) == len(true_idx)
    if len(pred_idx) == 0 or len(true_idx) == 0:
        return FrameResult(hit, len(pred_idx), len(true_idx), [], [], [])
    pd = np.asarray(pred_doa)[pred_idx]
    td = np.asarray(true_doa)[true_idx]
    cost = angular_error(pd[:, None, :], td[None, :, :], conventional)
    r, c = assign(cost)
    return FrameResult(hit, len(pred_idx), len(true_idx), [float(cost[i, j]) for i, j in zip(r, c)],
                       [int(pred_idx[i]) for i in r], [int(true_idx[j]) for j in c])


def midranks(values) -> np.ndarray:
    """1-based ranks with ties replaced by their average rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    start = 0
    for end in range(1, len(values) + 1):
        if end == len(values) or sorted_vals[end] != sorted_vals[start]:
            ranks[order[start:end]] = 0.5 * (start + end + 1)
            start = end
    return ranks


def mann_whitney_u_one_sided(sample_a, sample_b) -> tuple[float, float]:
    """U statistic of ``sample_a`` and the p-value for "a is stochastically smaller than b".

    Normal approximation with tie-corrected variance and a 0.5 continuity
    correction. ``U_a`` counts pairs where a exceeds b, ties counting half.
    """
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    na, nb = len(a), len(b)
    if na == 0 or nb == 0:
        raise ValueError("both samples must be non-empty")
    ranks = midranks(np.concatenate([a, b]))
    u_a = ranks[:na].sum() - na * (na + 1) / 2.0
    n = na + nb
    tie_counts = np.array(list(Counter(np.concatenate([a, b]).tolist()).values()), dtype=np.float64)
    tie_term = ((tie_counts ** 3 - tie_counts).sum() / (n * (n - 1))) if n > 1 else 0.0
    var = na * nb / 12.0 * ((n + 1) - tie_term)
    if var <= 0:
        raise DegenerateSampleError("all observations are identical; the test is undefined")
    z = (u_a + 0.5 - na * nb / 2.0) / math.sqrt(var)
    p = 0.5 * math.erfc(-z / math.sqrt(2.0))
    return float(u_a), float(min(1.0, p))


def spearman(x, y) -> float:
    """Rank correlation; 0.0 if either input is constant."""
    rx, ry = midranks(x), midranks(y)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float((rx * rx).sum() * (ry * ry).sum()))
    return float((rx * ry).sum() / denom) if denom > 0 else 0.0


@dataclass
class EvalReport:
    """Aggregate metrics over a set of frames."""

    frame_recall: float
    mean_doa_error: float  # radians
    num_frames: int
    frame_errors: list[tuple[int, float]]  # (frame id, error) for every matched pair
    count_pairs: dict[tuple[int, int], int] = field(default_factory=dict)  # (predicted, true) -> frames
    uncertainty_spearman: float = float("nan")
    error_top_decile: float = float("nan")  # mean error where predicted spread is largest
    error_bottom_decile: float = float("nan")

    @property
    def mean_doa_error_deg(self) -> float:
        return math.degrees(self.mean_doa_error)

    @property
    def errors(self) -> np.ndarray:
        return np.array([e for _, e in self.frame_errors])

    def summary(self) -> str:
        lines = [
            f"frames: {self.num_frames}",
            f"frame recall: {self.frame_recall:.4f}",
            f"mean DoA error: {self.mean_doa_error:.4f} rad ({self.mean_doa_error_deg:.2f} deg)",
            f"matched pairs: {len(self.frame_errors)}",
            f"uncertainty rank correlation (sqrt tr cov vs error): {self.uncertainty_spearman:.4f}",
            f"mean error, top / bottom spread decile: {self.error_top_decile:.4f} / {self.error_bottom_decile:.4f} rad",
            "source counts (predicted, true): frames",
        ]
        lines += [f"  {k}: {v}" for k, v in sorted(self.count_pairs.items())]
        return "\n".join(lines)


def evaluate(pred_gamma, pred_doa, true_active, true_doa, pred_cov=None, threshold: float = ACTIVITY_THRESHOLD,
             conventional: bool = False) -> EvalReport:
    """Metrics over F frames: arrays shaped (F, N), (F, N, 2), (F, N), (F, N, 2), optional (F, N, 2, 2)."""
    pred_gamma = np.asarray(pred_gamma)
    num_frames = len(pred_gamma)
    hits = 0
    counts: Counter = Counter()
    frame_errors: list[tuple[int, float]] = []
    spreads: list[float] = []
    for f in range(num_frames):
        res = frame_metrics(pred_gamma[f], pred_doa[f], true_active[f], true_doa[f], threshold, conventional)
        hits += res.recall_hit
        counts[(res.predicted_count, res.true_count)] += 1
        frame_errors += [(f, e) for e in res.errors]
        if pred_cov is not None:
            spreads += [math.sqrt(max(float(np.trace(pred_cov[f][s])), 0.0)) for s in res.pred_slots]
    errors = np.array([e for _, e in frame_errors])
    report = EvalReport(
        frame_recall=hits / num_frames if num_frames else float("nan"),
        mean_doa_error=float(errors.mean()) if len(errors) else float("nan"),
        num_frames=num_frames,
        frame_errors=frame_errors,
        count_pairs=dict(counts),
    )
    if pred_cov is not None and len(errors) >= 10:
        spreads_arr = np.array(spreads)
        report.uncertainty_spearman = spearman(spreads_arr, errors)
        order = np.argsort(spreads_arr, kind="mergesort")
        decile = max(1, len(order) // 10)
        report.error_bottom_decile = float(errors[order[:decile]].mean())
        report.error_top_decile = float(errors[order[-decile:]].mean())
    return report
