"""Evaluation metrics: confusion matrices, per-video accuracy summaries,
transition lag, oscillation counting, and the Wilcoxon rank-sum test."""

import math
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import CLASS_NAMES, NUM_CLASSES

# a predicted transition farther than this from every ground-truth transition
# of the same direction counts as unmatched
LAG_MATCH_HORIZON = 45


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # 3x3 ints, rows = ground truth, columns = prediction

    @property
    def total(self):
        return int(self.counts.sum())

    def normalized(self):
        """Row-normalized view; all-zero rows stay zero."""
        sums = self.counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = np.where(sums > 0, self.counts / sums, 0.0)
        return out

    def accuracy(self):
        return float(np.trace(self.counts)) / self.total

    def to_text(self, decimals=2):
        """Plain-text grid of the row-normalized matrix (2-decimal cells)."""
        norm = self.normalized()
        width = max(len(n) for n in CLASS_NAMES) + 2
        lines = ["".rjust(width) + "".join(n.rjust(width) for n in CLASS_NAMES)]
        for r, name in enumerate(CLASS_NAMES):
            cells = "".join(f"{norm[r, c]:.{decimals}f}".rjust(width) for c in range(NUM_CLASSES))
            lines.append(name.rjust(width) + cells)
        return "\n".join(lines)


def confusion(predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    counts = np.zeros((NUM_CLASSES, NUM_CLASSES), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return ConfusionMatrix(counts)


def per_video_accuracy(predictions, labels):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(predictions) == 0:
        raise ValueError("empty clip")
    if predictions.shape != labels.shape:
        raise ValueError("length mismatch")
    return float(np.mean(predictions == labels))


@dataclass(frozen=True)
class AccuracySummary:
    acc_max: float
    acc_min: float
    acc_avg: float


def group_summary(accuracies):
    accuracies = [float(a) for a in accuracies]
    if not accuracies:
        raise ValueError("empty group")
    return AccuracySummary(max(accuracies), min(accuracies), sum(accuracies) / len(accuracies))


def transitions(seq):
    """List of (index, from_state, to_state) label changes; index is the first changed frame."""
    seq = np.asarray(seq)
    idx = np.flatnonzero(seq[1:] != seq[:-1]) + 1
    return [(int(i), int(seq[i - 1]), int(seq[i])) for i in idx]


@dataclass
class TransitionLagResult:
    lags: list  # matched ground-truth transitions, in frames
    unmatched: int  # ground-truth transitions with no same-direction prediction in range

    @property
    def max_lag(self):
        return max(self.lags) if self.lags else 0

    @property
    def mean_lag(self):
        return sum(self.lags) / len(self.lags) if self.lags else 0.0


def transition_lag(predictions, labels):
    """Lag of every ground-truth state change vs the nearest same-direction predicted change."""
    pred_t = transitions(predictions)
    lags = []
    unmatched = 0
    for gi, a, b in transitions(labels):
        candidates = [abs(pi - gi) for pi, pa, pb in pred_t if (pa, pb) == (a, b)]
        best = min(candidates) if candidates else None
        if best is None or best > LAG_MATCH_HORIZON:
            unmatched += 1
        else:
            lags.append(best)
    return TransitionLagResult(lags, unmatched)


def oscillation_count(seq):
    """Number of indices where the label differs from its predecessor."""
    seq = np.asarray(seq)
    if len(seq) < 2:
        return 0
    return int(np.sum(seq[1:] != seq[:-1]))


def oscillation_excess(predictions, labels):
    """Label changes in the prediction beyond those in the ground truth."""
    return oscillation_count(predictions) - oscillation_count(labels)


def _midranks(values):
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_v = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def ranksum_test(group_a, group_b):
    """Wilcoxon rank-sum (Mann-Whitney) test with midrank tie handling.

    Returns (U statistic for group_a, two-sided p). Exact p by enumeration of
    all rank assignments when the combined size is <= 12, normal approximation
    with tie correction otherwise.
    """
    a = np.asarray(group_a, dtype=np.float64)
    b = np.asarray(group_b, dtype=np.float64)
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise ValueError("both groups must be non-empty")
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    u_obs = float(ranks[:n1].sum()) - n1 * (n1 + 1) / 2.0
    mu = n1 * n2 / 2.0
    n = n1 + n2
    if n <= 12:
        dev = abs(u_obs - mu)
        hits = 0
        total = 0
        const = n1 * (n1 + 1) / 2.0
        for combo in combinations(range(n), n1):
            u = ranks[list(combo)].sum() - const
            total += 1
            if abs(u - mu) >= dev - 1e-12:
                hits += 1
        p = hits / total
    else:
        # tie-corrected variance of U under the null
        _, tie_counts = np.unique(pooled, return_counts=True)
        tie_term = float(np.sum(tie_counts**3 - tie_counts))
        var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
        if var == 0:
            return u_obs, 1.0
        z = (u_obs - mu) / math.sqrt(var)
        p = math.erfc(abs(z) / math.sqrt(2.0))
    return u_obs, min(p, 1.0)
