"""ROC-AUC and bootstrap confidence bands."""

from __future__ import annotations

import numpy as np

from .errors import InvalidInputError, UndefinedAUCError


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing their mean rank."""
    x = np.asarray(x)
    order = np.argsort(x, kind="mergesort")
    _, inverse, counts = np.unique(x[order], return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    mid = ends - (counts - 1) / 2.0
    ranks = np.empty(len(x), dtype=np.float64)
    ranks[order] = mid[inverse]
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(score_pos > score_neg) with ties counted as one half.

    Computed from the rank sum of the positives in O(n log n).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise InvalidInputError(f"{scores.size} scores but {labels.size} labels")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise InvalidInputError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedAUCError("AUC is undefined when only one class is present")
    u = average_ranks(scores)[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def bootstrap_mean_ci(curves, iters: int = 1000, level: float = 0.95,
                      seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pointwise mean of ``curves`` (runs x epochs) with a percentile bootstrap band.

    Whole runs are resampled with replacement, which keeps each run's
    epoch-to-epoch correlation intact. The band is widened where needed so
    that it always contains the sample mean.
    """
    curves = np.atleast_2d(np.asarray(curves, dtype=np.float64))
    if curves.shape[0] < 2:
        raise InvalidInputError("bootstrap needs at least two curves")
    if not 0 < level < 1:
        raise InvalidInputError(f"level must lie in (0, 1), got {level}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB007]))
    idx = rng.integers(0, curves.shape[0], size=(iters, curves.shape[0]))
    means = curves[idx].mean(axis=1)
    mean = curves.mean(axis=0)
    alpha = (1 - level) / 2
    lo, hi = np.quantile(means, [alpha, 1 - alpha], axis=0)
    # epochs where every run agrees get that value back exactly, not a rounded mean
    flat = (curves == curves[0]).all(axis=0)
    mean[flat] = lo[flat] = hi[flat] = curves[0, flat]
    return mean, np.minimum(lo, mean), np.maximum(hi, mean)
