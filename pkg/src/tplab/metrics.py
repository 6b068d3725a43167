"""Comparison metrics: label efficiency, batch diversity, curves over seeds."""

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist, squareform


@dataclass
class Curve:
    fractions: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray

    def __post_init__(self):
        self.fractions = np.asarray(self.fractions, dtype=np.float64)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.stderr = np.asarray(self.stderr, dtype=np.float64)
        if len(self.fractions) > 1 and np.any(np.diff(self.fractions) <= 0):
            raise ValueError("curve fractions must be strictly increasing")


def intersection_fraction(curve, reference):
    """Smallest labeled fraction where the interpolated curve reaches ``reference``.

    Returns None if the curve never gets there.
    """
    f, a = curve.fractions, curve.mean
    if len(f) == 0:
        raise ValueError("curve is empty")
    if a[0] >= reference:
        return float(f[0])
    for i in range(len(f) - 1):
        if a[i] < reference <= a[i + 1]:
            w = (reference - a[i]) / (a[i + 1] - a[i])
            return float(f[i] + w * (f[i + 1] - f[i]))
    return None


def batch_diversity(latents):
    """Mean pairwise distance and covering radius (max nearest-other distance)."""
    Z = np.asarray(latents, dtype=np.float64)
    if len(Z) < 2:
        raise ValueError(f"batch diversity needs at least 2 points, got {len(Z)}")
    d = pdist(Z)
    D = squareform(d)
    np.fill_diagonal(D, np.inf)
    return {"mean_pairwise_dist": float(d.mean()), "covering_radius": float(D.min(axis=1).max())}


def auc(fractions, values):
    """Trapezoid area under ``values`` over ``fractions``."""
    f = np.asarray(fractions, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    return float(np.sum((f[1:] - f[:-1]) * (v[1:] + v[:-1]) / 2))


def mean_stderr(values):
    """Mean and standard error (sample std / sqrt(n)); stderr 0 for one value."""
    v = np.asarray(values, dtype=np.float64)
    if len(v) < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(len(v)))


def summarize(runs):
    """Aggregate runs of one strategy.

    ``runs`` maps a run name (e.g. the seed) to its list of CycleRecords.
    Returns ``{"curve", "auc", "mean_selection_seconds"}``.
    """
    if not runs:
        raise ValueError("no runs to summarize")
    names = sorted(runs, key=str)
    grids = {n: [r.labeled_fraction for r in runs[n]] for n in names}
    ref = grids[names[0]]
    for n in names[1:]:
        if grids[n] != ref:
            raise ValueError(f"run {n!r} has a different labeled-fraction grid than {names[0]!r}")
    acc = np.array([[r.test_accuracy for r in runs[n]] for n in names])
    stats = [mean_stderr(acc[:, j]) for j in range(acc.shape[1])]
    curve = Curve(ref, [s[0] for s in stats], [s[1] for s in stats])
    sel = [r.selection_seconds for n in names for r in runs[n] if r.n_selected > 0]
    return {
        "curve": curve,
        "auc": auc(curve.fractions, curve.mean),
        "mean_selection_seconds": float(np.mean(sel)) if sel else 0.0,
    }
