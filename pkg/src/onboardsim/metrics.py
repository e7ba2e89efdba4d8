"""Evaluation statistics: CDF comparisons, interest precision/recall,
bootstrap confidence intervals, and policy-ordering reports."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import rng_for


class MetricError(ValueError):
    pass


@dataclass
class Cdf:
    """Empirical CDF over a sample."""

    sorted_values: np.ndarray

    @classmethod
    def from_samples(cls, samples) -> "Cdf":
        arr = np.sort(np.asarray(samples, dtype=np.float64))
        if arr.size == 0:
            raise MetricError("empty sample")
        return cls(arr)

    def __call__(self, x) -> np.ndarray:
        return np.searchsorted(self.sorted_values, x, side="right") / self.sorted_values.size

    def dump(self) -> list[tuple[int, float]]:
        """(rank, value) rows for external plotting."""
        return [(i + 1, float(v)) for i, v in enumerate(self.sorted_values)]


def ks_gap(a, b) -> float:
    """Maximum vertical distance between the two empirical CDFs."""
    fa, fb = Cdf.from_samples(a), Cdf.from_samples(b)
    grid = np.concatenate([fa.sorted_values, fb.sorted_values])
    return float(np.abs(fa(grid) - fb(grid)).max())


def wasserstein_1d(a, b, seed: int = 0) -> float:
    """Mean absolute difference of sorted samples (1-d optimal transport).

    Unequal sizes are handled by resampling the larger set down to the
    smaller, deterministically under `seed`.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise MetricError("empty sample")
    if a.size != b.size:
        n = min(a.size, b.size)
        rng = rng_for(seed, "wasserstein-resample")
        if a.size > n:
            a = a[rng.choice(a.size, size=n, replace=False)]
        if b.size > n:
            b = b[rng.choice(b.size, size=n, replace=False)]
    return float(np.abs(np.sort(a) - np.sort(b)).mean())


def interest_pr(generated_states, truth_states, n: int, truth_support: int | None = None):
    """Set overlap of the most frequent artists in two state batches.

    Precision compares the top-n artists of each side; recall asks how
    much of the truth's top-`truth_support` list the generated top-n
    recovers (defaults to the same n).
    """
    if not generated_states or not truth_states:
        raise MetricError("empty state batch")
    truth_support = truth_support or n

    def top(states, k):
        counts: dict[int, int] = {}
        for st in states:
            for artist in st.interests:
                counts[artist] = counts.get(artist, 0) + 1
        if k > max(len(counts), 1):
            raise MetricError(f"support has only {len(counts)} artists, need {k}")
        ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return {artist for artist, _ in ordered[:k]}

    gen_top = top(generated_states, n)
    truth_top = top(truth_states, n)
    truth_sup = top(truth_states, truth_support)
    precision = len(gen_top & truth_top) / n
    recall = len(gen_top & truth_sup) / truth_support
    return precision, recall


@dataclass
class CiEstimate:
    """Percent-change point estimate with a percentile-bootstrap interval."""

    point: float
    lower: float
    upper: float
    n_treatment: int
    n_control: int

    def overlaps(self, other: "CiEstimate") -> bool:
        return self.lower <= other.upper and other.lower <= self.upper

    def __post_init__(self):
        if not (self.lower <= self.point <= self.upper):
            raise MetricError("CI bounds do not bracket the point estimate")


def percent_change_ci(treatment, control, n_boot: int = 2000, seed: int = 0) -> CiEstimate:
    """Percent change of the treatment mean over the control mean,
    with a user-level percentile bootstrap (95%)."""
    t = np.asarray(treatment, dtype=np.float64)
    c = np.asarray(control, dtype=np.float64)
    if t.size < 2 or c.size < 2:
        raise MetricError("need at least 2 users per group")
    if c.mean() == 0:
        raise MetricError("control mean is zero; percent change undefined")
    point = (t.mean() - c.mean()) / c.mean() * 100.0
    rng = rng_for(seed, "bootstrap")
    idx_t = rng.integers(0, t.size, size=(n_boot, t.size))
    idx_c = rng.integers(0, c.size, size=(n_boot, c.size))
    means_t = t[idx_t].mean(axis=1)
    means_c = c[idx_c].mean(axis=1)
    ok = means_c != 0
    reps = (means_t[ok] - means_c[ok]) / means_c[ok] * 100.0
    lo, hi = np.percentile(reps, [2.5, 97.5])
    lo, hi = min(lo, point), max(hi, point)
    return CiEstimate(float(point), float(lo), float(hi), t.size, c.size)


@dataclass
class PolicyResult:
    """Per-policy arm summary fed into ordering reports."""

    policy_id: str
    selections: CiEstimate
    impressions: CiEstimate


def policy_ordering(results: list[PolicyResult]) -> dict:
    """Order policies by point estimate of selection change (then impression
    change), emitting the "A > B > C" strings; ties break by policy id."""

    def order(key):
        ranked = sorted(results, key=lambda r: (-key(r).point, r.policy_id))
        tie = any(
            key(a).point == key(b).point
            for a, b in zip(ranked, ranked[1:])
        )
        return " > ".join(r.policy_id for r in ranked), tie

    sel_str, sel_tie = order(lambda r: r.selections)
    imp_str, imp_tie = order(lambda r: r.impressions)
    return {
        "selection_ordering": sel_str,
        "selection_tie": sel_tie,
        "impression_ordering": imp_str,
        "impression_tie": imp_tie,
    }
