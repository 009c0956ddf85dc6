"""Two-sample SPM t-test on 1-D trajectories with a permutation threshold.

The critical threshold is the ``1 - alpha`` quantile of the permutation
distribution of ``max_q |t(q)|``, which controls the family-wise error over
the whole trajectory. Supra-threshold clusters get p-values from the
permutation distribution of the largest cluster integral.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

MAX_EXACT_PERMUTATIONS = 10_000


@dataclass(frozen=True)
class SpmCluster:
    start: int
    end: int  # inclusive
    integral: float
    p: float


@dataclass(frozen=True)
class SpmResult:
    t: np.ndarray
    critical_t: float
    clusters: list = field(default_factory=list)
    alpha: float = 0.05
    n_permutations: int = 0

    @property
    def h0_rejected(self) -> bool:
        return bool(self.clusters)

    def to_dict(self) -> dict:
        return {
            "t": self.t.tolist(),
            "critical_t": self.critical_t,
            "alpha": self.alpha,
            "n_permutations": self.n_permutations,
            "clusters": [
                {"start": c.start, "end": c.end, "integral": c.integral, "p": c.p} for c in self.clusters
            ],
        }


def ttest2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pointwise pooled-variance two-sample t statistic (a minus b)."""
    na, nb = len(a), len(b)
    diff = a.mean(axis=0) - b.mean(axis=0)
    ss = ((a - a.mean(axis=0)) ** 2).sum(axis=0) + ((b - b.mean(axis=0)) ** 2).sum(axis=0)
    se = np.sqrt(ss / (na + nb - 2) * (1.0 / na + 1.0 / nb))
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(se > 0, diff / se, np.where(diff == 0, 0.0, np.sign(diff) * np.inf))
    return t


def _batched_t(data: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """t statistics for many group assignments; ``labels`` (P, n) is True for group a."""
    la = labels.astype(float)
    lb = 1.0 - la
    na = la.sum(1, keepdims=True)
    nb = lb.sum(1, keepdims=True)
    s1a, s1b = la @ data, lb @ data
    s2a, s2b = la @ data ** 2, lb @ data ** 2
    ma, mb = s1a / na, s1b / nb
    ss = (s2a - na * ma ** 2) + (s2b - nb * mb ** 2)
    se = np.sqrt(np.maximum(ss, 0.0) / (na + nb - 2) * (1.0 / na + 1.0 / nb))
    diff = ma - mb
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(se > 0, diff / se, 0.0)


def _clusters(t: np.ndarray, threshold: float):
    """Runs of same-sign supra-threshold |t|, as (start, end, integral)."""
    out = []
    above = np.abs(t) > threshold
    q = 0
    n = len(t)
    while q < n:
        if not above[q]:
            q += 1
            continue
        sign = np.sign(t[q])
        start = q
        while q + 1 < n and above[q + 1] and np.sign(t[q + 1]) == sign:
            q += 1
        out.append((start, q, float(np.sum(np.abs(t[start:q + 1]) - threshold))))
        q += 1
    return out


def permutation_labels(na: int, nb: int, permutations: int | None = None, seed: int = 0) -> np.ndarray:
    """Group-a indicator rows; the observed labelling is always row 0.

    All ``C(na + nb, na)`` assignments are enumerated when that count is at
    most ``permutations`` (default ``MAX_EXACT_PERMUTATIONS``); otherwise a
    seeded random subset is drawn.
    """
    n = na + nb
    limit = MAX_EXACT_PERMUTATIONS if permutations is None else int(permutations)
    total = math.comb(n, na)
    if total <= limit:
        rows = np.zeros((total, n), dtype=bool)
        for i, idx in enumerate(itertools.combinations(range(n), na)):
            rows[i, list(idx)] = True
        return rows
    rng = np.random.default_rng(seed)
    rows = np.zeros((limit, n), dtype=bool)
    rows[0, :na] = True
    for i in range(1, limit):
        rows[i, rng.permutation(n)[:na]] = True
    return rows


def spm_ttest(group_a, group_b, alpha: float = 0.05, permutations: int | None = None, seed: int = 0) -> SpmResult:
    """Two-tailed two-sample SPM t-test.

    Parameters
    ----------
    group_a, group_b : array of shape (n_subjects, n_samples)
    alpha : float
        Family-wise error rate.
    permutations : int, optional
        Upper bound on the number of relabellings; exhaustive below it.
    seed : int
        Seed for random relabellings.
    """
    a = np.asarray(group_a, dtype=float)
    b = np.asarray(group_b, dtype=float)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("groups must be 2-D arrays (subjects x samples)")
    if a.shape[1] != b.shape[1]:
        raise ValueError("trajectories must share the sample count")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("each group needs at least 2 trajectories")
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    t = ttest2(a, b)
    data = np.vstack([a, b])
    labels = permutation_labels(len(a), len(b), permutations, seed)
    tperm = _batched_t(data, labels)
    tperm[0] = np.where(np.isfinite(t), t, 0.0)
    maxima = np.sort(np.abs(tperm).max(axis=1))
    k = int(math.ceil((1.0 - alpha) * len(maxima))) - 1
    critical = float(maxima[min(max(k, 0), len(maxima) - 1)])

    observed = _clusters(t, critical)
    clusters = []
    if observed:
        null = np.array([max((c[2] for c in _clusters(row, critical)), default=0.0) for row in tperm])
        for start, end, integral in observed:
            p = float(np.mean(null >= integral - 1e-12 * max(1.0, integral))) if np.isfinite(integral) else 1.0 / len(null)
            clusters.append(SpmCluster(start, end, integral, min(1.0, p)))
    return SpmResult(t=t, critical_t=critical, clusters=clusters, alpha=alpha, n_permutations=len(labels))
