"""Statistical tests for subjective-study analysis: one-way ANOVA, Tukey HSD,
Mann-Whitney U, Welch's t-test, and per-factor MOS summaries.

Test statistics are computed from first principles; p-values come from the
scipy.stats distribution functions (F, t, normal, studentized range).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb

import numpy as np
from scipy.stats import f as f_dist
from scipy.stats import norm as norm_dist
from scipy.stats import studentized_range
from scipy.stats import t as t_dist

from .metrics import average_ranks

SIGNIFICANCE = 0.05
HIGHLIGHT = 0.001


class DegenerateVarianceError(ValueError):
    """Raised when a test statistic is undefined because all variance vanished."""


def _check_groups(groups):
    groups = [np.asarray(g, dtype=np.float64).ravel() for g in groups]
    if len(groups) < 2:
        raise ValueError(f"need at least 2 groups, got {len(groups)}")
    if any(g.size == 0 for g in groups):
        raise ValueError("groups must be nonempty")
    n_total = sum(g.size for g in groups)
    if n_total <= len(groups):
        raise ValueError(f"total N ({n_total}) must exceed the number of groups ({len(groups)})")
    return groups


def _within_mean_square(groups):
    k = len(groups)
    n_total = sum(g.size for g in groups)
    ssw = sum(float(np.sum((g - g.mean()) ** 2)) for g in groups)
    if ssw == 0:
        raise DegenerateVarianceError("zero within-group variance in every group")
    return ssw / (n_total - k), n_total - k


def one_way_anova(groups):
    """F statistic and p-value of a one-way ANOVA across the given groups."""
    groups = _check_groups(groups)
    k = len(groups)
    grand = np.mean(np.concatenate(groups))
    ssb = sum(g.size * (g.mean() - grand) ** 2 for g in groups)
    msw, df_within = _within_mean_square(groups)
    f_stat = (ssb / (k - 1)) / msw
    p = float(f_dist.sf(f_stat, k - 1, df_within))
    return float(f_stat), p


@dataclass(frozen=True)
class TukeyResult:
    """Pairwise mean differences and studentized-range adjusted p-values."""

    diffs: dict    # (i, j) -> mean_i - mean_j, for all ordered pairs i != j
    pvalues: dict  # (i, j) -> adjusted p, symmetric

    def diff(self, i: int, j: int) -> float:
        return self.diffs[(i, j)]

    def pvalue(self, i: int, j: int) -> float:
        return self.pvalues[(i, j)]

    def pairs(self):
        return sorted(k for k in self.diffs if k[0] < k[1])


def tukey_hsd(groups) -> TukeyResult:
    """Tukey (Tukey-Kramer for unbalanced groups) honest-significant-difference test."""
    groups = _check_groups(groups)
    k = len(groups)
    msw, df_within = _within_mean_square(groups)
    means = [g.mean() for g in groups]
    sizes = [g.size for g in groups]
    diffs = {}
    pvalues = {}
    for i, j in combinations(range(k), 2):
        d = float(means[i] - means[j])
        se = np.sqrt(msw / 2.0 * (1.0 / sizes[i] + 1.0 / sizes[j]))
        q = abs(d) / se
        p = float(np.clip(studentized_range.sf(q, k, df_within), 0.0, 1.0))
        diffs[(i, j)] = d
        diffs[(j, i)] = -d
        pvalues[(i, j)] = p
        pvalues[(j, i)] = p
    return TukeyResult(diffs=diffs, pvalues=pvalues)


def _mann_whitney_exact_p(pooled_ranks, n_a, u_obs):
    """Two-sided p by enumerating every assignment of n_a pooled positions to a."""
    n = len(pooled_ranks)
    ranks = np.asarray(pooled_ranks, dtype=np.float64)
    offset = n_a * (n_a + 1) / 2.0
    nm = n_a * (n - n_a)
    u_hi = max(u_obs, nm - u_obs)
    hits = 0
    total = comb(n, n_a)
    for subset in combinations(range(n), n_a):
        u = ranks[list(subset)].sum() - offset
        if u >= u_hi - 1e-9:
            hits += 1
    return min(1.0, 2.0 * hits / total)


def mann_whitney_u(a, b):
    """Mann-Whitney U (from a's perspective) with a two-sided p-value.

    Exact enumeration over pooled assignments when min(n) <= 8, otherwise a
    tie-corrected normal approximation with continuity correction.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be nonempty")
    n, m = a.size, b.size
    pooled = np.concatenate([a, b])
    ranks = average_ranks(pooled)
    u = float(ranks[:n].sum() - n * (n + 1) / 2.0)

    if min(n, m) > 8:
        mu = n * m / 2.0
        _, counts = np.unique(pooled, return_counts=True)
        tie_term = np.sum(counts ** 3 - counts) / ((n + m) * (n + m - 1.0))
        sigma2 = n * m / 12.0 * ((n + m + 1.0) - tie_term)
        if sigma2 <= 0:
            # All values tied: U is exactly nm/2 with certainty.
            return u, 1.0
        u_hi = max(u, n * m - u)
        z = (u_hi - mu - 0.5) / np.sqrt(sigma2)
        p = min(1.0, 2.0 * float(norm_dist.sf(z)))
    else:
        p = _mann_whitney_exact_p(ranks, n, u)
    return u, p


def independent_t_test(a, b):
    """Two-sided Welch t-test."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise ValueError(f"both samples need >= 2 values, got {a.size} and {b.size}")
    va = a.var(ddof=1)
    vb = b.var(ddof=1)
    if va == 0 and vb == 0:
        raise DegenerateVarianceError("zero variance in both samples")
    sa = va / a.size
    sb = vb / b.size
    t_stat = (a.mean() - b.mean()) / np.sqrt(sa + sb)
    df = (sa + sb) ** 2 / (sa ** 2 / (a.size - 1) + sb ** 2 / (b.size - 1))
    p = float(2.0 * t_dist.sf(abs(t_stat), df))
    return float(t_stat), p


@dataclass(frozen=True)
class FactorReport:
    """Per-level MOS summary for one factor, with ANOVA and Tukey post-hoc."""

    factor: str
    levels: tuple                 # level labels, sorted
    summary: dict                 # level -> {"mean", "std", "count"}
    anova: tuple | None           # (F, p), None when only one level
    tukey: TukeyResult | None
    no_test: bool = False

    @property
    def best_level(self) -> str:
        return max(self.levels, key=lambda lv: self.summary[lv]["mean"])

    def significant(self, alpha: float = SIGNIFICANCE) -> bool:
        return self.anova is not None and self.anova[1] < alpha

    def to_dict(self) -> dict:
        doc = {
            "factor": self.factor,
            "levels": {
                lv: {k: float(v) for k, v in self.summary[lv].items()} for lv in self.levels
            },
            "best_level": self.best_level,
            "no_test": self.no_test,
        }
        if self.anova is not None:
            doc["anova"] = {"F": self.anova[0], "p": self.anova[1]}
        if self.tukey is not None:
            doc["tukey"] = [
                {
                    "level_a": self.levels[i],
                    "level_b": self.levels[j],
                    "diff": self.tukey.diff(i, j),
                    "p": self.tukey.pvalue(i, j),
                }
                for i, j in self.tukey.pairs()
            ]
        return doc

    def to_table(self) -> str:
        lines = [f"factor: {self.factor}"]
        for lv in self.levels:
            s = self.summary[lv]
            lines.append(f"  {lv:<12} mean={s['mean']:.4f}  std={s['std']:.4f}  n={int(s['count'])}")
        if self.no_test or self.anova is None:
            lines.append("  (single level; no test)")
        else:
            f_stat, p = self.anova
            mark = " ***" if p < HIGHLIGHT else (" *" if p < SIGNIFICANCE else "")
            lines.append(f"  ANOVA: F={f_stat:.4f}, p={p:.6g}{mark}")
            for i, j in self.tukey.pairs():
                p_ij = self.tukey.pvalue(i, j)
                mark = " ***" if p_ij < HIGHLIGHT else (" *" if p_ij < SIGNIFICANCE else "")
                lines.append(
                    f"  {self.levels[i]} vs {self.levels[j]}: "
                    f"diff={self.tukey.diff(i, j):+.4f}, p={p_ij:.6g}{mark}"
                )
        return "\n".join(lines) + "\n"


def factor_report(samples, factor: str) -> FactorReport:
    """Summarize MOS per level of a factor and test for level effects."""
    samples = list(samples)
    if not samples:
        raise ValueError("no samples given")
    missing = [s.sample_id for s in samples if factor not in s.factors]
    if missing:
        available = sorted({name for s in samples for name in s.factors})
        raise ValueError(
            f"factor {factor!r} missing on {len(missing)} sample(s); available factors: {available}"
        )
    by_level: dict[str, list[float]] = {}
    for s in samples:
        by_level.setdefault(s.factors[factor], []).append(s.mos)
    levels = tuple(sorted(by_level))
    summary = {}
    for lv in levels:
        values = np.asarray(by_level[lv])
        summary[lv] = {
            "mean": float(values.mean()),
            "std": float(values.std(ddof=1)) if values.size > 1 else 0.0,
            "count": int(values.size),
        }
    if len(levels) < 2:
        return FactorReport(factor, levels, summary, anova=None, tukey=None, no_test=True)
    groups = [by_level[lv] for lv in levels]
    try:
        anova = one_way_anova(groups)
        tukey = tukey_hsd(groups)
    except DegenerateVarianceError:
        if np.var([s.mos for s in samples]) > 0:
            raise
        # Every MOS identical: no effect by construction.
        anova = (0.0, 1.0)
        tukey = None
    return FactorReport(factor, levels, summary, anova=anova, tukey=tukey, no_test=False)
