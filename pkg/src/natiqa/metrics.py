"""Correlation metrics, attention alignment, classical reference baselines,
and the per-baseline evaluation report."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from . import maps


class UndefinedCorrelationError(ValueError):
    """Raised when a correlation is requested for degenerate (constant) input."""


class UndefinedSimilarityError(ValueError):
    """Raised when cosine similarity is requested for two all-zero maps."""


def _as_vector(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64).ravel()
    if v.size < 2:
        raise ValueError(f"{name} needs at least 2 values, got {v.size}")
    return v


def average_ranks(x) -> np.ndarray:
    """Ranks 1..N with ties receiving the mean of the ranks they span."""
    x = np.asarray(x, dtype=np.float64).ravel()
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    sx = x[order]
    while i < len(x):
        j = i
        while j < len(x) and sx[j] == sx[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0
        i = j
    return ranks


def plcc(a, b) -> float:
    """Pearson linear correlation. No nonlinear pre-fitting is applied."""
    a = _as_vector(a, "a")
    b = _as_vector(b, "b")
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    da = a - a.mean()
    db = b - b.mean()
    na = np.sqrt(np.sum(da * da))
    nb = np.sqrt(np.sum(db * db))
    if na == 0 or nb == 0:
        raise UndefinedCorrelationError("correlation undefined for a constant vector")
    return float(np.sum(da * db) / (na * nb))


def srocc(a, b) -> float:
    """Spearman rank-order correlation (Pearson on average ranks)."""
    a = _as_vector(a, "a")
    b = _as_vector(b, "b")
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    return plcc(average_ranks(a), average_ranks(b))


def _map_values(m) -> np.ndarray:
    # SaliencyMap/AttentionMap carry their grid in .values; other inputs are
    # used directly (torch tensors expose a .values *method*, never unwrap it).
    values = getattr(m, "values", None)
    if isinstance(values, np.ndarray):
        return values.astype(np.float64)
    return np.asarray(m, dtype=np.float64)


def attention_similarity(a, s) -> float:
    """Cosine similarity between two flattened maps; in [0, 1] for non-negative maps."""
    av = _map_values(a).ravel()
    sv = _map_values(s).ravel()
    if av.shape != sv.shape:
        raise ValueError(f"shape mismatch: {_map_values(a).shape} vs {_map_values(s).shape}")
    na = np.sqrt(np.sum(av * av))
    ns = np.sqrt(np.sum(sv * sv))
    if na == 0 and ns == 0:
        raise UndefinedSimilarityError("similarity undefined for two all-zero maps")
    if na == 0 or ns == 0:
        return 0.0
    return float(np.dot(av, sv) / (na * ns))


def psnr(x, ref) -> float:
    """Peak signal-to-noise ratio in dB over the unit dynamic range.

    Identical images return math.inf.
    """
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    for name, img in (("x", x), ("ref", ref)):
        if img.min() < -1e-6 or img.max() > 1 + 1e-6:
            raise ValueError(f"{name} values must lie in [0, 1]")
    mse = float(np.mean((x - ref) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
_SSIM_WINDOW = 11
_SSIM_SIGMA = 1.5
_SSIM_C1 = 0.01 ** 2
_SSIM_C2 = 0.03 ** 2


def _to_gray(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img
    if img.ndim == 3 and img.shape[2] == 3:
        return img @ _LUMA_WEIGHTS
    if img.ndim == 3 and img.shape[2] == 1:
        return img[:, :, 0]
    raise ValueError(f"expected grayscale or RGB image, got shape {img.shape}")


def _ssim_kernel() -> np.ndarray:
    half = _SSIM_WINDOW // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(ax ** 2) / (2.0 * _SSIM_SIGMA ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(x, ref) -> float:
    """Mean local SSIM with an 11x11 Gaussian window (sigma 1.5), unit dynamic range."""
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {ref.shape}")
    gx = _to_gray(x)
    gref = _to_gray(ref)
    if min(gx.shape) < _SSIM_WINDOW:
        raise ValueError(f"image {gx.shape} smaller than the {_SSIM_WINDOW}x{_SSIM_WINDOW} window")
    kernel = _ssim_kernel()

    def smooth(img):
        return fftconvolve(img, kernel, mode="valid")

    mu_x = smooth(gx)
    mu_r = smooth(gref)
    var_x = smooth(gx * gx) - mu_x ** 2
    var_r = smooth(gref * gref) - mu_r ** 2
    cov = smooth(gx * gref) - mu_x * mu_r
    num = (2 * mu_x * mu_r + _SSIM_C1) * (2 * cov + _SSIM_C2)
    den = (mu_x ** 2 + mu_r ** 2 + _SSIM_C1) * (var_x + var_r + _SSIM_C2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# dataset-level evaluation


@dataclass(frozen=True)
class MetricsReport:
    """Per-baseline SROCC/PLCC/S_C, their unweighted mean, and the pooled values."""

    per_baseline: dict
    mean: dict
    pooled: dict
    skipped: list = field(default_factory=list)

    def to_json(self) -> str:
        doc = {
            "per_baseline": self.per_baseline,
            "mean": self.mean,
            "pooled": self.pooled,
            "skipped": self.skipped,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        rows = [("baseline", "srocc", "plcc", "sc")]

        def fmt(v):
            return "-" if v is None else f"{v:.4f}"

        for name in sorted(self.per_baseline):
            m = self.per_baseline[name]
            rows.append((name, fmt(m["srocc"]), fmt(m["plcc"]), fmt(m["sc"])))
        rows.append(("mean", fmt(self.mean["srocc"]), fmt(self.mean["plcc"]), fmt(self.mean["sc"])))
        rows.append(("pooled", fmt(self.pooled["srocc"]), fmt(self.pooled["plcc"]), fmt(self.pooled["sc"])))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(col.ljust(w) for col, w in zip(row, widths)).rstrip() for row in rows]
        if self.skipped:
            lines.append("skipped: " + ", ".join(self.skipped))
        return "\n".join(lines) + "\n"


def _block_metrics(mos, preds, sims):
    try:
        s = srocc(preds, mos)
        p = plcc(preds, mos)
    except UndefinedCorrelationError:
        return None
    sc = float(np.mean(sims)) if sims is not None and len(sims) else None
    return {"srocc": s, "plcc": p, "sc": sc}


def summarize(samples, predictions, attentions=None) -> MetricsReport:
    """Build the evaluation report from per-sample predictions and attention maps.

    `attentions` are feature-resolution maps; each sample's gaze saliency is
    average-pooled down to the attention resolution before the cosine, so the
    comparison space matches the attention-alignment loss.
    """
    samples = list(samples)
    predictions = np.asarray(predictions, dtype=np.float64)
    if len(samples) != predictions.size:
        raise ValueError(f"{len(samples)} samples but {predictions.size} predictions")
    if attentions is not None and len(attentions) != len(samples):
        raise ValueError(f"{len(samples)} samples but {len(attentions)} attention maps")

    sims = None
    if attentions is not None:
        sims = np.empty(len(samples))
        for i, (sample, attn) in enumerate(zip(samples, attentions)):
            av = _map_values(attn)
            pooled = maps.pool_to(sample.saliency.as_max_one().values, av.shape)
            pooled = maps.normalize_max_one(pooled)
            try:
                sims[i] = attention_similarity(av, pooled)
            except UndefinedSimilarityError:
                sims[i] = 0.0

    groups: dict[str, list[int]] = {}
    for i, sample in enumerate(samples):
        groups.setdefault(sample.factors.get("baseline", ""), []).append(i)

    per_baseline = {}
    skipped = []
    for name in sorted(groups):
        idx = groups[name]
        if len(idx) < 2:
            skipped.append(f"{name}: only {len(idx)} sample(s)")
            continue
        mos = np.array([samples[i].mos for i in idx])
        block = _block_metrics(mos, predictions[idx], sims[idx] if sims is not None else None)
        if block is None:
            skipped.append(f"{name}: degenerate (constant) scores")
            continue
        per_baseline[name] = block

    def _mean_over(key):
        vals = [m[key] for m in per_baseline.values() if m[key] is not None]
        return float(np.mean(vals)) if vals else None

    mean = {k: _mean_over(k) for k in ("srocc", "plcc", "sc")}
    all_mos = np.array([s.mos for s in samples])
    pooled = _block_metrics(all_mos, predictions, sims)
    if pooled is None:
        pooled = {"srocc": None, "plcc": None, "sc": None}
    return MetricsReport(per_baseline=per_baseline, mean=mean, pooled=pooled, skipped=skipped)


def evaluate(scorer, samples) -> MetricsReport:
    """Run a scorer over the samples and summarize.

    `scorer` maps a sample list to (predictions, attentions-or-None); the DPA
    model provides one, and external baselines can plug their own in.
    """
    predictions, attentions = scorer(samples)
    return summarize(samples, predictions, attentions)
