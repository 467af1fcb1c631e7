"""The three training objectives and their weighted combination.

All losses accept torch tensors (returning tensors on the autograd graph) or
plain arrays/lists (returning floats). Batched inputs are averaged over the
leading batch axis so the single-sample definitions below are exactly what a
batch reports per sample:

    rating alignment    KL(p || r) = sum_l p_l log(p_l / r_l)
    attention alignment ||A - S||_F^2
    score regression    mean squared error against MOS
    total               ls + lambda * lr + gamma * la
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class LossWeights:
    """lambda (rating alignment) and gamma (attention alignment) weights."""

    lam: float = 8.0
    gamma: float = 3.0

    def __post_init__(self):
        for name, value in (("lambda", self.lam), ("gamma", self.gamma)):
            if not np.isfinite(value) or value < 0:
                raise ValueError(f"{name} must be finite and non-negative, got {value}")


def _unwrap(x):
    # SaliencyMap/AttentionMap carry their grid in .values; torch tensors also
    # expose a .values *method*, so only unwrap ndarray-valued attributes.
    values = getattr(x, "values", None)
    if isinstance(values, np.ndarray):
        return values
    return x


def _prepare(x):
    x = _unwrap(x)
    if isinstance(x, torch.Tensor):
        return x, True
    return torch.as_tensor(np.asarray(x, dtype=np.float64)), False


def _finish(value: torch.Tensor, was_tensor: bool):
    return value if was_tensor else float(value.item())


def smooth_distribution(r, eps: float = 1e-4):
    """Additive smoothing then renormalization, so empirical zeros keep KL finite."""
    t, was_tensor = _prepare(r)
    num_levels = t.shape[-1]
    smoothed = (t + eps) / (1.0 + num_levels * eps)
    return smoothed if was_tensor else smoothed.numpy()

def rpa_loss(p, r):
    """KL(p || r) with 0 log 0 = 0. `r` must already be smoothed (no zeros where p > 0)."""
    pt, p_tensor = _prepare(p)
    rt, r_tensor = _prepare(r)
    if pt.shape != rt.shape:
        raise ValueError(f"shape mismatch: {tuple(pt.shape)} vs {tuple(rt.shape)}")
    with torch.no_grad():
        if torch.any((rt <= 0) & (pt > 0)):
            raise ValueError(
                "divergence undefined: r has zero mass where p > 0 (smoothing disabled?)"
            )
    tiny = torch.finfo(pt.dtype).tiny
    terms = pt * (torch.log(pt.clamp_min(tiny)) - torch.log(rt.clamp_min(tiny)))
    kl = terms.sum(dim=-1)
    return _finish(kl.mean(), p_tensor or r_tensor)


def apa_loss(a, s):
    """Squared Frobenius norm of the difference between two equally-shaped maps."""
    at, a_tensor = _prepare(a)
    st, s_tensor = _prepare(s)
    if at.shape != st.shape:
        raise ValueError(f"shape mismatch: {tuple(at.shape)} vs {tuple(st.shape)}")
    diff = (at - st) ** 2
    frob = diff.sum(dim=(-2, -1))
    return _finish(frob.mean(), a_tensor or s_tensor)


def mse_loss(predictions, targets):
    """Mean squared error between predicted and ground-truth MOS."""
    pt, p_tensor = _prepare(predictions)
    tt, t_tensor = _prepare(targets)
    if pt.shape != tt.shape:
        raise ValueError(f"shape mismatch: {tuple(pt.shape)} vs {tuple(tt.shape)}")
    if pt.numel() == 0:
        raise ValueError("empty batch")
    return _finish(((pt - tt) ** 2).mean(), p_tensor or t_tensor)


def total_loss(ls, lr, la, weights: LossWeights):
    """ls + lambda * lr + gamma * la, rejecting non-finite components by name."""
    for name, value in (("ls", ls), ("lr", lr), ("la", la)):
        v = float(value.detach().item()) if isinstance(value, torch.Tensor) else float(value)
        if not np.isfinite(v):
            raise ValueError(f"non-finite loss component {name}: {v}")
    return ls + weights.lam * lr + weights.gamma * la
