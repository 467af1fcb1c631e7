"""Attention/gaze overlay export for the explain command."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from . import maps

# Black -> red -> yellow -> white ramp, interpolated linearly.
_RAMP = np.array(
    [
        [0.00, 0.00, 0.00],
        [0.55, 0.05, 0.05],
        [0.90, 0.35, 0.05],
        [1.00, 0.80, 0.10],
        [1.00, 1.00, 1.00],
    ]
)


def colorize(values01: np.ndarray) -> np.ndarray:
    """Map [0, 1] values to RGB heat colors."""
    v = np.clip(np.asarray(values01, dtype=np.float64), 0.0, 1.0)
    pos = v * (len(_RAMP) - 1)
    low = np.floor(pos).astype(int)
    high = np.minimum(low + 1, len(_RAMP) - 1)
    frac = (pos - low)[..., None]
    return _RAMP[low] * (1 - frac) + _RAMP[high] * frac


def overlay(image: np.ndarray, heat01: np.ndarray, alpha: float = 0.55) -> np.ndarray:
    """Blend a heat map over an RGB image; both already at the same resolution."""
    return np.clip((1 - alpha) * image + alpha * colorize(heat01), 0.0, 1.0)


def _to_png(array01: np.ndarray, path: Path) -> None:
    Image.fromarray((np.clip(array01, 0, 1) * 255.0).round().astype(np.uint8)).save(path)


def export_explanation(sample, attention_values: np.ndarray, out_dir) -> dict:
    """Write the side-by-side overlay panel and the raw attention map.

    Panel: original image | attention overlay (bilinearly upsampled) | gaze overlay.
    The raw feature-resolution attention goes to <id>_attention.npy.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    image = np.asarray(sample.image, dtype=np.float64)
    h, w = image.shape[:2]
    attn = np.asarray(attention_values, dtype=np.float64)
    up = maps.normalize_max_one(maps.upsample_bilinear(attn, (h, w)))
    gaze = sample.saliency.as_max_one().values
    panel = np.concatenate([image, overlay(image, up), overlay(image, gaze)], axis=1)

    panel_path = out_dir / f"{sample.sample_id}_overlay.png"
    attn_path = out_dir / f"{sample.sample_id}_attention.npy"
    _to_png(panel, panel_path)
    np.save(attn_path, attn.astype(np.float32))
    return {"overlay": str(panel_path), "attention": str(attn_path)}


def attention_mask_fraction(attention_values: np.ndarray, mask: np.ndarray) -> float:
    """Fraction of attention mass inside a mask, at image resolution."""
    attn = np.asarray(attention_values, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    up = maps.upsample_bilinear(attn, mask.shape)
    total = up.sum()
    if total <= 0:
        return 0.0
    return float(up[mask].sum() / total)
