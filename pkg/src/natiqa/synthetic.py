"""Deterministic oracle-labeled dataset generator for desk-scale verification.

Each sample is a rendered scene: background, a "vehicle" rectangle (mask
recorded), and a patch whose conspicuousness c in [0, 1] controls its contrast
and saturation against the vehicle body. Known rules produce the labels:

    oracle naturalness  y* = 1 + 4 (1 - c) * product(factor multipliers)
    rating distribution  = discretized Gaussian around y* (configured width)
    fixations            = Gaussian cluster on the patch, spread decreasing in c

so naturalness strictly decreases in c, and gaze concentrates exactly where
conspicuous patches sit. Output uses the manifest/CSV/PNG formats of the data
and aggregation modules; everything is reproducible from the seed alone.
"""

from __future__ import annotations

import colorsys
import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import aggregation
from .data import (
    DatasetManifest,
    FixationRecord,
    ManifestEntry,
    RatingDistribution,
    make_split,
    save_manifest,
)

DEFAULT_FACTOR_GRID = {
    "distance": {"near": 0.76, "mid": 0.88, "far": 1.00},
    "yaw": {"y000": 0.86, "y045": 0.93, "y090": 1.00, "y135": 0.90},
    "illumination": {"dim": 0.91, "bright": 1.00},
}

DEFAULT_BASELINES = ("solid", "stripe", "checker", "rings", "noise", "diag", "grad")


class GenerationError(ValueError):
    """Raised for unsatisfiable generator configurations."""


@dataclass(frozen=True)
class SynthConfig:
    count: int = 100
    image_size: tuple = (64, 64)
    seed: int = 0
    conspicuousness_range: tuple = (0.05, 0.95)
    rating_noise: float = 0.7
    gaze_sigma_range: tuple = (3.0, 12.0)   # cluster spread at c=1 (tight) .. c=0 (wide)
    raters: int = 12
    fixations_per_rater: int = 8
    background_fixation_rate: float = 0.08
    num_levels: int = 5
    patch_frac: float = 0.34          # patch side as a fraction of the vehicle's min dimension
    decoys: int = 2                   # same-family on-vehicle patches, label-independent
    cue_strength: float = 0.30        # how visibly the windshield band marks the rated end
    distractors: int = 2
    distractor_scale: float = 1.2     # distractor side relative to the patch side
    factor_grid: dict = field(default_factory=lambda: {k: dict(v) for k, v in DEFAULT_FACTOR_GRID.items()})
    baselines: tuple = DEFAULT_BASELINES

    def __post_init__(self):
        if self.count < 1:
            raise GenerationError(f"count must be >= 1, got {self.count}")
        h, w = self.image_size
        if min(h, w) < 8:
            raise GenerationError(f"image size {self.image_size} below minimum 8x8")
        lo, hi = self.conspicuousness_range
        if not (0.0 <= lo < hi <= 1.0):
            raise GenerationError(
                f"conspicuousness range must be within [0, 1] with lo < hi, got {self.conspicuousness_range}"
            )
        if self.rating_noise <= 0:
            raise GenerationError(f"rating noise width must be positive, got {self.rating_noise}")
        tight, wide = self.gaze_sigma_range
        if not (0 < tight <= wide):
            raise GenerationError(f"gaze sigma range must satisfy 0 < tight <= wide, got {self.gaze_sigma_range}")
        if self.raters < 1 or self.fixations_per_rater < 1:
            raise GenerationError("raters and fixations_per_rater must be >= 1")


def factor_multiplier(config: SynthConfig, factors: dict) -> float:
    m = 1.0
    for name, level in factors.items():
        if name in config.factor_grid:
            m *= config.factor_grid[name][level]
    return m


def oracle_score(config: SynthConfig, c: float, factors: dict) -> float:
    """Ground-truth naturalness: 5 at c=0 under neutral factors, strictly decreasing in c."""
    return 1.0 + 4.0 * (1.0 - c) * factor_multiplier(config, factors)


def discretized_gaussian(center: float, width: float, num_levels: int = 5) -> np.ndarray:
    levels = np.arange(1, num_levels + 1, dtype=np.float64)
    weights = np.exp(-((levels - center) ** 2) / (2.0 * width * width))
    return weights / weights.sum()


def gaze_sigma(config: SynthConfig, c: float) -> float:
    tight, wide = config.gaze_sigma_range
    return wide - (wide - tight) * c


def _level_param(levels: dict, level: str, lo: float, hi: float) -> float:
    """Map a factor level to a visual parameter by its index among sorted levels."""
    names = sorted(levels)
    idx = names.index(level)
    if len(names) == 1:
        return (lo + hi) / 2.0
    return lo + (hi - lo) * idx / (len(names) - 1)


def _pattern_mask(name: str, side: int) -> np.ndarray:
    yy, xx = np.mgrid[0:side, 0:side]
    if name == "solid":
        return np.zeros((side, side))
    if name == "stripe":
        return (yy // 3) % 2
    if name == "checker":
        return ((yy // 4) + (xx // 4)) % 2
    if name == "rings":
        r = np.hypot(yy - side / 2, xx - side / 2)
        return (r // 3) % 2
    if name == "diag":
        return ((yy + xx) // 4) % 2
    if name == "grad":
        return xx / max(side - 1, 1)
    if name == "noise":
        # Fixed texture per size: deterministic regardless of sample order.
        rng = np.random.default_rng(np.random.SeedSequence([1234, side]))
        return rng.random((side, side))
    # Unknown baseline names fall back to a digest-derived stripe period.
    digest = int(hashlib.sha1(name.encode()).hexdigest()[:8], 16)
    period = 2 + digest % 5
    return (yy // period) % 2


def _saturate(color: np.ndarray, amount: float) -> np.ndarray:
    mean = color.mean()
    return np.clip(mean + (color - mean) * (1.0 + amount), 0.0, 1.0)


def _paint_patch(image, rng, x0, y0, side, base_color, c, texture):
    accent = np.array(colorsys.hsv_to_rgb(rng.uniform(0.0, 1.0), 0.95, 0.95))
    color = _saturate((1.0 - c) * base_color + c * accent, 0.6 * c)
    secondary = (1.0 - 0.5 * c) * color
    pattern = _pattern_mask(texture, side)[:, :, None]
    image[y0 : y0 + side, x0 : x0 + side] = (
        color[None, None, :] * (1 - pattern) + secondary[None, None, :] * pattern
    )


def _render(rng, config: SynthConfig, factors: dict, baseline: str, c: float):
    """Compose the scene. Returns (image HWC, vehicle mask, patch center xy, patch side).

    The vehicle carries a subtle darker "windshield" band on its front side
    (front depends on the yaw level). The rated patch sits nearest the front;
    config.decoys adds same-family patches with label-independent
    conspicuousness along the body, so "which patch is rated" is identifiable
    only through the subtle front cue, which the gaze supervision hands over
    directly.
    """
    h, w = config.image_size
    top = np.clip(np.array([0.55, 0.68, 0.84]) + rng.normal(0, 0.04, 3), 0, 1)
    bottom = np.clip(np.array([0.46, 0.43, 0.38]) + rng.normal(0, 0.04, 3), 0, 1)
    rows = np.linspace(0.0, 1.0, h)[:, None, None]
    image = top[None, None, :] * (1 - rows) + bottom[None, None, :] * rows
    image = image + rng.normal(0, 0.02, size=(h, w, 3))

    distance_levels = config.factor_grid.get("distance", {"mid": 1.0})
    yaw_levels = config.factor_grid.get("yaw", {"y090": 1.0})
    scale = _level_param(distance_levels, factors.get("distance", "mid"), 0.40, 0.66)
    cx_frac = _level_param(yaw_levels, factors.get("yaw", "y090"), 0.36, 0.64)
    # Facing direction is an independent coin flip; only the windshield band
    # reveals it, so nothing positional leaks which patch is the rated one.
    front_left = bool(rng.random() < 0.5)

    veh_w = max(10, int(round(w * scale)))
    veh_h = max(6, int(round(h * scale * 0.55)))
    cx = int(round(w * cx_frac + rng.integers(-2, 3)))
    cy = int(round(h * 0.60 + rng.integers(-2, 3)))
    x0 = int(np.clip(cx - veh_w // 2, 0, w - veh_w))
    y0 = int(np.clip(cy - veh_h // 2, 0, h - veh_h))

    veh_color = np.clip(np.array([0.40, 0.44, 0.50]) + rng.normal(0, 0.03, 3), 0, 1)
    shade = np.linspace(-0.05, 0.05, veh_h)[:, None, None]
    image[y0 : y0 + veh_h, x0 : x0 + veh_w] = np.clip(veh_color + shade, 0, 1)
    band_w = max(1, int(round(0.08 * veh_w)))
    band_color = np.clip(veh_color * (1.0 - config.cue_strength), 0, 1)
    if front_left:
        image[y0 : y0 + veh_h, x0 : x0 + band_w] = band_color
    else:
        image[y0 : y0 + veh_h, x0 + veh_w - band_w : x0 + veh_w] = band_color
    mask = np.zeros((h, w), dtype=bool)
    mask[y0 : y0 + veh_h, x0 : x0 + veh_w] = True

    side = max(2, int(round(config.patch_frac * min(veh_w, veh_h))))
    if side > min(veh_w, veh_h):
        raise GenerationError(f"patch side {side} exceeds vehicle region {veh_w}x{veh_h}")
    slots = np.linspace(0.24, 0.78, config.decoys + 1)
    fracs = slots if front_left else 1.0 - slots
    patch_xy = None
    for k, frac in enumerate(fracs):
        jx = int(round(rng.normal(0, 0.02) * veh_w))
        jy = int(round(rng.normal(0, 0.05) * veh_h))
        qx0 = int(np.clip(x0 + int(round(frac * veh_w)) + jx - side // 2,
                          x0, x0 + veh_w - side))
        qy0 = int(np.clip(y0 + (veh_h - side) // 2 + jy, y0, y0 + veh_h - side))
        c_k = c if k == 0 else rng.uniform(*config.conspicuousness_range)
        _paint_patch(image, rng, qx0, qy0, side, veh_color, c_k, baseline)
        if k == 0:
            patch_xy = (qx0, qy0)
    px0, py0 = patch_xy

    # Background distractors: patch-like textures (often flashier and larger
    # than the true patch) whose conspicuousness is independent of the oracle
    # score. An unguided regressor has to discover which salient region
    # matters; gaze supervision points at the vehicle patch directly.
    for d in range(config.distractors):
        d_side = max(2, int(round(side * config.distractor_scale * rng.uniform(0.8, 1.2))))
        d_side = min(d_side, h - 1, w - 1)
        spot = None
        for _attempt in range(20):
            dx0 = int(rng.integers(0, max(1, w - d_side)))
            dy0 = int(rng.integers(0, max(1, h - d_side)))
            if dx0 + d_side <= x0 or dx0 >= x0 + veh_w or dy0 + d_side <= y0 or dy0 >= y0 + veh_h:
                spot = (dx0, dy0)
                break
        if spot is None:
            continue
        dx0, dy0 = spot
        c_d = rng.uniform(*config.conspicuousness_range)
        base = image[dy0 : dy0 + d_side, dx0 : dx0 + d_side].mean(axis=(0, 1))
        accent_d = np.array(colorsys.hsv_to_rgb(rng.uniform(0.0, 1.0), 0.95, 0.95))
        color_d = _saturate((1.0 - c_d) * base + c_d * accent_d, 0.6 * c_d)
        texture = config.baselines[(d + 1) % len(config.baselines)] if config.baselines else baseline
        pattern_d = _pattern_mask(texture, d_side)[:, :, None]
        image[dy0 : dy0 + d_side, dx0 : dx0 + d_side] = (
            color_d[None, None, :] * (1 - pattern_d)
            + ((1.0 - 0.5 * c_d) * color_d)[None, None, :] * pattern_d
        )

    brightness = _level_param(config.factor_grid.get("illumination", {"bright": 1.0}),
                              factors.get("illumination", "bright"), 1.00, 0.72)
    image = np.clip(image * brightness, 0.0, 1.0)
    patch_center = (px0 + side / 2.0, py0 + side / 2.0)
    return image, mask, patch_center, side


def _sample_fixations(rng, config: SynthConfig, patch_center, c: float):
    h, w = config.image_size
    sigma = gaze_sigma(config, c)
    records = []
    for r in range(config.raters):
        rater_id = f"r{r:02d}"
        for k in range(config.fixations_per_rater):
            if rng.random() < config.background_fixation_rate:
                x = rng.uniform(0, w - 1)
                y = rng.uniform(0, h - 1)
            else:
                x = patch_center[0] + rng.normal(0, sigma)
                y = patch_center[1] + rng.normal(0, sigma)
            records.append(
                FixationRecord(
                    x=float(np.clip(round(x), 0, w - 1)),
                    y=float(np.clip(round(y), 0, h - 1)),
                    timestamp_ms=float(250 * (k + 1)),
                    rater_id=rater_id,
                )
            )
    return records


def _integer_scores(probs: np.ndarray, raters: int) -> list:
    """Allocate integer per-rater scores whose histogram best matches `probs`."""
    raw = probs * raters
    counts = np.floor(raw).astype(int)
    remainder = raters - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    for idx in order[:remainder]:
        counts[idx] += 1
    scores = []
    for level, n in enumerate(counts, start=1):
        scores.extend([level] * int(n))
    return scores


def generate(config: SynthConfig, out_dir, ratio=(0.8, 0.1, 0.1)):
    """Write the synthetic dataset under out_dir and return its manifest.

    Layout: images/, masks/, ratings/, fixations/ per sample; aggregate rater
    logs under logs/; oracle.csv with the generating rule's values; and
    manifest.json with a stratified split.
    """
    out_dir = Path(out_dir)
    for sub in ("images", "masks", "ratings", "fixations", "logs"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    entries = []
    oracle_rows = []
    all_scores = []
    all_fixations = []
    factor_names = sorted(config.factor_grid)
    for i in range(config.count):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, i]))
        sample_id = f"s{i:05d}"
        baseline = config.baselines[i % len(config.baselines)]
        factors = {"baseline": baseline}
        for name in factor_names:
            levels = sorted(config.factor_grid[name])
            factors[name] = levels[rng.integers(0, len(levels))]
        lo, hi = config.conspicuousness_range
        c = float(rng.uniform(lo, hi))

        image, mask, patch_center, _ = _render(rng, config, factors, baseline, c)
        y_star = oracle_score(config, c, factors)
        probs = discretized_gaussian(y_star, config.rating_noise, config.num_levels)
        rating = RatingDistribution(
            probs=probs,
            rater_count=config.raters,
            level_scores=np.arange(1, config.num_levels + 1, dtype=np.float64),
        )
        fixations = _sample_fixations(rng, config, patch_center, c)

        Image.fromarray((image * 255.0).round().astype(np.uint8)).save(
            out_dir / "images" / f"{sample_id}.png"
        )
        Image.fromarray((mask * 255).astype(np.uint8)).save(
            out_dir / "masks" / f"{sample_id}.png"
        )
        ratings_doc = {
            "probs": [float(p) for p in probs],
            "rater_count": config.raters,
            "level_scores": list(range(1, config.num_levels + 1)),
            "mos": rating.mos(),
        }
        (out_dir / "ratings" / f"{sample_id}.json").write_text(
            json.dumps(ratings_doc, indent=2, sort_keys=True) + "\n"
        )
        aggregation.write_fixation_log(
            out_dir / "fixations" / f"{sample_id}.csv",
            [(sample_id, f) for f in fixations],
        )

        for rater_idx, score in enumerate(_integer_scores(probs, config.raters)):
            all_scores.append((f"r{rater_idx:02d}", sample_id, score))
        all_fixations.extend((sample_id, f) for f in fixations)
        oracle_rows.append((sample_id, baseline, c, y_star, rating.mos()))

        entries.append(
            ManifestEntry(
                sample_id=sample_id,
                image=f"images/{sample_id}.png",
                ratings=f"ratings/{sample_id}.json",
                fixations=f"fixations/{sample_id}.csv",
                mask=f"masks/{sample_id}.png",
                factors=factors,
            )
        )

    all_scores.sort(key=lambda row: (row[0], row[1]))
    aggregation.write_score_log(out_dir / "logs" / "scores.csv", all_scores)
    aggregation.write_fixation_log(out_dir / "logs" / "fixations.csv", all_fixations)
    with open(out_dir / "oracle.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "baseline", "conspicuousness", "oracle_score", "mos"])
        for row in oracle_rows:
            writer.writerow([row[0], row[1], repr(row[2]), repr(row[3]), repr(row[4])])

    manifest = DatasetManifest(entries=tuple(entries), root=out_dir)
    manifest = make_split(manifest, ratio=ratio, seed=config.seed)
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def read_oracle(out_dir) -> dict:
    """id -> {baseline, conspicuousness, oracle_score, mos} from a generated dataset."""
    table = {}
    with open(Path(out_dir) / "oracle.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            table[row["id"]] = {
                "baseline": row["baseline"],
                "conspicuousness": float(row["conspicuousness"]),
                "oracle_score": float(row["oracle_score"]),
                "mos": float(row["mos"]),
            }
    return table


# ---------------------------------------------------------------------------
# canonical desk-scale benchmark configurations


def benchmark_synth_config(count: int, seed: int = 0) -> SynthConfig:
    return SynthConfig(count=count, seed=seed)


def benchmark_model_config(seed: int = 0):
    from .model import ModelConfig

    return ModelConfig(
        backbone="small",
        channels=(16, 32, 64),
        image_size=64,
        logit_scale=8.0,
        seed=seed,
    )


def benchmark_train_config(epochs: int = 10, seed: int = 0, lam: float = 8.0, gamma: float = 3.0):
    from .losses import LossWeights
    from .training import TrainConfig

    return TrainConfig(
        epochs=epochs,
        learning_rate=1e-3,
        batch_size=8,
        seed=seed,
        weights=LossWeights(lam=lam, gamma=gamma),
        model=benchmark_model_config(seed),
    )
