"""Materialize RatedSample objects from a manifest on disk."""

from __future__ import annotations

import json

import numpy as np
from PIL import Image

from . import aggregation
from .data import DatasetManifest, ManifestEntry, RatedSample, RatingDistribution


def load_image(path) -> np.ndarray:
    """8-bit image file to H x W x 3 floats in [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def load_mask(path) -> np.ndarray:
    with Image.open(path) as img:
        arr = np.asarray(img.convert("L"))
    return arr > 127


def load_rating(path) -> RatingDistribution:
    """Ratings JSON holds either raw integer scores or an explicit distribution."""
    doc = json.loads(open(path).read())
    if "probs" in doc:
        levels = doc.get("level_scores", list(range(1, len(doc["probs"]) + 1)))
        return RatingDistribution(
            probs=np.asarray(doc["probs"], dtype=np.float64),
            rater_count=int(doc["rater_count"]),
            level_scores=np.asarray(levels, dtype=np.float64),
        )
    if "scores" in doc:
        return aggregation.compute_rating_distribution(doc["scores"])
    raise ValueError(f"{path}: ratings file needs either 'probs' or 'scores'")


def load_fixations(path):
    return [record for _, record in aggregation.read_fixation_log(path)]


def load_sample(
    manifest: DatasetManifest,
    entry: ManifestEntry,
    sigma: float | None = None,
    sigma_frac: float = 0.02,
) -> RatedSample:
    """Load one sample; gaze saliency is rebuilt from the raw fixations."""
    image = load_image(manifest.resolve(entry.image))
    rating = load_rating(manifest.resolve(entry.ratings))
    fixations = load_fixations(manifest.resolve(entry.fixations))
    shape = image.shape[:2]
    if sigma is None:
        sigma = aggregation.default_sigma(shape, sigma_frac)
    saliency = aggregation.saliency_from_fixations(fixations, shape, sigma)
    mask = load_mask(manifest.resolve(entry.mask)) if entry.mask else None
    return RatedSample(
        sample_id=entry.sample_id,
        image=image,
        rating=rating,
        mos=rating.mos(),
        saliency=saliency,
        vehicle_mask=mask,
        factors=dict(entry.factors),
    )


def load_samples(
    manifest: DatasetManifest,
    split: str | None = None,
    sigma: float | None = None,
    sigma_frac: float = 0.02,
) -> list:
    """Load every sample of a split (or the whole manifest when split is None)."""
    wanted = None if split is None else set(manifest.split_ids(split))
    samples = []
    for entry in manifest.entries:
        if wanted is not None and entry.sample_id not in wanted:
            continue
        samples.append(load_sample(manifest, entry, sigma=sigma, sigma_frac=sigma_frac))
    return samples
