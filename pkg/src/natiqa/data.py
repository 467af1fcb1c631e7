"""Domain types, dataset manifest schema, and split logic.

All types are treated as immutable after construction and are safe to share
across workers. Sample identity is the manifest-relative image path.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

DEFAULT_LEVELS = 5
DEFAULT_LEVEL_SCORES = (1.0, 2.0, 3.0, 4.0, 5.0)
SPLIT_NAMES = ("train", "val", "test")

PROB_TOL = 1e-6


class StratificationError(ValueError):
    """Raised when a manifest cannot be split into three nonempty stratified parts."""


@dataclass(frozen=True)
class RatingDistribution:
    """Normalized histogram over the L ACR levels, plus how many raters produced it."""

    probs: np.ndarray
    rater_count: int
    level_scores: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_LEVEL_SCORES))

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        scores = np.asarray(self.level_scores, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "level_scores", scores)
        if probs.ndim != 1 or probs.shape != scores.shape:
            raise ValueError(
                f"probs and level_scores must be equal-length vectors, "
                f"got {probs.shape} and {scores.shape}"
            )
        if np.any(probs < 0):
            raise ValueError("rating probabilities must be non-negative")
        if abs(probs.sum() - 1.0) > PROB_TOL:
            raise ValueError(f"rating probabilities must sum to 1, got {probs.sum():.8f}")
        if self.rater_count < 1:
            raise ValueError(f"rater_count must be >= 1, got {self.rater_count}")

    @property
    def num_levels(self) -> int:
        return len(self.probs)

    def mos(self) -> float:
        """Expected score under the distribution."""
        return float(np.dot(self.probs, self.level_scores))


@dataclass(frozen=True)
class FixationRecord:
    """One raw gaze fixation in image pixel coordinates."""

    x: float
    y: float
    timestamp_ms: float
    rater_id: str


@dataclass(frozen=True)
class SaliencyMap:
    """Non-negative 2-D gaze density. `normalization` is one of max-one, unit-sum, raw."""

    values: np.ndarray
    normalization: str = "max-one"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 2:
            raise ValueError(f"saliency map must be 2-D, got shape {values.shape}")
        if np.any(values < 0):
            raise ValueError("saliency map entries must be non-negative")
        if self.normalization not in ("max-one", "unit-sum", "raw"):
            raise ValueError(f"unknown normalization tag {self.normalization!r}")
        if values.size and values.max() > 0:
            if self.normalization == "max-one" and abs(values.max() - 1.0) > PROB_TOL:
                raise ValueError("max-one map must have maximum 1")
            if self.normalization == "unit-sum" and abs(values.sum() - 1.0) > PROB_TOL:
                raise ValueError("unit-sum map must sum to 1")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def as_max_one(self) -> "SaliencyMap":
        from . import maps

        if self.normalization == "max-one":
            return self
        return SaliencyMap(maps.normalize_max_one(self.values), "max-one")

    def as_unit_sum(self) -> "SaliencyMap":
        from . import maps

        if self.normalization == "unit-sum":
            return self
        return SaliencyMap(maps.normalize_unit_sum(self.values), "unit-sum")


@dataclass(frozen=True)
class RatedSample:
    """One image with its subjective annotations and contextual factor labels."""

    sample_id: str
    image: np.ndarray
    rating: RatingDistribution | None
    mos: float
    saliency: SaliencyMap
    vehicle_mask: np.ndarray | None = None
    factors: dict = field(default_factory=dict)


def validate_sample(sample: RatedSample) -> list[str]:
    """Check RatedSample invariants. Returns a list of violations; never raises."""
    violations = []
    image = np.asarray(sample.image)
    if image.ndim != 3:
        violations.append(f"image: expected H x W x C array, got shape {image.shape}")
    else:
        if image.min() < 0.0 or image.max() > 1.0 + PROB_TOL:
            violations.append("image: channel values must lie in [0, 1]")
        if sample.saliency.shape != image.shape[:2]:
            violations.append(
                f"saliency: shape {sample.saliency.shape} does not match "
                f"image spatial dimensions {image.shape[:2]}"
            )
        if sample.vehicle_mask is not None and sample.vehicle_mask.shape != image.shape[:2]:
            violations.append(
                f"vehicle_mask: shape {sample.vehicle_mask.shape} does not match "
                f"image spatial dimensions {image.shape[:2]}"
            )
    if sample.rating is not None:
        probs = np.asarray(sample.rating.probs, dtype=np.float64)
        if np.any(probs < 0):
            violations.append("rating: probabilities must be non-negative")
        if abs(probs.sum() - 1.0) > PROB_TOL:
            violations.append(f"rating: probabilities sum to {probs.sum():.6f}, not 1 (normalization)")
        expected = float(np.dot(probs, sample.rating.level_scores))
        if abs(sample.mos - expected) > PROB_TOL:
            violations.append(
                f"mos: {sample.mos:.6f} inconsistent with dot(probs, level_scores) = {expected:.6f}"
            )
    if np.any(sample.saliency.values < 0):
        violations.append("saliency: entries must be non-negative")
    return violations


@dataclass(frozen=True)
class ManifestEntry:
    """Paths (manifest-relative) and factor labels for one sample."""

    sample_id: str
    image: str
    ratings: str
    fixations: str
    mask: str | None = None
    factors: dict = field(default_factory=dict)


@dataclass(frozen=True)
class DatasetManifest:
    """Entry list plus an id -> split assignment. `root` anchors relative paths."""

    entries: tuple
    split_assignment: dict = field(default_factory=dict)
    root: Path | None = None

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        ids = [e.sample_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ValueError(f"duplicate sample ids in manifest: {dupes}")
        for sid, split in self.split_assignment.items():
            if split not in SPLIT_NAMES:
                raise ValueError(f"unknown split {split!r} for sample {sid!r}")

    def __len__(self) -> int:
        return len(self.entries)

    def entry(self, sample_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.sample_id == sample_id:
                return e
        raise KeyError(sample_id)

    def split_ids(self, split: str) -> list[str]:
        return [e.sample_id for e in self.entries if self.split_assignment.get(e.sample_id) == split]

    def resolve(self, relpath: str) -> Path:
        base = self.root if self.root is not None else Path(".")
        return (base / relpath).resolve()


def manifest_to_json(manifest: DatasetManifest) -> str:
    samples = []
    for e in manifest.entries:
        item = {
            "id": e.sample_id,
            "image": e.image,
            "ratings": e.ratings,
            "fixations": e.fixations,
            "factors": dict(sorted(e.factors.items())),
        }
        if e.mask is not None:
            item["mask"] = e.mask
        samples.append(item)
    splits = {name: manifest.split_ids(name) for name in SPLIT_NAMES}
    doc = {"samples": samples, "splits": splits}
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(manifest_to_json(manifest))


def load_manifest(path, check_paths: bool = True) -> DatasetManifest:
    """Load a manifest JSON. With check_paths, every referenced file must exist."""
    path = Path(path)
    doc = json.loads(path.read_text())
    root = path.parent
    entries = []
    for item in doc["samples"]:
        entries.append(
            ManifestEntry(
                sample_id=item["id"],
                image=item["image"],
                ratings=item["ratings"],
                fixations=item["fixations"],
                mask=item.get("mask"),
                factors=dict(item.get("factors", {})),
            )
        )
    assignment = {}
    for split, ids in doc.get("splits", {}).items():
        for sid in ids:
            if sid in assignment:
                raise ValueError(f"sample {sid!r} assigned to multiple splits")
            assignment[sid] = split
    manifest = DatasetManifest(entries=tuple(entries), split_assignment=assignment, root=root)
    if check_paths:
        missing = []
        for e in manifest.entries:
            for rel in (e.image, e.ratings, e.fixations, e.mask):
                if rel is not None and not (root / rel).exists():
                    missing.append(rel)
        if missing:
            raise FileNotFoundError(f"manifest references missing files: {missing[:10]}")
    return manifest


def _largest_remainder(n: int, fractions) -> list[int]:
    raw = [n * f for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    remainder = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (raw[i] - counts[i], -i), reverse=True)
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def make_split(manifest: DatasetManifest, ratio=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetManifest:
    """Deterministically assign samples to train/val/test, stratified by `baseline`.

    Strata with >= 3 samples contribute at least one sample to every split;
    smaller strata are allocated proportionally without that guarantee.
    """
    if len(ratio) != len(SPLIT_NAMES):
        raise ValueError(f"ratio must have {len(SPLIT_NAMES)} fractions, got {len(ratio)}")
    if any(f <= 0 for f in ratio):
        raise ValueError(f"split fractions must be positive, got {ratio}")
    if abs(sum(ratio) - 1.0) > PROB_TOL:
        raise ValueError(f"split fractions must sum to 1, got {sum(ratio)}")
    if len(manifest) < len(SPLIT_NAMES):
        raise StratificationError(
            f"stratified split infeasible: manifest has {len(manifest)} entries, "
            f"need at least {len(SPLIT_NAMES)}"
        )

    strata: dict[str, list[str]] = {}
    for e in manifest.entries:
        strata.setdefault(e.factors.get("baseline", ""), []).append(e.sample_id)

    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    for label in sorted(strata):
        ids = strata[label]
        perm = [ids[i] for i in rng.permutation(len(ids))]
        counts = _largest_remainder(len(ids), ratio)
        if len(ids) >= len(SPLIT_NAMES):
            # Guarantee every split sees this baseline.
            for i, c in enumerate(counts):
                while counts[i] == 0:
                    donor = int(np.argmax(counts))
                    counts[donor] -= 1
                    counts[i] += 1
        pos = 0
        for split, c in zip(SPLIT_NAMES, counts):
            for sid in perm[pos : pos + c]:
                assignment[sid] = split
            pos += c

    # Repair: every split must end up nonempty even when all strata are tiny.
    for split in SPLIT_NAMES:
        if not any(s == split for s in assignment.values()):
            sizes = {name: sum(1 for s in assignment.values() if s == name) for name in SPLIT_NAMES}
            donor = max(sizes, key=lambda name: sizes[name])
            moved = next(sid for sid in sorted(assignment) if assignment[sid] == donor)
            assignment[moved] = split

    return replace(manifest, split_assignment=assignment)
