"""Aggregation of raw rater scores and fixation logs into training supervision.

Covers MOS averaging, rating histograms, Gaussian gaze saliency, the two
behavioral gaze metrics (centralization, vehicle focus), and rater quality
control. Log formats:

    scores CSV:    rater_id,image_id,score
    fixations CSV: rater_id,image_id,x,y,timestamp_ms
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import maps
from .data import FixationRecord, SaliencyMap


class NoRatingsError(ValueError):
    """Raised when an operation that needs at least one rating receives none."""


@dataclass(frozen=True)
class RaterLog:
    """Everything one rater produced: per-image integer scores and fixation lists."""

    rater_id: str
    scores: dict = field(default_factory=dict)        # image_id -> int in 1..L
    fixations: dict = field(default_factory=dict)     # image_id -> list[FixationRecord]

    def __post_init__(self):
        for image_id, score in self.scores.items():
            if not (1 <= score <= 5):
                raise ValueError(
                    f"rater {self.rater_id!r} score {score} for {image_id!r} outside ACR range 1..5"
                )


def compute_mos(scores) -> float:
    """Arithmetic mean of the ratings. Raises NoRatingsError on an empty list."""
    scores = list(scores)
    if not scores:
        raise NoRatingsError("cannot compute MOS from an empty rating list")
    return float(np.mean(scores))


def compute_rating_distribution(scores, num_levels: int = 5):
    """Normalized count histogram over the rating levels."""
    from .data import RatingDistribution

    scores = list(scores)
    if not scores:
        raise NoRatingsError("cannot build a rating distribution from an empty rating list")
    counts = np.zeros(num_levels, dtype=np.float64)
    for s in scores:
        if not (1 <= s <= num_levels) or int(s) != s:
            raise ValueError(f"score {s} outside integer range 1..{num_levels}")
        counts[int(s) - 1] += 1
    return RatingDistribution(
        probs=counts / len(scores),
        rater_count=len(scores),
        level_scores=np.arange(1, num_levels + 1, dtype=np.float64),
    )


def saliency_from_fixations(fixations, shape, sigma: float, normalization: str = "max-one") -> SaliencyMap:
    """Accumulate a Gaussian per fixation, then normalize.

    An empty fixation list yields an all-zero map tagged raw.
    """
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = shape
    fixations = list(fixations)
    if not fixations:
        return SaliencyMap(np.zeros((h, w)), "raw")
    points = np.array([[f.x, f.y] for f in fixations], dtype=np.float64)
    bad = [
        (f.x, f.y) for f in fixations if not (0 <= f.x < w and 0 <= f.y < h)
    ]
    if bad:
        raise ValueError(f"fixations outside image bounds {w}x{h}: {bad[:5]}")
    raw = maps.gaussian_splat(points, (h, w), sigma)
    if normalization == "raw":
        return SaliencyMap(raw, "raw")
    if normalization == "max-one":
        return SaliencyMap(maps.normalize_max_one(raw), "max-one")
    if normalization == "unit-sum":
        return SaliencyMap(maps.normalize_unit_sum(raw), "unit-sum")
    raise ValueError(f"unknown normalization {normalization!r}")


def default_sigma(shape, fraction: float = 0.02) -> float:
    """Gaze smoothing sigma as a fraction of the image diagonal."""
    h, w = shape
    return float(fraction * np.hypot(h, w))


def gaze_centralization(saliency: SaliencyMap) -> float:
    """Population standard deviation of the map entries (how concentrated gaze is)."""
    return float(np.std(saliency.values))


def gaze_focus(saliency: SaliencyMap, mask: np.ndarray) -> float:
    """Sum of the elementwise product between the saliency map and a region mask."""
    mask = np.asarray(mask)
    if mask.shape != saliency.shape:
        raise ValueError(f"mask shape {mask.shape} does not match saliency shape {saliency.shape}")
    return float(np.sum(saliency.values * mask))


def quality_control(logs, min_subjects: int = 10, min_rater_corr: float = 0.2):
    """Screen raters by leave-one-out agreement and flag under-covered images.

    A rater is rejected when the Pearson correlation between their scores and
    the leave-one-out per-image mean (over images shared with at least one
    other rater) falls below `min_rater_corr`. Raters with fewer than two
    shared images, or with degenerate (constant) score vectors, cannot be
    screened; they are kept and noted. Images with fewer than `min_subjects`
    accepted ratings are flagged in the report.
    """
    if min_subjects < 1:
        raise ValueError(f"min_subjects must be >= 1, got {min_subjects}")
    logs = list(logs)
    by_image: dict[str, dict[str, int]] = {}
    for log in logs:
        for image_id, score in log.scores.items():
            by_image.setdefault(image_id, {})[log.rater_id] = score

    rejected = []
    notes = []
    accepted = []
    for log in logs:
        shared = [
            image_id for image_id in log.scores if len(by_image[image_id]) >= 2
        ]
        if len(shared) < 2:
            accepted.append(log)
            notes.append(
                {"rater_id": log.rater_id, "note": f"only {len(shared)} shared images; not screened"}
            )
            continue
        own = np.array([log.scores[i] for i in shared], dtype=np.float64)
        loo = np.array(
            [
                np.mean([s for r, s in by_image[i].items() if r != log.rater_id])
                for i in shared
            ]
        )
        if np.std(own) == 0 or np.std(loo) == 0:
            accepted.append(log)
            notes.append(
                {"rater_id": log.rater_id, "note": "constant scores on shared images; not screened"}
            )
            continue
        corr = float(np.corrcoef(own, loo)[0, 1])
        if corr < min_rater_corr:
            rejected.append(
                {
                    "rater_id": log.rater_id,
                    "correlation": corr,
                    "reason": f"leave-one-out correlation {corr:.4f} below threshold {min_rater_corr}",
                }
            )
        else:
            accepted.append(log)

    accepted_by_image: dict[str, int] = {}
    for log in accepted:
        for image_id in log.scores:
            accepted_by_image[image_id] = accepted_by_image.get(image_id, 0) + 1
    flagged = [
        {
            "image_id": image_id,
            "accepted_ratings": count,
            "reason": f"{count} accepted ratings, fewer than {min_subjects} subjects",
        }
        for image_id, count in sorted(accepted_by_image.items())
        if count < min_subjects
    ]

    report = {
        "min_subjects": min_subjects,
        "min_rater_corr": min_rater_corr,
        "rejected_raters": sorted(rejected, key=lambda r: r["rater_id"]),
        "flagged_images": flagged,
        "notes": sorted(notes, key=lambda n: n["rater_id"]),
    }
    return accepted, report


# ---------------------------------------------------------------------------
# log file I/O

SCORE_HEADER = ["rater_id", "image_id", "score"]
FIXATION_HEADER = ["rater_id", "image_id", "x", "y", "timestamp_ms"]


def read_score_log(path):
    """Read a scores CSV into (rater_id, image_id, score) tuples."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCORE_HEADER:
            raise ValueError(f"{path}:1: expected header {','.join(SCORE_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                rows.append((row[0], row[1], int(row[2])))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad score {row[2]!r}") from exc
    return rows


def read_fixation_log(path):
    """Read a fixations CSV into FixationRecord objects keyed by (rater, image)."""
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != FIXATION_HEADER:
            raise ValueError(f"{path}:1: expected header {','.join(FIXATION_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 5:
                raise ValueError(f"{path}:{lineno}: expected 5 fields, got {len(row)}")
            try:
                rows.append(
                    (row[1], FixationRecord(x=float(row[2]), y=float(row[3]),
                                            timestamp_ms=float(row[4]), rater_id=row[0]))
                )
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: bad numeric field in {row!r}") from exc
    return rows


def write_score_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORE_HEADER)
        for rater_id, image_id, score in rows:
            writer.writerow([rater_id, image_id, score])


def write_fixation_log(path, rows) -> None:
    """rows: iterable of (image_id, FixationRecord)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(FIXATION_HEADER)
        for image_id, f in rows:
            writer.writerow([f.rater_id, image_id, _fmt(f.x), _fmt(f.y), _fmt(f.timestamp_ms)])


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def build_rater_logs(score_rows, fixation_rows) -> list:
    """Group flat log rows into per-rater RaterLog objects (sorted by rater id)."""
    scores: dict[str, dict[str, int]] = {}
    for rater_id, image_id, score in score_rows:
        scores.setdefault(rater_id, {})[image_id] = score
    fixations: dict[str, dict[str, list]] = {}
    for image_id, record in fixation_rows:
        fixations.setdefault(record.rater_id, {}).setdefault(image_id, []).append(record)
    logs = []
    for rater_id in sorted(set(scores) | set(fixations)):
        logs.append(
            RaterLog(
                rater_id=rater_id,
                scores=scores.get(rater_id, {}),
                fixations=fixations.get(rater_id, {}),
            )
        )
    return logs


def write_qc_report(path, report) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")


def read_factors_csv(path) -> dict:
    """Wide factors CSV (image_id,<factor>,...) to {image_id: {factor: level}}."""
    import csv as _csv

    table = {}
    with open(path, newline="") as fh:
        reader = _csv.DictReader(fh)
        if reader.fieldnames is None or reader.fieldnames[0] != "image_id":
            raise ValueError(f"{path}:1: first column must be image_id")
        for row in reader:
            image_id = row.pop("image_id")
            table[image_id] = {k: v for k, v in row.items() if v}
    return table


def ingest(
    images_dir,
    scores_csv,
    fixations_csv,
    out_dir,
    factors_csv=None,
    masks_dir=None,
    min_subjects: int = 10,
    min_rater_corr: float = 0.2,
    ratio=(0.8, 0.1, 0.1),
    seed: int = 0,
):
    """Aggregate raw logs into a manifest with quality control.

    Images must exist as <images_dir>/<image_id>.png. Writes per-sample
    ratings JSON ({"scores": [...]}) and fixation CSVs, qc_report.json, and
    manifest.json under out_dir. Deterministic for identical inputs.
    """
    import os as _os

    from .data import DatasetManifest, ManifestEntry, make_split, save_manifest

    images_dir = Path(images_dir)
    out_dir = Path(out_dir)
    (out_dir / "ratings").mkdir(parents=True, exist_ok=True)
    (out_dir / "fixations").mkdir(parents=True, exist_ok=True)

    score_rows = read_score_log(scores_csv)
    fixation_rows = read_fixation_log(fixations_csv)
    logs = build_rater_logs(score_rows, fixation_rows)
    accepted, report = quality_control(logs, min_subjects=min_subjects, min_rater_corr=min_rater_corr)

    image_ids = sorted({image_id for _, image_id, _ in score_rows})
    missing = [i for i in image_ids if not (images_dir / f"{i}.png").exists()]
    if missing:
        raise FileNotFoundError(f"images missing for ids: {missing}")

    factors = read_factors_csv(factors_csv) if factors_csv else {}
    entries = []
    excluded = []
    for image_id in image_ids:
        scored = [(log.rater_id, log.scores[image_id]) for log in accepted if image_id in log.scores]
        if not scored:
            excluded.append({"image_id": image_id, "reason": "no accepted ratings"})
            continue
        scored.sort()
        (out_dir / "ratings" / f"{image_id}.json").write_text(
            json.dumps({"scores": [s for _, s in scored]}, indent=2, sort_keys=True) + "\n"
        )
        records = []
        for log in accepted:
            records.extend(log.fixations.get(image_id, []))
        records.sort(key=lambda f: (f.rater_id, f.timestamp_ms, f.x, f.y))
        write_fixation_log(out_dir / "fixations" / f"{image_id}.csv",
                           [(image_id, f) for f in records])
        mask_rel = None
        if masks_dir is not None:
            mask_path = Path(masks_dir) / f"{image_id}.png"
            if mask_path.exists():
                mask_rel = _os.path.relpath(mask_path, out_dir)
        entries.append(
            ManifestEntry(
                sample_id=image_id,
                image=_os.path.relpath(images_dir / f"{image_id}.png", out_dir),
                ratings=f"ratings/{image_id}.json",
                fixations=f"fixations/{image_id}.csv",
                mask=mask_rel,
                factors=factors.get(image_id, {}),
            )
        )
    report["excluded_images"] = excluded

    manifest = DatasetManifest(entries=tuple(entries), root=out_dir)
    manifest = make_split(manifest, ratio=ratio, seed=seed)
    save_manifest(manifest, out_dir / "manifest.json")
    write_qc_report(out_dir / "qc_report.json", report)
    return manifest, report
