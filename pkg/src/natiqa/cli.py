"""Command line entry point.

Commands: dataset synth|ingest, train, eval, explain, stats. All outputs land
under the command's --out directory; wall-clock metadata is confined to a
run.json sidecar so repeated runs are otherwise byte-identical.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import aggregation, loading, metrics, stats, synthetic, visualize
from .data import StratificationError, load_manifest
from .model import (
    ConfigurationError,
    IncompatibleCheckpointError,
    assess,
    load_checkpoint,
)
from .training import NonFiniteLossError, TrainConfig, model_scorer, resume, train


def _parse_ratio(text: str):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"ratio needs 3 comma-separated fractions, got {text!r}")
    return tuple(parts)


def _write_run_sidecar(out_dir, command: str, args, started: float) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "command": command,
        "args": {
            k: (str(v) if isinstance(v, Path) else v)
            for k, v in vars(args).items()
            if k != "func" and not callable(v)
        },
        "started": started,
        "finished": time.time(),
    }
    (out_dir / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# ---------------------------------------------------------------------------
# commands


def cmd_dataset_synth(args) -> int:
    config = synthetic.SynthConfig(
        count=args.count,
        image_size=(args.size, args.size),
        seed=args.seed,
    )
    manifest = synthetic.generate(config, args.out, ratio=args.ratio)
    print(f"wrote {len(manifest)} samples to {args.out}")
    return 0


def cmd_dataset_ingest(args) -> int:
    _require_file(args.scores, "scores CSV")
    _require_file(args.fixations, "fixations CSV")
    _require_file(args.images, "images directory")
    if args.factors:
        _require_file(args.factors, "factors CSV")
    manifest, report = aggregation.ingest(
        images_dir=args.images,
        scores_csv=args.scores,
        fixations_csv=args.fixations,
        out_dir=args.out,
        factors_csv=args.factors,
        masks_dir=args.masks,
        min_subjects=args.min_subjects,
        min_rater_corr=args.min_rater_corr,
        ratio=args.ratio,
        seed=args.seed,
    )
    flagged = len(report["flagged_images"])
    rejected = len(report["rejected_raters"])
    print(
        f"ingested {len(manifest)} samples to {args.out} "
        f"({rejected} raters rejected, {flagged} images flagged)"
    )
    return 0


def _load_train_config(args) -> TrainConfig:
    doc = {}
    if args.config:
        doc = json.loads(_require_file(args.config, "config file").read_text())
    overrides = {
        "epochs": args.epochs,
        "learning_rate": args.learning_rate,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "lambda": args.lam,
        "gamma": args.gamma,
    }
    for key, value in overrides.items():
        if value is not None:
            doc[key] = value
    model_doc = dict(doc.get("model", {}))
    model_overrides = {
        "backbone": args.backbone,
        "image_size": args.image_size,
        "logit_scale": args.logit_scale,
    }
    if args.channels is not None:
        model_overrides["channels"] = [int(c) for c in args.channels.split(",")]
    for key, value in model_overrides.items():
        if value is not None:
            model_doc[key] = value
    if model_doc:
        doc["model"] = model_doc
    return TrainConfig.from_dict(doc)


def cmd_train(args) -> int:
    manifest_path = _require_file(args.manifest, "manifest")
    config = _load_train_config(args)
    manifest = load_manifest(manifest_path)
    if args.resume:
        result = resume(args.resume, config, manifest, args.out, verbose=True)
    else:
        result = train(config, manifest, args.out, verbose=True)
    print(f"final checkpoint: {result.final_checkpoint}")
    if result.best_checkpoint is not None:
        print(f"best checkpoint:  {result.best_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    manifest_path = _require_file(args.manifest, "manifest")
    manifest = load_manifest(manifest_path)
    ids = manifest.split_ids(args.split)
    if not ids:
        raise ValueError(f"split {args.split!r} is empty")
    samples = loading.load_samples(manifest, args.split, sigma_frac=args.sigma_frac)
    if args.oracle:
        # Debug route: ground truth as prediction, gaze as attention.
        predictions = np.array([s.mos for s in samples])
        attentions = [s.saliency.as_max_one().values for s in samples]
        report = metrics.summarize(samples, predictions, attentions)
    else:
        _require_file(args.checkpoint, "checkpoint")
        model, _ = load_checkpoint(args.checkpoint)
        report = metrics.evaluate(model_scorer(model), samples)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(report.to_json())
    (out_dir / "report.txt").write_text(report.to_table())
    print(report.to_table(), end="")
    return 0


def cmd_explain(args) -> int:
    manifest_path = _require_file(args.manifest, "manifest")
    _require_file(args.checkpoint, "checkpoint")
    manifest = load_manifest(manifest_path)
    model, _ = load_checkpoint(args.checkpoint)
    known = {e.sample_id for e in manifest.entries}
    unknown = [i for i in args.ids if i not in known]
    todo = [i for i in args.ids if i in known]
    if unknown:
        print(f"unknown ids skipped: {', '.join(unknown)}", file=sys.stderr)
    if not todo:
        raise ValueError(f"no known ids among {args.ids}")
    for sample_id in todo:
        sample = loading.load_sample(manifest, manifest.entry(sample_id), sigma_frac=args.sigma_frac)
        _, _, attention = assess(model, sample.image)
        paths = visualize.export_explanation(sample, attention.values, args.out)
        print(f"{sample_id}: {paths['overlay']}")
    return 0


def cmd_stats(args) -> int:
    manifest_path = _require_file(args.manifest, "manifest")
    manifest = load_manifest(manifest_path)
    samples = loading.load_samples(manifest, split=None, sigma_frac=args.sigma_frac)
    available = sorted({name for s in samples for name in s.factors})
    factors = args.factors or available
    unknown = [f for f in factors if f not in available]
    if unknown:
        raise ValueError(f"unknown factor(s) {unknown}; available factors: {available}")
    if args.shuffle_labels:
        rng = np.random.default_rng(args.seed)
        for name in factors:
            labels = [s.factors[name] for s in samples]
            perm = rng.permutation(len(labels))
            for s, idx in zip(samples, perm):
                s.factors[name] = labels[idx]
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = {}
    tables = []
    for name in factors:
        report = stats.factor_report(samples, name)
        reports[name] = report.to_dict()
        tables.append(report.to_table())
    (out_dir / "stats.json").write_text(json.dumps(reports, indent=2, sort_keys=True) + "\n")
    (out_dir / "stats.txt").write_text("\n".join(tables))
    print("\n".join(tables), end="")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="natiqa",
        description="Train, evaluate, and analyze a human-aligned naturalness assessor.",
    )
    parser.add_argument("--jobs", type=int, default=None,
                        help="cap CPU worker threads (default: library default)")
    sub = parser.add_subparsers(dest="command", required=True)

    dataset = sub.add_parser("dataset", help="synthesize or ingest a dataset")
    dataset_sub = dataset.add_subparsers(dest="dataset_command", required=True)

    synth = dataset_sub.add_parser("synth", help="generate the synthetic oracle benchmark")
    synth.add_argument("--count", type=int, required=True, help="number of samples")
    synth.add_argument("--seed", type=int, default=0, help="generator seed")
    synth.add_argument("--size", type=int, default=64, help="square image size")
    synth.add_argument("--ratio", type=_parse_ratio, default=(0.8, 0.1, 0.1),
                       help="train,val,test fractions")
    synth.add_argument("--out", required=True, help="output dataset directory")
    synth.set_defaults(func=cmd_dataset_synth)

    ingest = dataset_sub.add_parser("ingest", help="aggregate rater logs into a manifest")
    ingest.add_argument("--images", required=True, help="directory of <image_id>.png files")
    ingest.add_argument("--scores", required=True, help="scores CSV (rater_id,image_id,score)")
    ingest.add_argument("--fixations", required=True,
                        help="fixations CSV (rater_id,image_id,x,y,timestamp_ms)")
    ingest.add_argument("--factors", default=None, help="wide factors CSV (image_id,<factor>...)")
    ingest.add_argument("--masks", default=None, help="directory of <image_id>.png masks")
    ingest.add_argument("--min-subjects", type=int, default=10,
                        help="flag images with fewer accepted ratings")
    ingest.add_argument("--min-rater-corr", type=float, default=0.2,
                        help="reject raters below this leave-one-out correlation")
    ingest.add_argument("--ratio", type=_parse_ratio, default=(0.8, 0.1, 0.1))
    ingest.add_argument("--seed", type=int, default=0)
    ingest.add_argument("--out", required=True, help="output dataset directory")
    ingest.set_defaults(func=cmd_dataset_ingest)

    train_p = sub.add_parser("train", help="train the assessor")
    train_p.add_argument("--manifest", required=True)
    train_p.add_argument("--out", required=True)
    train_p.add_argument("--config", default=None, help="JSON training config")
    train_p.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    train_p.add_argument("--epochs", type=int, default=None)
    train_p.add_argument("--learning-rate", "--lr", type=float, default=None, dest="learning_rate")
    train_p.add_argument("--batch-size", type=int, default=None)
    train_p.add_argument("--seed", type=int, default=None)
    train_p.add_argument("--lambda", type=float, default=None, dest="lam",
                         help="rating-alignment weight")
    train_p.add_argument("--gamma", type=float, default=None,
                         help="attention-alignment weight")
    train_p.add_argument("--backbone", choices=("small", "resnet50"), default=None)
    train_p.add_argument("--image-size", type=int, default=None)
    train_p.add_argument("--logit-scale", type=float, default=None)
    train_p.add_argument("--channels", default=None, help="small-backbone widths, e.g. 16,32,64")
    train_p.set_defaults(func=cmd_train)

    eval_p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    eval_p.add_argument("--checkpoint", default=None)
    eval_p.add_argument("--manifest", required=True)
    eval_p.add_argument("--split", default="test", choices=("train", "val", "test"))
    eval_p.add_argument("--out", required=True)
    eval_p.add_argument("--sigma-frac", type=float, default=0.02)
    eval_p.add_argument("--oracle", action="store_true",
                        help="debug: score with ground-truth MOS and gaze attention")
    eval_p.set_defaults(func=cmd_eval)

    explain = sub.add_parser("explain", help="export attention/gaze overlays")
    explain.add_argument("--checkpoint", required=True)
    explain.add_argument("--manifest", required=True)
    explain.add_argument("--ids", nargs="+", required=True)
    explain.add_argument("--out", required=True)
    explain.add_argument("--sigma-frac", type=float, default=0.02)
    explain.set_defaults(func=cmd_explain)

    stats_p = sub.add_parser("stats", help="factor-effect statistics over a manifest")
    stats_p.add_argument("--manifest", required=True)
    stats_p.add_argument("--factors", nargs="*", default=None)
    stats_p.add_argument("--out", required=True)
    stats_p.add_argument("--sigma-frac", type=float, default=0.02)
    stats_p.add_argument("--shuffle-labels", action="store_true",
                         help="permute factor labels before testing (sanity check)")
    stats_p.add_argument("--seed", type=int, default=0)
    stats_p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.jobs is not None:
        if args.jobs < 1:
            print(f"error: --jobs must be >= 1, got {args.jobs}", file=sys.stderr)
            return 2
        import torch

        torch.set_num_threads(args.jobs)
    started = time.time()
    try:
        code = args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, StratificationError, ConfigurationError, IncompatibleCheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if getattr(args, "out", None):
        _write_run_sidecar(args.out, args.command, args, started)
    return code


if __name__ == "__main__":
    sys.exit(main())
