"""Joint optimization of backbone parameters and rating prototypes.

One logical writer over the model state; data order is derived from
(seed, epoch) so interrupted-and-resumed runs traverse identical batches.
Checkpoints are written atomically; history goes to history.csv.
"""

from __future__ import annotations

import csv
import hashlib
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import loading, maps, metrics
from .data import validate_sample
from .losses import LossWeights, apa_loss, mse_loss, rpa_loss, smooth_distribution, total_loss
from .model import (
    NORM_EPS,
    DPAModel,
    IncompatibleCheckpointError,
    ModelConfig,
    batch_forward,
    config_differences,
    load_checkpoint,
    load_optimizer_state,
    preprocess,
    save_checkpoint,
)

HISTORY_FILE = "history.csv"
HISTORY_COLUMNS = ["epoch", "ls", "lr", "la", "total", "val_srocc", "val_plcc", "val_sc"]
CACHE_ENV = "NATIQA_CACHE"


class NonFiniteLossError(RuntimeError):
    """Raised when a loss component stops being finite; names the component."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 3e-5
    batch_size: int = 16
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    kl_epsilon: float = 1e-4
    attention_second_order: bool = True
    sigma_frac: float = 0.02
    prototype_lr_scale: float = 1.0   # relative learning rate of the prototype bank
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.prototype_lr_scale <= 0:
            raise ValueError(f"prototype_lr_scale must be positive, got {self.prototype_lr_scale}")

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "lambda": self.weights.lam,
            "gamma": self.weights.gamma,
            "kl_epsilon": self.kl_epsilon,
            "attention_second_order": self.attention_second_order,
            "sigma_frac": self.sigma_frac,
            "prototype_lr_scale": self.prototype_lr_scale,
            "model": self.model.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        doc = dict(doc)
        kwargs = {}
        lam = doc.pop("lambda", None)
        gamma = doc.pop("gamma", None)
        if lam is not None or gamma is not None:
            kwargs["weights"] = LossWeights(
                lam=8.0 if lam is None else lam,
                gamma=3.0 if gamma is None else gamma,
            )
        if "model" in doc:
            kwargs["model"] = ModelConfig.from_dict(doc.pop("model"))
        simple = ("epochs", "learning_rate", "batch_size", "seed", "kl_epsilon",
                  "attention_second_order", "sigma_frac", "prototype_lr_scale")
        for key in simple:
            if key in doc:
                kwargs[key] = doc.pop(key)
        if doc:
            raise ValueError(f"invalid config key(s): {sorted(doc)}")
        return cls(**kwargs)


@dataclass(frozen=True)
class TensorBundle:
    """Preprocessed tensors for one split."""

    ids: tuple
    x: torch.Tensor           # (N, 3, H, W), normalized
    probs: torch.Tensor       # (N, L) raw rating distributions
    mos: torch.Tensor         # (N,)
    saliency: torch.Tensor    # (N, h, w) pooled to attention resolution, max-one

    def __len__(self) -> int:
        return len(self.ids)


def _cache_path(key: str):
    cache_dir = os.environ.get(CACHE_ENV)
    if not cache_dir:
        return None
    digest = hashlib.sha256(key.encode()).hexdigest()[:24]
    path = Path(cache_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path / f"tensors_{digest}.npz"


def prepare_tensors(manifest, split, attention_shape, sigma_frac: float = 0.02) -> TensorBundle:
    """Load a split into tensors; cached under $NATIQA_CACHE when set."""
    ids = tuple(manifest.split_ids(split)) if split else tuple(e.sample_id for e in manifest.entries)
    if not ids:
        return TensorBundle(
            ids=(),
            x=torch.zeros((0, 3, 2, 2)),
            probs=torch.zeros((0, 5)),
            mos=torch.zeros(0),
            saliency=torch.zeros((0,) + tuple(attention_shape)),
        )
    root = str(manifest.root.resolve()) if manifest.root is not None else ""
    key = "|".join([root, split or "*", f"{attention_shape}", f"{sigma_frac}", *ids])
    cache_file = _cache_path(key)
    if cache_file is not None and cache_file.exists():
        with np.load(cache_file) as npz:
            return TensorBundle(
                ids=ids,
                x=torch.from_numpy(npz["x"]),
                probs=torch.from_numpy(npz["probs"]),
                mos=torch.from_numpy(npz["mos"]),
                saliency=torch.from_numpy(npz["saliency"]),
            )
    samples = loading.load_samples(manifest, split, sigma_frac=sigma_frac)
    problems = []
    for s in samples:
        for violation in validate_sample(s):
            problems.append(f"{s.sample_id}: {violation}")
    if problems:
        raise ValueError("invalid samples: " + "; ".join(problems[:5]))
    images = np.stack([s.image for s in samples]).astype(np.float32)
    probs = np.stack([s.rating.probs for s in samples]).astype(np.float32)
    mos = np.array([s.mos for s in samples], dtype=np.float32)
    sal = np.stack(
        [
            maps.normalize_max_one(
                maps.pool_to(s.saliency.as_max_one().values, attention_shape)
            )
            for s in samples
        ]
    ).astype(np.float32)
    x = preprocess(images)
    if cache_file is not None:
        np.savez(cache_file, x=x.numpy(), probs=probs, mos=mos, saliency=sal)
    return TensorBundle(
        ids=ids,
        x=x,
        probs=torch.from_numpy(probs),
        mos=torch.from_numpy(mos),
        saliency=torch.from_numpy(sal),
    )


@dataclass(frozen=True)
class TrainResult:
    final_checkpoint: Path
    best_checkpoint: Path | None
    history: list


def _normalize_cam(cam: torch.Tensor) -> torch.Tensor:
    peak = cam.flatten(1).max(dim=1).values.clamp_min(NORM_EPS)
    return cam / peak.view(-1, 1, 1)


def _val_metrics(model, bundle: TensorBundle):
    preds, _, cams = batch_forward(model, bundle.x, want_attention=True)
    mos = bundle.mos.numpy()
    try:
        v_srocc = metrics.srocc(preds, mos)
        v_plcc = metrics.plcc(preds, mos)
    except metrics.UndefinedCorrelationError:
        v_srocc = float("nan")
        v_plcc = float("nan")
    sal = bundle.saliency.numpy()
    sims = []
    for i in range(len(bundle)):
        try:
            sims.append(metrics.attention_similarity(cams[i], sal[i]))
        except metrics.UndefinedSimilarityError:
            sims.append(0.0)
    return v_srocc, v_plcc, float(np.mean(sims)) if sims else float("nan")


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_COLUMNS)
        for row in history:
            writer.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])


def read_history(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append({k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()})
    return rows


def _checkpoint_meta(config: TrainConfig, model, epoch: int, best_val: float) -> dict:
    return {
        "epoch": epoch,
        "lambda": config.weights.lam,
        "gamma": config.weights.gamma,
        "kl_epsilon": config.kl_epsilon,
        "sigma_frac": config.sigma_frac,
        "seed": config.seed,
        "attention_second_order": config.attention_second_order,
        "best_val_srocc": best_val,
        "num_levels": model.config.num_levels,
        "level_scores": list(model.config.level_scores),
    }


def _run(config: TrainConfig, manifest, out_dir, model, optimizer, start_epoch: int,
         history: list, best_val: float, verbose: bool = False) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    last_dir = out_dir / "checkpoints" / "last"
    best_dir = out_dir / "checkpoints" / "best"
    final_dir = out_dir / "checkpoints" / "final"

    attention_shape = model.attention_shape()
    train_bundle = prepare_tensors(manifest, "train", attention_shape, config.sigma_frac)
    if len(train_bundle) == 0:
        raise ValueError("manifest has an empty train split")
    val_bundle = prepare_tensors(manifest, "val", attention_shape, config.sigma_frac)

    weights = config.weights
    smoothed = smooth_distribution(train_bundle.probs.to(torch.float32), config.kl_epsilon)
    n = len(train_bundle)
    level_scores = model.level_scores

    # Retain a loadable state from the start so an abort always has a fallback.
    save_checkpoint(last_dir, model, _checkpoint_meta(config, model, start_epoch, best_val), optimizer)
    best_saved = best_dir.exists()

    for epoch in range(start_epoch, config.epochs):
        model.train()
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1000 + epoch]))
        perm = torch.from_numpy(rng.permutation(n))
        sums = {"ls": 0.0, "lr": 0.0, "la": 0.0, "total": 0.0}
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb = train_bundle.x[idx]
            yb = train_bundle.mos[idx]
            rb = smoothed[idx]
            sb = train_bundle.saliency[idx]

            a = model.activations(xb)
            _, p, y_hat = model.head(a)
            ls = mse_loss(y_hat, yb)
            lr_loss = rpa_loss(p, rb)
            second = config.attention_second_order and weights.gamma > 0
            cam = model.corrected_attention_from(a, p, second_order=second)
            la = apa_loss(_normalize_cam(cam), sb)
            try:
                total = total_loss(ls, lr_loss, la, weights)
            except ValueError as exc:
                raise NonFiniteLossError(
                    f"{exc} (epoch {epoch + 1}, step {batches + 1}); "
                    f"last good checkpoint retained at {last_dir}"
                ) from exc

            optimizer.zero_grad(set_to_none=True)
            if weights.gamma > 0:
                total.backward()
            else:
                # gamma = 0: keep la recorded but leave the attention graph out.
                (ls + weights.lam * lr_loss).backward()
            optimizer.step()
            with torch.no_grad():
                norms = model.prototypes.norm(dim=1, keepdim=True)
                if bool((norms < NORM_EPS).any()):
                    scale = torch.where(norms < NORM_EPS, NORM_EPS / norms.clamp_min(1e-30),
                                        torch.ones_like(norms))
                    model.prototypes.mul_(scale)

            sums["ls"] += float(ls.detach())
            sums["lr"] += float(lr_loss.detach())
            sums["la"] += float(la.detach())
            sums["total"] += float(total.detach())
            batches += 1

        row = {
            "epoch": epoch + 1,
            "ls": sums["ls"] / batches,
            "lr": sums["lr"] / batches,
            "la": sums["la"] / batches,
            "total": sums["total"] / batches,
        }
        if len(val_bundle):
            v_srocc, v_plcc, v_sc = _val_metrics(model, val_bundle)
        else:
            v_srocc = v_plcc = v_sc = float("nan")
        row.update({"val_srocc": v_srocc, "val_plcc": v_plcc, "val_sc": v_sc})
        history.append(row)
        write_history(out_dir / HISTORY_FILE, history)
        if verbose:
            print(
                f"epoch {row['epoch']:3d}  ls={row['ls']:.4f}  lr={row['lr']:.4f}  "
                f"la={row['la']:.4f}  total={row['total']:.4f}  "
                f"val_srocc={v_srocc:.4f}  val_plcc={v_plcc:.4f}  val_sc={v_sc:.4f}"
            )

        if np.isfinite(v_srocc) and v_srocc > best_val:
            best_val = v_srocc
            save_checkpoint(best_dir, model, _checkpoint_meta(config, model, epoch + 1, best_val), optimizer)
            best_saved = True
        save_checkpoint(last_dir, model, _checkpoint_meta(config, model, epoch + 1, best_val), optimizer)

    save_checkpoint(final_dir, model, _checkpoint_meta(config, model, config.epochs, best_val), optimizer)
    return TrainResult(
        final_checkpoint=final_dir,
        best_checkpoint=best_dir if best_saved else None,
        history=history,
    )


def _build_optimizer(model: DPAModel, config: TrainConfig):
    backbone_params = [p for name, p in model.named_parameters() if name != "prototypes"]
    groups = [
        {"params": backbone_params, "lr": config.learning_rate},
        {"params": [model.prototypes], "lr": config.learning_rate * config.prototype_lr_scale},
    ]
    return torch.optim.Adam(groups)


def train(config: TrainConfig, manifest, out_dir, verbose: bool = False) -> TrainResult:
    """Optimize backbone and prototypes jointly from scratch."""
    torch.manual_seed(config.seed)
    model = DPAModel(replace(config.model, seed=config.seed))
    optimizer = _build_optimizer(model, config)
    return _run(config, manifest, out_dir, model, optimizer,
                start_epoch=0, history=[], best_val=float("-inf"), verbose=verbose)


def resume(checkpoint_dir, config: TrainConfig, manifest, out_dir, verbose: bool = False) -> TrainResult:
    """Continue a checkpointed run up to config.epochs total epochs."""
    model, meta = load_checkpoint(checkpoint_dir)
    diffs = config_differences(model.config, config.model)
    if diffs:
        raise IncompatibleCheckpointError(
            "checkpoint incompatible with config: " + "; ".join(diffs)
        )
    optimizer = _build_optimizer(model, config)
    restored = load_optimizer_state(checkpoint_dir, optimizer)
    start_epoch = int(meta.get("epoch", 0))
    best_val = float(meta.get("best_val_srocc", float("-inf")))
    history_path = Path(checkpoint_dir).parent.parent / HISTORY_FILE
    history = read_history(history_path) if history_path.exists() else []
    history = [row for row in history if row["epoch"] <= start_epoch]
    if start_epoch >= config.epochs:
        # 0 extra epochs: a no-op on weights; still materialize the result layout.
        out_dir = Path(out_dir)
        final_dir = out_dir / "checkpoints" / "final"
        save_checkpoint(final_dir, model, _checkpoint_meta(config, model, start_epoch, best_val),
                        optimizer if restored else None)
        write_history(out_dir / HISTORY_FILE, history)
        return TrainResult(final_checkpoint=final_dir, best_checkpoint=None, history=history)
    return _run(config, manifest, out_dir, model, optimizer,
                start_epoch=start_epoch, history=history, best_val=best_val, verbose=verbose)


def model_scorer(model: DPAModel, batch_size: int = 32):
    """Adapter: a scorer over RatedSample lists for metrics.evaluate."""

    def scorer(samples):
        images = np.stack([s.image for s in samples]).astype(np.float32)
        preds, _, cams = batch_forward(model, preprocess(images), batch_size=batch_size)
        return preds, list(cams)

    return scorer
