"""The naturalness assessor: convolutional backbone, prototype rating head,
predicted-MOS expectation, and corrected gradient attention.

The rating head scores an image feature vector by cosine similarity against
one learned prototype per rating level, softmaxed into level likelihoods.
Attention maps are Grad-CAM style (spatially pooled gradients weight the last
convolutional activations, rectified), with the effective gradient taken as
the likelihood-weighted mixture over levels instead of a single scalar target
so no level's score magnitude biases the map.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

NORM_EPS = 1e-8
IMAGE_MEAN = 0.5
IMAGE_STD = 0.25


class DegenerateFeatureError(ValueError):
    """Raised when a feature vector has (numerically) zero norm."""


class ConfigurationError(ValueError):
    """Raised for invalid model configuration or incompatible input sizes."""


class IncompatibleCheckpointError(ValueError):
    """Raised when a checkpoint does not match the requested architecture."""


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "small"                 # "small" or "resnet50"
    channels: tuple = (16, 32, 64)          # small-backbone widths, one pool per block
    image_size: int = 64
    num_levels: int = 5
    level_scores: tuple = (1.0, 2.0, 3.0, 4.0, 5.0)
    logit_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "level_scores", tuple(float(s) for s in self.level_scores))
        if self.backbone not in ("small", "resnet50"):
            raise ConfigurationError(f"unknown backbone {self.backbone!r}")
        if len(self.level_scores) != self.num_levels:
            raise ConfigurationError(
                f"num_levels={self.num_levels} but {len(self.level_scores)} level scores"
            )
        if self.logit_scale <= 0:
            raise ConfigurationError(f"logit_scale must be positive, got {self.logit_scale}")
        min_size = 2 ** len(self.channels) if self.backbone == "small" else 32
        if self.image_size < min_size:
            raise ConfigurationError(
                f"image_size {self.image_size} below backbone minimum {min_size}"
            )

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone,
            "channels": list(self.channels),
            "image_size": self.image_size,
            "num_levels": self.num_levels,
            "level_scores": list(self.level_scores),
            "logit_scale": self.logit_scale,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigurationError(f"unknown model config key(s): {unknown}")
        return cls(**doc)


@dataclass(frozen=True)
class PrototypeBank:
    """One learned prototype vector per rating level."""

    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=np.float64)
        object.__setattr__(self, "z", z)
        if z.ndim != 2:
            raise ValueError(f"prototype bank must be L x D, got shape {z.shape}")
        norms = np.linalg.norm(z, axis=1)
        if np.any(norms < NORM_EPS):
            raise ValueError(f"prototype norms must be >= {NORM_EPS}, got {norms}")

    @property
    def num_levels(self) -> int:
        return self.z.shape[0]


@dataclass(frozen=True)
class AttentionMap:
    """Rectified model attention at feature resolution."""

    values: np.ndarray
    resolution: str = "feature"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 2:
            raise ValueError(f"attention map must be 2-D, got shape {values.shape}")
        if values.size and values.min() < 0:
            raise ValueError("attention map entries must be non-negative after rectification")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


# ---------------------------------------------------------------------------
# pure (array-in, array-out) operations


def rating_likelihood(features, bank, logit_scale: float = 1.0) -> np.ndarray:
    """Softmax over cosine similarities between a feature vector and the prototypes."""
    f = np.asarray(features, dtype=np.float64).ravel()
    z = bank.z if isinstance(bank, PrototypeBank) else PrototypeBank(np.asarray(bank)).z
    fn = np.linalg.norm(f)
    if fn < NORM_EPS:
        raise DegenerateFeatureError(f"feature norm {fn} below {NORM_EPS}")
    cos = (z @ f) / (np.linalg.norm(z, axis=1) * fn)
    logits = logit_scale * cos
    logits -= logits.max()
    e = np.exp(logits)
    return e / e.sum()


def predicted_mos(p, level_scores) -> float:
    """Expected score under the level likelihoods."""
    p = np.asarray(p, dtype=np.float64).ravel()
    scores = np.asarray(level_scores, dtype=np.float64).ravel()
    if p.shape != scores.shape:
        raise ValueError(f"p has {p.size} entries but {scores.size} level scores")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-4:
        raise ValueError(f"p is not a probability vector (sum {p.sum():.6f})")
    return float(np.dot(p, scores))


def gradcam(activations, gradients) -> AttentionMap:
    """Spatially pooled gradients weight the activation channels; rectify the sum.

    `gradients` is d(target)/d(activations) for whatever scalar target was
    backpropagated; the pooling constant is Z = h * w.
    """
    a = np.asarray(activations, dtype=np.float64)
    g = np.asarray(gradients, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError(f"activations must be K x h x w, got shape {a.shape}")
    if g.shape != a.shape:
        raise ValueError(f"gradient shape {g.shape} does not match activations {a.shape}")
    alpha = g.mean(axis=(1, 2))
    cam = np.einsum("k,khw->hw", alpha, a)
    return AttentionMap(np.maximum(cam, 0.0))


def corrected_attention(activations, p, per_level_gradients) -> AttentionMap:
    """Grad-CAM with the effective gradient = sum_l p_l * d p_l / d activations."""
    a = np.asarray(activations, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64).ravel()
    g = np.asarray(per_level_gradients, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-4:
        raise ValueError(f"likelihood vector not normalized (sum {p.sum():.6f})")
    if g.ndim != 4 or g.shape[0] != p.size:
        raise ValueError(
            f"per-level gradients must be L x K x h x w with L={p.size}, got shape {g.shape}"
        )
    if g.shape[1:] != a.shape:
        raise ValueError(f"gradient shape {g.shape[1:]} does not match activations {a.shape}")
    effective = np.einsum("l,lkhw->khw", p, g)
    return gradcam(a, effective)


# ---------------------------------------------------------------------------
# torch modules


class SmallBackbone(nn.Module):
    """Stack of conv3x3 + ReLU + maxpool blocks; desk-scale default."""

    def __init__(self, channels):
        super().__init__()
        convs = []
        previous = 3
        for ch in channels:
            convs.append(nn.Conv2d(previous, ch, kernel_size=3, padding=1))
            previous = ch
        self.convs = nn.ModuleList(convs)
        self.feature_dim = previous

    def forward(self, x):
        for conv in self.convs:
            x = torch.relu(conv(x))
            x = torch.max_pool2d(x, 2)
        return x


class ResNet50Backbone(nn.Module):
    """torchvision resnet50 trunk through layer4; weights optionally loaded from file."""

    def __init__(self, weights_path=None):
        super().__init__()
        try:
            from torchvision.models import resnet50
        except ImportError as exc:
            raise ConfigurationError("resnet50 backbone requires torchvision") from exc
        net = resnet50(weights=None)
        if weights_path is not None:
            state = torch.load(weights_path, map_location="cpu", weights_only=True)
            net.load_state_dict(state)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layer1 = net.layer1
        self.layer2 = net.layer2
        self.layer3 = net.layer3
        self.layer4 = net.layer4
        self.feature_dim = 2048

    def forward(self, x):
        x = self.stem(x)
        x = self.layer1(x)
        x = self.layer2(x)
        x = self.layer3(x)
        return self.layer4(x)


class DPAModel(nn.Module):
    """Backbone + prototype rating head with corrected-attention extraction."""

    def __init__(self, config: ModelConfig, resnet_weights=None):
        super().__init__()
        self.config = config
        torch.manual_seed(config.seed)
        if config.backbone == "small":
            self.backbone = SmallBackbone(config.channels)
        else:
            self.backbone = ResNet50Backbone(weights_path=resnet_weights)
        z = torch.randn(config.num_levels, self.backbone.feature_dim)
        z = z / z.norm(dim=1, keepdim=True).clamp_min(NORM_EPS)
        self.prototypes = nn.Parameter(z)
        self.register_buffer(
            "level_scores", torch.tensor(config.level_scores, dtype=torch.float32)
        )
        self._attention_shape = None

    @property
    def num_levels(self) -> int:
        return self.config.num_levels

    def attention_shape(self) -> tuple[int, int]:
        if self._attention_shape is None:
            with torch.no_grad():
                size = self.config.image_size
                a = self.backbone(torch.zeros(1, 3, size, size))
            self._attention_shape = (a.shape[2], a.shape[3])
        return self._attention_shape

    def activations(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def likelihood(self, features: torch.Tensor) -> torch.Tensor:
        f = features / features.norm(dim=-1, keepdim=True).clamp_min(NORM_EPS)
        z = self.prototypes / self.prototypes.norm(dim=1, keepdim=True).clamp_min(NORM_EPS)
        logits = self.config.logit_scale * (f @ z.t())
        return torch.softmax(logits, dim=-1)

    def head(self, activations: torch.Tensor):
        """Feature vector (global average pool), likelihoods, predicted MOS."""
        f = activations.mean(dim=(2, 3))
        p = self.likelihood(f)
        y_hat = p @ self.level_scores
        return f, p, y_hat

    def forward(self, x: torch.Tensor):
        a = self.activations(x)
        f, p, y_hat = self.head(a)
        return y_hat, p, a

    def corrected_attention_from(self, activations, p, second_order: bool = False):
        """Batched corrected attention maps (B, h, w).

        With second_order, the per-level gradients stay on the autograd graph
        so a loss on the map differentiates through the gradient computation;
        otherwise the pooled channel weights are detached constants and only
        the activations carry gradient.
        """
        grads = [
            torch.autograd.grad(
                p[:, level].sum(), activations,
                create_graph=second_order, retain_graph=True,
            )[0]
            for level in range(self.num_levels)
        ]
        effective = sum(
            p[:, level].reshape(-1, 1, 1, 1) * grads[level]
            for level in range(self.num_levels)
        )
        alpha = effective.mean(dim=(2, 3))
        if not second_order:
            alpha = alpha.detach()
        cam = (alpha.unsqueeze(-1).unsqueeze(-1) * activations).sum(dim=1)
        return torch.relu(cam)

    def prototype_bank(self) -> PrototypeBank:
        return PrototypeBank(self.prototypes.detach().cpu().numpy().astype(np.float64))


def preprocess(images) -> torch.Tensor:
    """H x W x C [0, 1] arrays (or a stack of them) to normalized NCHW float tensors."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[-1] != 3:
        raise ValueError(f"expected (N,)H x W x 3 images, got shape {arr.shape}")
    arr = (arr - IMAGE_MEAN) / IMAGE_STD
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def assess(model: DPAModel, image):
    """One-pass assessment of a single image: (predicted MOS, likelihoods, attention)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ConfigurationError(f"expected H x W x 3 image, got shape {image.shape}")
    size = model.config.image_size
    if image.shape[:2] != (size, size):
        raise ConfigurationError(
            f"image spatial size {image.shape[:2]} incompatible with configured {size}x{size}"
        )
    model.eval()
    x = preprocess(image)
    with torch.enable_grad():
        a = model.activations(x)
        _, p, y_hat = model.head(a)
        cam = model.corrected_attention_from(a, p, second_order=False)
    p_np = p.detach().cpu().numpy()[0].astype(np.float64)
    attention = AttentionMap(cam.detach().cpu().numpy()[0].astype(np.float64))
    return float(y_hat.detach().item()), p_np, attention


def batch_forward(model: DPAModel, images, batch_size: int = 32, want_attention: bool = True):
    """Predictions, likelihoods and (optionally) attention maps over an image stack."""
    model.eval()
    preds, probs, cams = [], [], []
    x_all = images if isinstance(images, torch.Tensor) else preprocess(images)
    for start in range(0, x_all.shape[0], batch_size):
        xb = x_all[start : start + batch_size]
        if want_attention:
            with torch.enable_grad():
                a = model.activations(xb)
                _, p, y_hat = model.head(a)
                cam = model.corrected_attention_from(a, p, second_order=False)
            cams.append(cam.detach().cpu().numpy())
            preds.append(y_hat.detach().cpu().numpy())
            probs.append(p.detach().cpu().numpy())
        else:
            with torch.no_grad():
                y_hat, p, _ = model(xb)
                preds.append(y_hat.cpu().numpy())
                probs.append(p.cpu().numpy())
    preds = np.concatenate(preds) if preds else np.zeros(0)
    probs = np.concatenate(probs) if probs else np.zeros((0, model.num_levels))
    attn = np.concatenate(cams) if cams else None
    return preds, probs, attn


# ---------------------------------------------------------------------------
# checkpoints: directory with weights.npz + meta.json (+ optimizer.npz/json)

WEIGHTS_FILE = "weights.npz"
META_FILE = "meta.json"
OPTIMIZER_ARRAYS = "optimizer.npz"
OPTIMIZER_META = "optimizer.json"


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _atomic_savez(path: Path, arrays: dict) -> None:
    import io

    buf = io.BytesIO()
    np.savez(buf, **arrays)
    _atomic_write_bytes(path, buf.getvalue())


def save_checkpoint(ckpt_dir, model: DPAModel, meta: dict, optimizer=None) -> Path:
    """Write weights (portable named-tensor npz) plus meta.json; optionally Adam state."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    _atomic_savez(ckpt_dir / WEIGHTS_FILE, arrays)
    doc = {"model": model.config.to_dict(), **meta}
    _atomic_write_bytes(
        ckpt_dir / META_FILE, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode()
    )
    if optimizer is not None:
        state = optimizer.state_dict()
        opt_arrays = {}
        steps = {}
        for idx, entry in state["state"].items():
            for key, value in entry.items():
                if isinstance(value, torch.Tensor) and value.ndim > 0:
                    opt_arrays[f"{idx}.{key}"] = value.detach().cpu().numpy()
                else:
                    steps.setdefault(str(idx), {})[key] = (
                        float(value.item()) if isinstance(value, torch.Tensor) else value
                    )
        _atomic_savez(ckpt_dir / OPTIMIZER_ARRAYS, opt_arrays)
        opt_meta = {"param_groups": state["param_groups"], "scalars": steps}
        _atomic_write_bytes(
            ckpt_dir / OPTIMIZER_META,
            (json.dumps(opt_meta, indent=2, sort_keys=True) + "\n").encode(),
        )
    return ckpt_dir


def load_checkpoint(ckpt_dir):
    """Rebuild the model from meta.json + weights.npz, validating shape agreement."""
    ckpt_dir = Path(ckpt_dir)
    meta_path = ckpt_dir / META_FILE
    if not meta_path.exists():
        raise FileNotFoundError(f"no checkpoint meta at {meta_path}")
    meta = json.loads(meta_path.read_text())
    config = ModelConfig.from_dict(meta["model"])
    model = DPAModel(config)
    with np.load(ckpt_dir / WEIGHTS_FILE) as npz:
        saved = {k: npz[k] for k in npz.files}
    expected = model.state_dict()
    problems = []
    for key, tensor in expected.items():
        if key not in saved:
            problems.append(f"missing tensor {key}")
        elif tuple(saved[key].shape) != tuple(tensor.shape):
            problems.append(
                f"{key}: checkpoint shape {tuple(saved[key].shape)} vs model {tuple(tensor.shape)}"
            )
    for key in saved:
        if key not in expected:
            problems.append(f"unexpected tensor {key}")
    if problems:
        raise IncompatibleCheckpointError("; ".join(problems))
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in saved.items()})
    return model, meta


def load_optimizer_state(ckpt_dir, optimizer) -> bool:
    """Restore Adam state saved next to the weights. Returns False when absent."""
    ckpt_dir = Path(ckpt_dir)
    arrays_path = ckpt_dir / OPTIMIZER_ARRAYS
    meta_path = ckpt_dir / OPTIMIZER_META
    if not arrays_path.exists() or not meta_path.exists():
        return False
    opt_meta = json.loads(meta_path.read_text())
    with np.load(arrays_path) as npz:
        arrays = {k: npz[k] for k in npz.files}
    state: dict = {}
    for key, value in arrays.items():
        idx_str, field_name = key.split(".", 1)
        state.setdefault(int(idx_str), {})[field_name] = torch.from_numpy(value.copy())
    for idx_str, scalars in opt_meta["scalars"].items():
        for field_name, value in scalars.items():
            state.setdefault(int(idx_str), {})[field_name] = torch.tensor(value)
    optimizer.load_state_dict({"state": state, "param_groups": opt_meta["param_groups"]})
    return True


def config_differences(saved: ModelConfig, requested: ModelConfig) -> list:
    """Architecture-relevant fields that differ (seed excluded)."""
    deltas = []
    for name in ("backbone", "channels", "image_size", "num_levels", "level_scores", "logit_scale"):
        a, b = getattr(saved, name), getattr(requested, name)
        if a != b:
            deltas.append(f"{name}: checkpoint {a!r} vs config {b!r}")
    return deltas
