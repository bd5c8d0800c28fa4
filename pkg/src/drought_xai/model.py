"""Transfer-learning classifier: backbone -> global average pooling -> dense head -> sigmoid."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .backbones import build_backbone
from .errors import ShapeMismatch, WeightsUnavailable

BACKBONE_DEFAULTS: dict[str, tuple[tuple[int, int], int]] = {
    "efficientnet_b0": ((224, 224), 1280),
    "mobilenet": ((224, 224), 1024),
    "densenet121": ((224, 224), 1024),
    "nasnet_mobile": ((299, 299), 1056),
    "toy_cnn": ((64, 64), 8),
}

# Trainable parameter counts reported for the four full models (backbone + head).
REPORTED_TRAINABLE = {
    "efficientnet_b0": 4.18e6,
    "mobilenet": 3.35e6,
    "densenet121": 7.09e6,
    "nasnet_mobile": 4.37e6,
}


@dataclass(frozen=True)
class BackboneSpec:
    name: str = "densenet121"
    input_size: tuple[int, int] = (224, 224)
    feature_dim: int = 1024
    weights: str = "pretrained_imagenet"
    trainable: bool = True
    weights_path: str | None = None

    def __post_init__(self):
        if self.name not in BACKBONE_DEFAULTS:
            raise ValueError(f"unknown backbone {self.name!r}; choose from {sorted(BACKBONE_DEFAULTS)}")
        if self.weights not in ("pretrained_imagenet", "random"):
            raise ValueError(f"weights must be 'pretrained_imagenet' or 'random', not {self.weights!r}")
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        size, dim = BACKBONE_DEFAULTS[self.name]
        if self.name != "toy_cnn":
            if self.input_size != size:
                raise ValueError(f"{self.name} expects input {size}, got {self.input_size}")
            if self.feature_dim != dim:
                raise ValueError(f"{self.name} produces {dim} features, got feature_dim={self.feature_dim}")
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")

    @classmethod
    def for_name(cls, name: str, **overrides) -> BackboneSpec:
        if name not in BACKBONE_DEFAULTS:
            raise ValueError(f"unknown backbone {name!r}; choose from {sorted(BACKBONE_DEFAULTS)}")
        size, dim = BACKBONE_DEFAULTS[name]
        defaults = {"input_size": size, "feature_dim": dim}
        if name == "toy_cnn":
            defaults["weights"] = "random"
        defaults.update(overrides)
        return cls(name=name, **defaults)


@dataclass(frozen=True)
class HeadConfig:
    dense_widths: tuple[int, ...] = (128, 64)
    dropout_rate: float = 0.5
    l2_weight: float = 0.01
    activation: str = "relu"
    output_units: int = 1
    output_activation: str = "sigmoid"

    def __post_init__(self):
        object.__setattr__(self, "dense_widths", tuple(int(w) for w in self.dense_widths))
        if any(w <= 0 for w in self.dense_widths):
            raise ValueError("dense widths must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.l2_weight < 0:
            raise ValueError("l2_weight must be non-negative")
        if (self.activation, self.output_units, self.output_activation) != ("relu", 1, "sigmoid"):
            raise ValueError("only a relu head with one sigmoid output is supported")


def head_param_count(feature_dim: int, widths=(128, 64)) -> int:
    """Closed form: sum over dense layers of fan_in * fan_out + fan_out, ending in one unit."""
    total, fan_in = 0, feature_dim
    for width in (*widths, 1):
        total += fan_in * width + width
        fan_in = width
    return total


class DenseHead(nn.Module):
    def __init__(self, feature_dim: int, config: HeadConfig):
        super().__init__()
        self.config = config
        widths = (feature_dim, *config.dense_widths)
        self.dense = nn.ModuleList(nn.Linear(a, b) for a, b in zip(widths[:-1], widths[1:]))
        self.dropout = nn.Dropout(config.dropout_rate)
        self.output = nn.Linear(widths[-1], 1)

    def forward(self, pooled):
        x = pooled
        for layer in self.dense:
            x = self.dropout(torch.relu(layer(x)))
        return self.output(x).squeeze(-1)

    def l2_penalty(self):
        """l2_weight * sum of squared hidden dense kernels (biases and output layer excluded)."""
        return self.config.l2_weight * sum((layer.weight ** 2).sum() for layer in self.dense)


class ClassifierModel(nn.Module):
    """Backbone feature map -> spatial mean per channel -> dense head -> probability of 'stressed'."""

    def __init__(self, backbone_spec: BackboneSpec, head_config: HeadConfig, backbone: nn.Module):
        super().__init__()
        self.backbone_spec = backbone_spec
        self.head_config = head_config
        self.backbone = backbone
        self.head = DenseHead(backbone_spec.feature_dim, head_config)

    def feature_map(self, x):
        features = self.backbone(x)
        if features.dim() != 4:
            raise ShapeMismatch(f"backbone returned shape {tuple(features.shape)}, expected N x C x H x W")
        if features.shape[1] != self.backbone_spec.feature_dim:
            raise ShapeMismatch(f"backbone gave {features.shape[1]} channels, head expects "
                                f"{self.backbone_spec.feature_dim}")
        return features

    def logits_from_features(self, features):
        return self.head(global_average_pool(features))

    def forward(self, x):
        return torch.sigmoid(self.logits_from_features(self.feature_map(x)))

    def l2_penalty(self):
        return self.head.l2_penalty()

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype


def global_average_pool(features):
    return features.mean(dim=(2, 3))


def build_classifier(backbone: BackboneSpec, head: HeadConfig | None = None,
                     seed: int | None = None) -> ClassifierModel:
    head = head or HeadConfig()
    with torch.random.fork_rng(devices=[]):
        if seed is not None:
            torch.manual_seed(seed)
        features = build_backbone(backbone.name, backbone.feature_dim,
                                  pretrained=backbone.weights == "pretrained_imagenet",
                                  weights_path=backbone.weights_path)
        model = ClassifierModel(backbone, head, features)
    for p in model.backbone.parameters():
        p.requires_grad_(backbone.trainable)
    return model.eval()


def trainable_param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def to_tensor(batch, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """NHWC numpy (or a single HWC image) -> NCHW tensor; tensors pass through unchanged."""
    if isinstance(batch, torch.Tensor):
        return batch.to(dtype)
    array = np.asarray(batch)
    if array.ndim == 3:
        array = array[None]
    return torch.as_tensor(array, dtype=dtype).permute(0, 3, 1, 2).contiguous()


def forward(model: ClassifierModel, batch, mode: str = "eval", seed: int | None = None) -> np.ndarray:
    """Probabilities for an NHWC batch. ``mode='train'`` keeps dropout on; ``seed`` fixes its masks."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
    x = to_tensor(batch, model.dtype)
    expected = model.backbone_spec.input_size
    if x.dim() != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != expected:
        raise ShapeMismatch(f"batch shape {tuple(x.shape)} does not match N x 3 x {expected[0]} x {expected[1]}")
    was_training = model.training
    model.train(mode == "train")
    try:
        with torch.no_grad(), torch.random.fork_rng(devices=[]):
            if seed is not None:
                torch.manual_seed(seed)
            return model(x).cpu().numpy()
    finally:
        model.train(was_training)


# --------------------------------------------------------------------------
# checkpoints: one .npz per model, tensors stored under their state-dict names

META_KEY = "__meta__"


def save_weights(model: ClassifierModel, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {name: t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    meta = {"backbone": asdict(model.backbone_spec), "head": asdict(model.head_config)}
    arrays[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint_meta(path: str | Path) -> tuple[BackboneSpec, HeadConfig]:
    with np.load(path) as archive:
        meta = json.loads(archive[META_KEY].tobytes().decode())
    return BackboneSpec(**meta["backbone"]), HeadConfig(**meta["head"])


def load_weights(model: ClassifierModel, path: str | Path) -> ClassifierModel:
    """Load an archive into ``model``, adopting the archive's floating dtype."""
    with np.load(path) as archive:
        state = {k: torch.from_numpy(archive[k].copy()) for k in archive.files if k != META_KEY}
    dtypes = {t.dtype for t in state.values() if t.is_floating_point()}
    if len(dtypes) == 1:
        model.to(dtypes.pop())
    model.load_state_dict(state)
    return model


def load_model(path: str | Path) -> ClassifierModel:
    """Rebuild the architecture recorded in a checkpoint and load its weights (eval mode)."""
    try:
        backbone, head = read_checkpoint_meta(path)
    except (OSError, KeyError, ValueError) as exc:
        raise WeightsUnavailable(f"unreadable checkpoint {path}: {exc}") from exc
    model = build_classifier(replace(backbone, weights="random", weights_path=None), head)
    return load_weights(model, path).eval()


@dataclass
class ModelSummary:
    backbone: str
    feature_dim: int
    head_params: int
    trainable_params: int
    total_params: int
    layers: list[str] = field(default_factory=list)


def summarize(model: ClassifierModel) -> ModelSummary:
    return ModelSummary(
        backbone=model.backbone_spec.name,
        feature_dim=model.backbone_spec.feature_dim,
        head_params=sum(p.numel() for p in model.head.parameters()),
        trainable_params=trainable_param_count(model),
        total_params=sum(p.numel() for p in model.parameters()),
        layers=[name for name, _ in model.head.named_parameters()],
    )
