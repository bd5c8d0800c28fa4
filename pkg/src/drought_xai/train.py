"""Optimization loop: Adam, staircase exponential lr decay, clipped BCE, best-val-loss checkpoints."""

from __future__ import annotations

import logging
import math
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .augment import AugmentationPolicy, BatchSpec, BatchStream
from .errors import DivergenceDetected, LengthMismatch
from .ingest import DatasetManifest
from .model import ClassifierModel, load_weights, save_weights, to_tensor

logger = logging.getLogger(__name__)

BCE_EPSILON = 1e-7
ADAM_BETAS = (0.9, 0.999)
ADAM_EPSILON = 1e-8


@dataclass(frozen=True)
class TrainingConfig:
    initial_lr: float = 0.001
    decay_rate: float = 0.9
    decay_every_epochs: int = 2
    staircase: bool = True
    epochs: int = 60
    batch_size: int = 128
    loss: str = "binary_cross_entropy"
    optimizer: str = "adam"
    seed: int = 42

    def __post_init__(self):
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must lie in (0, 1]")
        if self.decay_every_epochs < 1:
            raise ValueError("decay_every_epochs must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.loss != "binary_cross_entropy" or self.optimizer != "adam":
            raise ValueError("only binary_cross_entropy with adam is supported")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainingHistory:
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def best_epoch(self) -> int:
        """Index of the first minimum of val_loss (-1 when empty)."""
        best, best_loss = -1, math.inf
        for r in self.records:
            if r.val_loss < best_loss:
                best, best_loss = r.epoch, r.val_loss
        return best

    @property
    def best_val_loss(self) -> float:
        return min((r.val_loss for r in self.records), default=math.inf)


class CheckpointStore:
    """Keeps a weight archive for each epoch that strictly lowers the running minimum val_loss."""

    BEST_NAME = "best.npz"

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.saved: dict[int, Path] = {}
        self.best_val_loss = math.inf
        self.best_epoch = -1

    def offer(self, epoch: int, val_loss: float, model: ClassifierModel) -> bool:
        if not val_loss < self.best_val_loss:
            return False
        path = save_weights(model, self.directory / f"epoch_{epoch:03d}.npz")
        shutil.copyfile(path, self.directory / self.BEST_NAME)
        self.saved[epoch] = path
        self.best_val_loss, self.best_epoch = val_loss, epoch
        return True

    @property
    def best_path(self) -> Path:
        return self.directory / self.BEST_NAME

    def restore_best(self, model: ClassifierModel) -> ClassifierModel:
        if self.best_epoch < 0:
            raise FileNotFoundError("no checkpoint has been saved")
        return load_weights(model, self.saved[self.best_epoch])


def lr_at_epoch(config: TrainingConfig, epoch: int) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    steps = epoch / config.decay_every_epochs
    if config.staircase:
        steps = epoch // config.decay_every_epochs
    return config.initial_lr * config.decay_rate ** steps


def binary_cross_entropy(p, y):
    """Mean of -[y ln p + (1 - y) ln(1 - p)] with p clipped to [1e-7, 1 - 1e-7].

    Works on torch tensors (differentiable) and on array-likes (returns a float).
    """
    if not isinstance(p, torch.Tensor):
        p_arr, y_arr = np.asarray(p, dtype=np.float64), np.asarray(y, dtype=np.float64)
        if p_arr.shape != y_arr.shape:
            raise LengthMismatch(f"{p_arr.shape} predictions vs {y_arr.shape} labels")
        return float(binary_cross_entropy(torch.from_numpy(p_arr), torch.from_numpy(y_arr)))
    if p.shape != y.shape:
        raise LengthMismatch(f"{tuple(p.shape)} predictions vs {tuple(y.shape)} labels")
    p = p.clamp(BCE_EPSILON, 1 - BCE_EPSILON)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean()


def training_objective(model: ClassifierModel, x, y):
    """Data loss plus the head's L2 penalty: the quantity gradient steps minimise."""
    return binary_cross_entropy(model(x), y) + model.l2_penalty()


@torch.no_grad()
def evaluate_stream(model: ClassifierModel, stream) -> tuple[float, float]:
    """Mean BCE and accuracy (threshold 0.5) over every item of ``stream``, eval mode."""
    model.eval()
    total_loss, correct, n = 0.0, 0, 0
    for images, labels in stream:
        y = torch.from_numpy(labels).to(model.dtype)
        p = model(to_tensor(images, model.dtype))
        total_loss += float(binary_cross_entropy(p, y)) * len(y)
        correct += int(((p >= 0.5).to(y.dtype) == y).sum())
        n += len(y)
    if n == 0:
        return math.nan, math.nan
    return total_loss / n, correct / n


Evaluator = Callable[[ClassifierModel, int], tuple[float, float]]


def run_training(
    model: ClassifierModel,
    manifest: DatasetManifest,
    policy: AugmentationPolicy | None,
    config: TrainingConfig,
    store_dir: str | Path,
    batch_spec: BatchSpec | None = None,
    evaluator: Evaluator | None = None,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[TrainingHistory, CheckpointStore]:
    """Train for ``config.epochs`` epochs and return with the best-val-loss weights loaded.

    ``evaluator(model, epoch) -> (val_loss, val_acc)`` replaces the default
    validation pass; it exists so checkpoint selection can be driven by
    scripted loss traces.
    """
    if not manifest.train or not manifest.val:
        raise ValueError("manifest needs non-empty train and val partitions")
    spec = batch_spec or BatchSpec(target_size=model.backbone_spec.input_size, batch_size=config.batch_size)
    eval_spec = BatchSpec(spec.target_size, spec.batch_size, spec.class_mode, shuffle=False)
    rescale = policy.rescale if policy is not None else 1.0 / 255.0
    train_cache: dict = {}
    val_cache: dict = {}

    if evaluator is None:
        def evaluator(m, epoch):
            return evaluate_stream(m, BatchStream(manifest.val, None, eval_spec, rescale=rescale, cache=val_cache))

    torch.manual_seed(config.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=config.initial_lr, betas=ADAM_BETAS, eps=ADAM_EPSILON)
    history = TrainingHistory()
    store = CheckpointStore(store_dir)

    for epoch in range(config.epochs):
        lr = lr_at_epoch(config, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        model.train()
        stream = BatchStream(manifest.train, policy, spec, seed=config.seed, epoch=epoch,
                             rescale=rescale, cache=train_cache)
        loss_sum, correct, seen = 0.0, 0, 0
        for images, labels in stream:
            x = to_tensor(images, model.dtype)
            y = torch.from_numpy(labels).to(model.dtype)
            optimizer.zero_grad()
            p = model(x)
            data_loss = binary_cross_entropy(p, y)
            (data_loss + model.l2_penalty()).backward()
            optimizer.step()
            loss_sum += float(data_loss.detach()) * len(y)
            correct += int(((p.detach() >= 0.5).to(y.dtype) == y).sum())
            seen += len(y)

        val_loss, val_acc = evaluator(model, epoch)
        record = EpochRecord(epoch, lr, loss_sum / max(seen, 1), correct / max(seen, 1),
                             float(val_loss), float(val_acc))
        history.records.append(record)
        logger.info("epoch %d lr=%.6g loss=%.4f acc=%.4f val_loss=%.4f val_acc=%.4f",
                    epoch, lr, record.train_loss, record.train_acc, record.val_loss, record.val_acc)
        if on_epoch is not None:
            on_epoch(record)
        if not math.isfinite(record.val_loss):
            raise DivergenceDetected(f"val_loss became {record.val_loss} at epoch {epoch}", history)
        store.offer(epoch, record.val_loss, model)

    store.restore_best(model)
    model.eval()
    return history, store


# --------------------------------------------------------------------------
# history table and learning curves

HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "train_acc", "val_loss", "val_acc")


def write_history(history: TrainingHistory, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(HISTORY_COLUMNS)]
    for r in history.records:
        lines.append("\t".join([str(r.epoch)] + [repr(float(getattr(r, c))) for c in HISTORY_COLUMNS[1:]]))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_history(path: str | Path) -> TrainingHistory:
    rows = Path(path).read_text().splitlines()
    if not rows or tuple(rows[0].split("\t")) != HISTORY_COLUMNS:
        raise ValueError(f"{path}: not a history table")
    records = []
    for row in rows[1:]:
        if not row.strip():
            continue
        epoch, *values = row.split("\t")
        records.append(EpochRecord(int(epoch), *(float(v) for v in values)))
    return TrainingHistory(records)


def learning_curves(history: TrainingHistory, out: str | Path) -> list[Path]:
    """Write ``loss.png``, ``accuracy.png`` and ``history.tsv`` into ``out``."""
    if not history.records:
        raise ValueError("empty history")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    epochs = [r.epoch + 1 for r in history.records]
    written = []
    for name, keys, ylabel in (("loss", ("train_loss", "val_loss"), "Loss"),
                               ("accuracy", ("train_acc", "val_acc"), "Accuracy")):
        fig, ax = plt.subplots(figsize=(6, 4))
        for key, title in zip(keys, ("Training", "Validation")):
            ax.plot(epochs, [getattr(r, key) for r in history.records], marker="o", label=title)
        ax.set_xlabel("Epoch")
        ax.set_ylabel(ylabel)
        ax.legend()
        fig.tight_layout()
        path = out / f"{name}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        written.append(path)
    written.append(write_history(history, out / "history.tsv"))
    return written


def smoothed(values: Sequence[float], window: int = 2) -> list[float]:
    """Trailing moving average, used to judge the trend of noisy loss curves."""
    out = []
    for i in range(len(values)):
        chunk = values[max(0, i - window + 1):i + 1]
        out.append(sum(chunk) / len(chunk))
    return out

