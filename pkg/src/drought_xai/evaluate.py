"""Predictions, confusion-matrix metrics, and comparison against published detector baselines.

Stressed is the positive class. Metrics whose denominator is zero are
reported as ``None`` and printed as ``undefined``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import torch

from .errors import EmptyMatrix, EmptyReport
from .ingest import HEALTHY, LABELS, STRESSED
from .model import ClassifierModel, to_tensor

UNDEFINED = "undefined"


class Prediction(NamedTuple):
    true: str
    predicted: str
    probability: float


def _check_threshold(threshold: float) -> None:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")


def label_for(probability: float, threshold: float = 0.5) -> str:
    return STRESSED if probability >= threshold else HEALTHY


def predictions_from_scores(probabilities: Iterable[float], true_labels: Iterable[str],
                            threshold: float = 0.5) -> list[Prediction]:
    _check_threshold(threshold)
    return [Prediction(t, label_for(float(p), threshold), float(p))
            for p, t in zip(probabilities, true_labels, strict=True)]


@torch.no_grad()
def predict_labels(model: ClassifierModel, stream, threshold: float = 0.5) -> list[Prediction]:
    """Run ``model`` in eval mode over a (non-augmented) batch stream."""
    _check_threshold(threshold)
    model.eval()
    out = []
    for images, labels in stream:
        probs = model(to_tensor(images, model.dtype)).cpu().numpy()
        truth = [STRESSED if v >= 0.5 else HEALTHY for v in labels]
        out.extend(predictions_from_scores(probs, truth, threshold))
    return out


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def errors(self) -> int:
        return self.fp + self.fn


def confusion(pairs: Iterable[Sequence]) -> ConfusionMatrix:
    """Cross-tabulate (true, predicted, ...) label pairs."""
    counts = {key: 0 for key in ("tp", "fp", "fn", "tn")}
    for true, predicted, *_ in pairs:
        if true not in LABELS or predicted not in LABELS:
            raise ValueError(f"non-binary label pair ({true!r}, {predicted!r})")
        if predicted == STRESSED:
            counts["tp" if true == STRESSED else "fp"] += 1
        else:
            counts["fn" if true == STRESSED else "tn"] += 1
    return ConfusionMatrix(**counts)


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


@dataclass(frozen=True)
class EvalReport:
    confusion: ConfusionMatrix
    accuracy: float
    precision_stressed: float | None
    recall_stressed: float | None
    precision_healthy: float | None
    recall_healthy: float | None
    n: int

    @property
    def misclassification_rate(self) -> float:
        return self.confusion.errors / self.n

    def to_text(self) -> str:
        cm = self.confusion
        rows = [
            ("n", self.n), ("tp", cm.tp), ("fp", cm.fp), ("fn", cm.fn), ("tn", cm.tn),
            ("accuracy", self.accuracy), ("misclassification_rate", self.misclassification_rate),
            ("precision_stressed", self.precision_stressed), ("recall_stressed", self.recall_stressed),
            ("precision_healthy", self.precision_healthy), ("recall_healthy", self.recall_healthy),
        ]
        return "".join(f"{key}\t{_fmt(value)}\n" for key, value in rows)

    def confusion_table(self) -> str:
        cm = self.confusion
        return (f"actual\\predicted\t{HEALTHY}\t{STRESSED}\n"
                f"{HEALTHY}\t{cm.tn}\t{cm.fp}\n"
                f"{STRESSED}\t{cm.fn}\t{cm.tp}\n")


def _fmt(value) -> str:
    if value is None:
        return UNDEFINED
    if isinstance(value, int):
        return str(value)
    return f"{value:.6f}"


def metrics(cm: ConfusionMatrix) -> EvalReport:
    if cm.n == 0:
        raise EmptyMatrix("confusion matrix has no entries")
    return EvalReport(
        confusion=cm,
        accuracy=(cm.tp + cm.tn) / cm.n,
        precision_stressed=_ratio(cm.tp, cm.tp + cm.fp),
        recall_stressed=_ratio(cm.tp, cm.tp + cm.fn),
        precision_healthy=_ratio(cm.tn, cm.tn + cm.fn),
        recall_healthy=_ratio(cm.tn, cm.tn + cm.fp),
        n=cm.n,
    )


def parse_report(text: str) -> EvalReport:
    values = dict(line.split("\t", 1) for line in text.splitlines() if line.strip())
    cm = ConfusionMatrix(*(int(values[k]) for k in ("tp", "fp", "fn", "tn")))
    return metrics(cm)


# --------------------------------------------------------------------------
# predictions log (lets `evaluate` run from stored scores without a model)

PREDICTION_COLUMNS = ("true", "predicted", "probability")


def write_predictions(predictions: Sequence[Prediction], path: str | Path) -> Path:
    path = Path(path)
    lines = ["\t".join(PREDICTION_COLUMNS)]
    lines += [f"{p.true}\t{p.predicted}\t{p.probability!r}" for p in predictions]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_predictions(path: str | Path, threshold: float | None = None) -> list[Prediction]:
    """Load a predictions log; with ``threshold`` the predicted labels are recomputed from scores."""
    rows = Path(path).read_text().splitlines()
    out = []
    for row in rows[1:]:
        if not row.strip():
            continue
        true, predicted, prob = row.split("\t")
        p = float(prob)
        if threshold is not None:
            predicted = label_for(p, threshold)
        out.append(Prediction(true, predicted, p))
    return out


# --------------------------------------------------------------------------
# baseline comparison


class BaselineRow(NamedTuple):
    model: str
    precision_stressed: float | None
    recall_stressed: float | None
    precision_healthy: float | None
    recall_healthy: float | None


# Published precision/recall of five detectors on the same RGB data (transcribed, not recomputed).
REFERENCE_BASELINES: tuple[BaselineRow, ...] = (
    BaselineRow("Retina-Unet-Ag", 0.702, 0.841, 0.659, 0.832),
    BaselineRow("Mask R-CNN", 0.700, 0.809, 0.644, 0.769),
    BaselineRow("RetinaNet", 0.698, 0.795, 0.578, 0.899),
    BaselineRow("Faster R-CNN", 0.781, 0.654, 0.630, 0.891),
    BaselineRow("Yolo v3", 0.407, 0.882, 0.541, 0.855),
)

COMPARISON_COLUMNS = ("model", "precision_stressed", "recall_stressed", "precision_healthy", "recall_healthy")


@dataclass(frozen=True)
class BaselineTable:
    rows: tuple[BaselineRow, ...]

    def best(self, column: str) -> BaselineRow:
        return max((r for r in self.rows if getattr(r, column) is not None), key=lambda r: getattr(r, column))

    def to_text(self) -> str:
        lines = ["\t".join(COMPARISON_COLUMNS)]
        for row in self.rows:
            lines.append("\t".join([row.model] + [_table_value(v) for v in row[1:]]))
        return "\n".join(lines) + "\n"


def _table_value(value: float | None) -> str:
    return UNDEFINED if value is None else f"{value:.3f}"


def read_comparison(path: str | Path) -> BaselineTable:
    rows = []
    for line in Path(path).read_text().splitlines()[1:]:
        if line.strip():
            name, *values = line.split("\t")
            rows.append(BaselineRow(name, *(None if v == UNDEFINED else float(v) for v in values)))
    return BaselineTable(tuple(rows))


def compare_against_baselines(report: EvalReport | None, out_dir: str | Path | None = None,
                              name: str = "Proposed pipeline") -> BaselineTable:
    """Join ``report`` with the reference detectors; optionally write the table and bar charts."""
    if report is None or report.n == 0:
        raise EmptyReport("cannot compare an empty report")
    ours = BaselineRow(name, report.precision_stressed, report.recall_stressed,
                       report.precision_healthy, report.recall_healthy)
    table = BaselineTable(REFERENCE_BASELINES + (ours,))
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "comparison.tsv").write_text(table.to_text())
        plot_comparison(table, out_dir)
    return table


def plot_comparison(table: BaselineTable, out_dir: Path) -> list[Path]:
    """One grouped precision/recall bar chart per class: ``comparison_stressed.png``, ``comparison_healthy.png``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    x = np.arange(len(table.rows))
    for label in (STRESSED, HEALTHY):
        precision = [np.nan if (v := getattr(r, f"precision_{label}")) is None else v for r in table.rows]
        recall = [np.nan if (v := getattr(r, f"recall_{label}")) is None else v for r in table.rows]
        fig, ax = plt.subplots(figsize=(8, 4))
        ax.bar(x - 0.2, precision, width=0.4, label="Precision")
        ax.bar(x + 0.2, recall, width=0.4, label="Recall")
        ax.set_xticks(x, [r.model for r in table.rows], rotation=20, ha="right")
        ax.set_ylim(0, 1)
        ax.set_title(label.capitalize())
        ax.legend()
        fig.tight_layout()
        path = out_dir / f"comparison_{label}.png"
        fig.savefig(path, dpi=100, metadata={"Software": None})
        plt.close(fig)
        paths.append(path)
    return paths
