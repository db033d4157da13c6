"""Accuracy metrics, confusion matrices, and experiment reports.

Works over prediction records: dicts carrying true labels and the
per-stream output PDFs (``t_out``, ``f_out``, ``i_out``).  The scene and
fused streams are scored on the 7-class task; the ego-motion stream is
scored on its native 3-class task.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import top1

# method -> (true-label key, pdf key, class count)
METHOD_SPECS: dict[str, tuple[str, str, int]] = {
    "tnet": ("true_topology", "t_out", 7),
    "fnet": ("true_motion", "f_out", 3),
    "fused": ("true_topology", "i_out", 7),
}


def _as_pair(record, num_classes: int) -> tuple[int, int]:
    true, pred = record
    pred_id = int(pred) if np.isscalar(pred) else top1(pred)
    true = int(true)
    if not 1 <= true <= num_classes or not 1 <= pred_id <= num_classes:
        raise ValueError(
            f"labels must be in [1, {num_classes}], got true={true}, pred={pred_id}"
        )
    return true, pred_id


def top1_accuracy(records, num_classes: int = 7) -> float:
    """Fraction of (true, pred) records whose top-1 prediction is correct.

    ``pred`` may be a class id or a probability vector.  Errors on empty
    input.
    """
    pairs = [_as_pair(r, num_classes) for r in records]
    if not pairs:
        raise ValueError("cannot score an empty record list")
    return sum(1 for t, p in pairs if t == p) / len(pairs)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Integer count grid; rows are true classes, columns predictions."""

    counts: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.counts, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {arr.shape}")
        if (arr < 0).any():
            raise ValueError("confusion counts must be non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "counts", arr)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accuracy(self) -> float:
        if self.total == 0:
            raise ValueError("empty confusion matrix has no accuracy")
        return float(np.trace(self.counts)) / self.total

    def per_class_recall(self) -> np.ndarray:
        """Row-normalized diagonal; NaN for classes with no true samples."""
        row_sums = self.counts.sum(axis=1).astype(np.float64)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(
                row_sums > 0, np.diagonal(self.counts) / row_sums, np.nan
            )

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion(records, num_classes: int = 7) -> ConfusionMatrix:
    """Tally (true, pred) records into a confusion matrix."""
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    for r in records:
        t, p = _as_pair(r, num_classes)
        counts[t - 1, p - 1] += 1
    return ConfusionMatrix(counts)


def method_pairs(prediction_records, method: str) -> list[tuple[int, int]]:
    """Extract (true, top1-pred) pairs for one method from record dicts."""
    if method not in METHOD_SPECS:
        raise ValueError(f"unknown method {method!r}; expected one of {sorted(METHOD_SPECS)}")
    true_key, pdf_key, _ = METHOD_SPECS[method]
    return [
        (int(rec[true_key]), top1(np.asarray(rec[pdf_key], dtype=np.float64)))
        for rec in prediction_records
    ]


@dataclass(frozen=True)
class MethodAggregate:
    """Per-fold and pooled scores for one method across an experiment."""

    method: str
    fold_accuracies: tuple[float, ...]
    fold_confusions: tuple[ConfusionMatrix, ...]

    def __post_init__(self) -> None:
        if len(self.fold_accuracies) != len(self.fold_confusions):
            raise ValueError("one confusion matrix per fold accuracy required")
        if not self.fold_accuracies:
            raise ValueError("aggregate needs at least one fold")

    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))

    def pooled_confusion(self) -> ConfusionMatrix:
        pooled = self.fold_confusions[0]
        for cm in self.fold_confusions[1:]:
            pooled = pooled + cm
        return pooled


def aggregate_methods(
    records_per_fold: dict[int, list[dict]],
    methods=("tnet", "fnet", "fused"),
) -> dict[str, MethodAggregate]:
    """Score each method on each fold's prediction records."""
    if not records_per_fold:
        raise ValueError("no fold records to aggregate")
    out = {}
    for method in methods:
        _, _, n_classes = METHOD_SPECS[method]
        accs = []
        cms = []
        for fold in sorted(records_per_fold):
            pairs = method_pairs(records_per_fold[fold], method)
            accs.append(top1_accuracy(pairs, n_classes))
            cms.append(confusion(pairs, n_classes))
        out[method] = MethodAggregate(method, tuple(accs), tuple(cms))
    return out


def _nan_to_none(values) -> list:
    return [None if not np.isfinite(v) else round(float(v), 12) for v in values]


def aggregate_to_dict(aggregate: dict[str, MethodAggregate]) -> dict:
    """JSON-ready view of an aggregate (stable key order, rounded floats)."""
    if not aggregate:
        raise ValueError("empty aggregate")
    methods = {}
    for name in sorted(aggregate):
        agg = aggregate[name]
        pooled = agg.pooled_confusion()
        methods[name] = {
            "per_fold_accuracy": [round(a, 12) for a in agg.fold_accuracies],
            "mean_accuracy": round(agg.mean_accuracy(), 12),
            "per_class_recall": _nan_to_none(pooled.per_class_recall()),
            "pooled_confusion": pooled.counts.tolist(),
            "n_folds": len(agg.fold_accuracies),
        }
    return {"methods": methods}


def emit_report(aggregate: dict[str, MethodAggregate], out_dir) -> list[Path]:
    """Write the accuracy table (CSV + text), heatmaps, and JSON summary.

    Reruns on identical aggregates produce byte-identical CSV/JSON; the
    PNG heatmaps may differ only in image metadata.
    """
    if not aggregate:
        raise ValueError("empty aggregate")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    table_path = out / "accuracy_table.csv"
    max_classes = max(len(a.pooled_confusion().counts) for a in aggregate.values())
    fields = ["method", "fold", "accuracy"] + [
        f"per_class_{c}" for c in range(1, max_classes + 1)
    ]
    with open(table_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for name in sorted(aggregate):
            agg = aggregate[name]
            for fold, (acc, cm) in enumerate(
                zip(agg.fold_accuracies, agg.fold_confusions)
            ):
                recalls = _nan_to_none(cm.per_class_recall())
                recalls += [None] * (max_classes - len(recalls))
                writer.writerow(
                    [name, fold, f"{acc:.6f}"]
                    + ["" if r is None else f"{r:.6f}" for r in recalls]
                )
            writer.writerow(
                [name, "mean", f"{agg.mean_accuracy():.6f}"] + [""] * max_classes
            )
    written.append(table_path)

    text_path = out / "accuracy_table.txt"
    lines = [f"{'method':<8} {'mean acc':>9}  per-fold"]
    for name in sorted(aggregate):
        agg = aggregate[name]
        folds = " ".join(f"{a:.4f}" for a in agg.fold_accuracies)
        lines.append(f"{name:<8} {agg.mean_accuracy():>9.4f}  {folds}")
    text_path.write_text("\n".join(lines) + "\n")
    written.append(text_path)

    json_path = out / "summary.json"
    json_path.write_text(
        json.dumps(aggregate_to_dict(aggregate), indent=2, sort_keys=True) + "\n"
    )
    written.append(json_path)

    for name in sorted(aggregate):
        written.append(
            _heatmap(aggregate[name].pooled_confusion(), name, out / f"confusion_{name}.png")
        )
    return written


def _heatmap(cm: ConfusionMatrix, title: str, path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(cm.counts)
    fig, ax = plt.subplots(figsize=(4.5, 4.0))
    im = ax.imshow(cm.counts, cmap="Blues")
    ax.set_title(f"{title} confusion (rows true)")
    ax.set_xlabel("predicted class")
    ax.set_ylabel("true class")
    ax.set_xticks(range(n), [str(i + 1) for i in range(n)])
    ax.set_yticks(range(n), [str(i + 1) for i in range(n)])
    vmax = cm.counts.max() if cm.total else 1
    for i in range(n):
        for j in range(n):
            v = int(cm.counts[i, j])
            ax.text(
                j, i, str(v), ha="center", va="center",
                color="white" if v > vmax / 2 else "black", fontsize=8,
            )
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
