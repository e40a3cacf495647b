"""Per-label ROC/AUC evaluation, variant comparison tables and report rendering."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import groupby
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import DegenerateClasses, LengthMismatch
from .images import TripletBatch
from .metadata import LABELS
from .training import TrainHistory, predict_batch

DASH = "-"
REPORT_COLUMNS = ("label", "auc", "n_pos", "n_neg")


def _check_inputs(scores: Sequence[float], labels: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise LengthMismatch(f"{len(s)} scores vs {len(y)} labels")
    return s, y.astype(bool)


def _midranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with tied values sharing the mean of their positions."""
    order = np.argsort(values, kind="mergesort")
    ordered = values[order]
    ranks = np.empty(len(values), dtype=np.float64)
    start = 0
    while start < len(values):
        stop = start + 1
        while stop < len(values) and ordered[stop] == ordered[start]:
            stop += 1
        ranks[order[start:stop]] = (start + stop + 1) / 2.0
        start = stop
    return ranks


def auc_score(scores: Sequence[float], labels: Sequence[int]) -> float | None:
    """Mann-Whitney AUC, tied pairs counted as one half. None when a class is absent."""
    s, y = _check_inputs(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    rank_sum = _midranks(s)[y].sum()
    u = rank_sum - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(scores: Sequence[float], labels: Sequence[int]) -> list[tuple[float, float]]:
    """(fpr, tpr) points from (0, 0) to (1, 1), thresholding at each distinct score, descending."""
    s, y = _check_inputs(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateClasses("ROC needs at least one positive and one negative")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    for i in range(len(s)):
        tp += int(y[i])
        fp += int(not y[i])
        if i + 1 == len(s) or s[i + 1] != s[i]:
            points.append((fp / n_neg, tp / n_pos))
    return points


def trapezoid_area(points: Sequence[tuple[float, float]]) -> float:
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


@dataclass
class EvalReport:
    backbone: str
    use_lstm: bool
    view: str
    branches: int
    auc: dict[str, float | None]
    roc: dict[str, list[tuple[float, float]]] = field(default_factory=dict)
    n_pos: dict[str, int] = field(default_factory=dict)
    n_neg: dict[str, int] = field(default_factory=dict)
    n_samples: int = 0

    @property
    def name(self) -> str:
        return f"{self.view}_{self.backbone}_{'lstm' if self.use_lstm else 'nolstm'}_{self.branches}img"

    @property
    def mean_auc(self) -> float | None:
        defined = [v for v in self.auc.values() if v is not None]
        return float(np.mean(defined)) if defined else None


def report_from_scores(
    probs: np.ndarray,
    targets: np.ndarray,
    *,
    backbone: str,
    use_lstm: bool,
    view: str,
    branches: int,
) -> EvalReport:
    """Per-label AUCs from a (samples, 15) probability matrix and one-hot targets."""
    probs = np.asarray(probs)
    targets = np.asarray(targets)
    report = EvalReport(backbone, use_lstm, view, branches, auc={}, n_samples=len(probs))
    for k, label in enumerate(LABELS):
        truth = targets[:, k] >= 0.5
        report.n_pos[label] = int(truth.sum())
        report.n_neg[label] = int((~truth).sum())
        report.auc[label] = auc_score(probs[:, k], truth)
        if report.auc[label] is not None:
            report.roc[label] = roc_curve(probs[:, k], truth)
    return report


def evaluate_model(model, test_batch: TripletBatch, view: str) -> EvalReport:
    cfg = model.config
    probs = predict_batch(model, test_batch)
    return report_from_scores(
        probs, test_batch.targets, backbone=cfg.backbone, use_lstm=cfg.use_lstm, view=view, branches=cfg.branches
    )


def format_auc(value: float | None, digits: int = 3) -> str:
    return DASH if value is None else f"{round(value, digits):g}"


@dataclass
class ComparisonTable:
    columns: list[str]
    rows: list[str]
    values: list[list[float | None]]

    def deltas(self) -> dict[tuple[str, str], list[float | None]]:
        """Per-label differences for every ordered column pair (later minus earlier)."""
        out = {}
        for i in range(len(self.columns)):
            for j in range(i + 1, len(self.columns)):
                out[(self.columns[i], self.columns[j])] = [
                    None if row[i] is None or row[j] is None else row[j] - row[i] for row in self.values
                ]
        return out

    def to_text(self, digits: int = 3) -> str:
        width = max(len(r) for r in ["Finding Labels", *self.rows]) + 2
        col_w = max([len(c) for c in self.columns] + [8]) + 2
        lines = ["Finding Labels".ljust(width) + "".join(c.rjust(col_w) for c in self.columns)]
        for label, row in zip(self.rows, self.values):
            lines.append(label.ljust(width) + "".join(format_auc(v, digits).rjust(col_w) for v in row))
        return "\n".join(lines) + "\n"

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["label", *self.columns])
            for label, row in zip(self.rows, self.values):
                writer.writerow([label, *("" if v is None else repr(v) for v in row)])
        return path


def compare_variants(reports: Sequence[EvalReport], column_names: Sequence[str] | None = None) -> ComparisonTable:
    names = list(column_names) if column_names else [r.name for r in reports]
    values = [[r.auc.get(label) for r in reports] for label in LABELS]
    return ComparisonTable(columns=names, rows=list(LABELS), values=values)


def write_report_csv(report: EvalReport, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(REPORT_COLUMNS)
        for label in LABELS:
            auc = report.auc.get(label)
            writer.writerow([label, "" if auc is None else repr(auc), report.n_pos.get(label, 0), report.n_neg.get(label, 0)])
    return path


def read_report_csv(path: str | Path) -> dict[str, float | None]:
    with open(path, newline="", encoding="utf-8") as handle:
        return {row["label"]: (float(row["auc"]) if row["auc"] else None) for row in csv.DictReader(handle)}


def _plot_roc(report: EvalReport, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 6))
    for label, points in report.roc.items():
        xs, ys = zip(*points)
        ax.plot(xs, ys, lw=1.2, label=f"{label} ({report.auc[label]:.3f})")
    ax.plot([0, 1], [0, 1], "k--", lw=0.8)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.set_title(f"ROC: {report.name}")
    ax.legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _plot_loss(history: TrainHistory, title: str, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = range(1, len(history) + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, history.train_loss, marker="o", label="train")
    ax.plot(epochs, history.val_loss, marker="o", label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_title(f"Loss vs epochs: {title}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def render_report(
    reports: Sequence[EvalReport],
    histories: Mapping[str, TrainHistory] | None,
    output_dir: str | Path,
) -> list[Path]:
    """Write AUC CSVs, ROC plots, loss plots and text tables; returns the paths written.

    ``histories`` is keyed by report name. Text tables group reports sharing
    a view, LSTM setting and branch count, one column per backbone.
    """
    if not reports:
        return []
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    histories = histories or {}
    for report in reports:
        written.append(write_report_csv(report, out / f"{report.name}.csv"))
        roc_path = out / f"{report.name}.roc.png"
        _plot_roc(report, roc_path)
        written.append(roc_path)
        if report.name in histories:
            loss_path = out / f"{report.name}.loss.png"
            _plot_loss(histories[report.name], report.name, loss_path)
            written.append(loss_path)

    def group_key(r: EvalReport):
        return (r.view, r.use_lstm, r.branches)

    for (view, lstm, branches), group in groupby(sorted(reports, key=group_key), key=group_key):
        group = list(group)
        table = compare_variants(group, [r.backbone for r in group])
        title = f"{view} {'with' if lstm else 'without'} LSTM AUC Scores ({branches} img)"
        path = out / f"{view}_{'lstm' if lstm else 'nolstm'}_{branches}img.txt"
        path.write_text(title + "\n" + table.to_text(), encoding="utf-8")
        written.append(path)
    return written
