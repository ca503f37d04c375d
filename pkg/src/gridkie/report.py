"""Run artifacts: delimited loss logs and metrics tables, and the matching
matplotlib figures rendered next to them."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .evalkit import MetricsReport  # noqa: E402
from .trainer import LossReport  # noqa: E402


def write_loss_log(reports: list[LossReport], path: Path) -> None:
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp, delimiter="\t")
        writer.writerow(LossReport.LOG_COLUMNS)
        for report in reports:
            writer.writerow(report.log_row())


def append_loss_row(report: LossReport, path: Path) -> None:
    path = Path(path)
    new = not path.exists()
    with open(path, "a", newline="") as fp:
        writer = csv.writer(fp, delimiter="\t")
        if new:
            writer.writerow(LossReport.LOG_COLUMNS)
        writer.writerow(report.log_row())


def read_loss_log(path: Path) -> list[dict[str, float]]:
    with open(path, newline="") as fp:
        return [{k: float(v) for k, v in row.items()}
                for row in csv.DictReader(fp, delimiter="\t")]


def render_loss_curves(log_path: Path, figure_path: Path) -> None:
    """Loss components over training steps, with the learning rates on a
    twin axis."""
    rows = read_loss_log(log_path)
    if not rows:
        return
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for column, style in (("Loss", "-"), ("L1", "--"), ("L2", "--"),
                          ("LAUX1", ":"), ("LAUX2", ":")):
        ax.plot(steps, [r[column] for r in rows], style, label=column, linewidth=1.2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    twin = ax.twinx()
    twin.plot(steps, [r["lr_V"] for r in rows], color="tab:gray", alpha=0.5, linewidth=0.8)
    twin.set_ylabel("cnn-group lr", color="tab:gray")
    fig.tight_layout()
    fig.savefig(figure_path, dpi=120)
    plt.close(fig)


def write_metrics_csv(report: MetricsReport, path: Path) -> None:
    with open(path, "w", newline="") as fp:
        writer = csv.writer(fp, delimiter="\t")
        writer.writerow(("field", "precision", "recall", "f1", "tp", "fp", "fn"))
        for s in report.per_field:
            writer.writerow((s.name, f"{s.precision:.6f}", f"{s.recall:.6f}",
                             f"{s.f1:.6f}", s.tp, s.fp, s.fn))
        writer.writerow(("micro_f1", "", "", f"{report.micro_f1:.6f}", "", "", ""))
        writer.writerow(("macro_f1", "", "", f"{report.macro_f1:.6f}", "", "", ""))
        if report.field_level_f1 is not None:
            writer.writerow(("field_level_f1", "", "", f"{report.field_level_f1:.6f}",
                             "", "", ""))


def render_field_f1(report: MetricsReport, figure_path: Path) -> None:
    """Per-field F1 bars with micro/macro reference lines."""
    names = [s.name for s in report.per_field]
    values = [s.f1 for s in report.per_field]
    fig, ax = plt.subplots(figsize=(max(4.0, 1.1 * len(names)), 4))
    ax.bar(names, values, color="tab:blue")
    ax.axhline(report.micro_f1, color="tab:orange", linestyle="--",
               linewidth=1, label=f"micro {report.micro_f1:.3f}")
    ax.axhline(report.macro_f1, color="tab:green", linestyle=":",
               linewidth=1, label=f"macro {report.macro_f1:.3f}")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("F1")
    ax.legend(fontsize=8)
    for tick in ax.get_xticklabels():
        tick.set_rotation(30)
    fig.tight_layout()
    fig.savefig(figure_path, dpi=120)
    plt.close(fig)
