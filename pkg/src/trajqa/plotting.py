"""Figures written next to the JSON/TSV reports."""
from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricReport  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
})

METRIC_LABELS = ("A_target", "A_sub", "A_cons")


def _pct(v: Optional[float]) -> float:
    return float("nan") if v is None else 100.0 * v


def plot_report(report: MetricReport, path: str | Path, title: str = "",
                baseline: Optional[MetricReport] = None) -> Path:
    fig, (ax, bx) = plt.subplots(1, 2, figsize=(8, 3.2), gridspec_kw={"width_ratios": [1, 1.4]})
    vals = [_pct(report.a_target), _pct(report.a_sub), _pct(report.a_cons)]
    xs = range(len(METRIC_LABELS))
    width = 0.38 if baseline is not None else 0.6
    ax.bar([x - (width / 2 if baseline else 0) for x in xs], vals, width, label="system", color="C0")
    if baseline is not None:
        bvals = [_pct(baseline.a_target), _pct(baseline.a_sub), _pct(baseline.a_cons)]
        ax.bar([x + width / 2 for x in xs], bvals, width, label="baseline", color="C7")
        ax.legend(frameon=False)
    ax.set_xticks(list(xs), METRIC_LABELS)
    ax.set_ylim(0, 100)
    ax.set_ylabel("%")
    ax.set_title(title or "metrics")

    types = sorted(report.breakdowns)
    bx.barh(range(len(types)), [_pct(report.breakdowns[t]) for t in types], color="C1")
    bx.set_yticks(range(len(types)), [t.replace("_", " ") for t in types])
    bx.set_xlim(0, 100)
    bx.set_xlabel("A_cons by question type (%)")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_grid(rows: Sequence, path: str | Path, title: str = "") -> Path:
    done = [r for r in rows if r.report is not None]
    labels = [r.label for r in done]
    fig, ax = plt.subplots(figsize=(7, 0.45 * max(len(done), 2) + 1.0))
    ys = range(len(done))
    ax.barh([y - 0.2 for y in ys], [_pct(r.report.a_target) for r in done], 0.4, label="A_target", color="C0")
    ax.barh([y + 0.2 for y in ys], [_pct(r.report.a_cons) for r in done], 0.4, label="A_cons", color="C2")
    ax.set_yticks(list(ys), labels)
    ax.invert_yaxis()
    ax.set_xlim(0, 100)
    ax.set_xlabel("%")
    ax.legend(frameon=False, loc="lower right")
    ax.set_title(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path)
    plt.close(fig)
    return path
