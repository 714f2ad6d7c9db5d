"""Loss-curve and metric-sweep figures."""

from __future__ import annotations

import re
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .history import LossHistory  # noqa: E402
from .metrics import MetricsReport  # noqa: E402


def plot_loss_csv(path: str | Path, out_dir: str | Path) -> Path:
    """One figure with one curve per loss column; the first column is the x axis."""
    hist = LossHistory.from_csv(path)
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = hist.column(hist.columns[0])
    for name in hist.columns[1:]:
        ax.plot(xs, hist.column(name), label=name)
    ax.set_xlabel(hist.columns[0])
    ax.set_ylabel("loss")
    ax.set_title(Path(path).stem)
    if len(hist.columns) > 1 and len(hist):
        ax.legend()
    out = Path(out_dir) / f"{Path(path).stem}.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out


def plot_overlay(paths: Sequence[str | Path], labels: Sequence[str], out_dir: str | Path, smooth: int = 1) -> list[Path]:
    """Overlay runs (e.g. an A/B pair) column by column."""
    hists = [LossHistory.from_csv(p) for p in paths]
    shared = [c for c in hists[0].columns[1:] if all(c in h.columns for h in hists)]
    written = []
    for col in shared:
        fig, ax = plt.subplots(figsize=(6, 4))
        for h, label in zip(hists, labels):
            ys = h.column(col)
            if smooth > 1 and len(ys) >= smooth:
                ys = [sum(ys[i - smooth + 1 : i + 1]) / smooth for i in range(smooth - 1, len(ys))]
                xs = h.column(h.columns[0])[smooth - 1 :]
            else:
                xs = h.column(h.columns[0])
            ax.plot(xs, ys, label=label)
        ax.set_xlabel(hists[0].columns[0])
        ax.set_ylabel(col)
        ax.legend()
        out = Path(out_dir) / f"overlay_{col}.png"
        out.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out, dpi=100)
        plt.close(fig)
        written.append(out)
    return written


def _order_key(report: MetricsReport):
    m = re.search(r"(\d+)", report.checkpoint_id)
    return (int(m.group(1)) if m else 0, report.checkpoint_id)


def plot_reports(paths: Sequence[str | Path], out_dir: str | Path) -> Path:
    """IS, FID and R-precision against checkpoint."""
    reports = sorted((MetricsReport.load(p) for p in paths), key=_order_key)
    ids = [r.checkpoint_id for r in reports]
    fig, axes = plt.subplots(1, 3, figsize=(13, 4))
    panels = [
        ("IS", [r.is_mean for r in reports], [r.is_std for r in reports]),
        ("FID", [r.fid for r in reports], None),
        ("R-precision (%)", [r.rp_mean for r in reports], [r.rp_std for r in reports]),
    ]
    for ax, (name, ys, err) in zip(axes, panels):
        ax.errorbar(range(len(ys)), ys, yerr=err, marker="o")
        ax.set_xticks(range(len(ids)))
        ax.set_xticklabels(ids, rotation=45, ha="right", fontsize=7)
        ax.set_title(name)
    fig.tight_layout()
    out = Path(out_dir) / "metrics.png"
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out
