"""Figure rendering for evaluation and audit reports.

Renders matplotlib figures to PNG files alongside the delimited CSV output
written by the metric and privacy modules.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .metrics import MetricReport  # noqa: E402
from .privacy import SimilarityReport  # noqa: E402


def render_metric_figures(report: MetricReport, out_dir: str | Path) -> list[Path]:
    """Histogram comparison panels plus a divergence summary bar chart."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    if report.histograms:
        names = sorted(report.histograms)
        fig, axes = plt.subplots(1, len(names), figsize=(5 * len(names), 4))
        if len(names) == 1:
            axes = [axes]
        for ax, name in zip(axes, names):
            h_real, h_gen = report.histograms[name]
            centers = (h_real.edges[:-1] + h_real.edges[1:]) / 2
            width = (h_real.edges[1] - h_real.edges[0]) * 0.45
            ax.bar(centers - width / 2, h_real.mass, width=width, label="real")
            ax.bar(centers + width / 2, h_gen.mass, width=width, label="generated")
            ax.set_title(name)
            ax.set_ylabel("mass")
            ax.legend()
        fig.tight_layout()
        p = out / "histograms.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        written.append(p)

    fig, ax = plt.subplots(figsize=(6, 4))
    labels = ["distance", "radius", "locnum", "grank", "rrank"]
    values = [report.distance_jsd, report.radius_jsd, report.locnum_jsd,
              report.grank_jsd, report.rrank_jsd]
    ax.bar(labels, values)
    ax.set_ylabel("divergence (bits)")
    ax.set_ylim(0, 1)
    ax.set_title(f"fidelity summary (flow overlap {report.cpc:.3f})")
    fig.tight_layout()
    p = out / "jsd_summary.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    written.append(p)
    return written


def render_similarity_figure(report: SimilarityReport,
                             out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    centers = (report.histogram_edges[:-1] + report.histogram_edges[1:]) / 2
    width = report.histogram_edges[1] - report.histogram_edges[0]
    ax.bar(centers, report.histogram_mass, width=width * 0.9)
    ax.axvline(report.alarm_threshold, color="red", linestyle="--",
               label=f"alarm threshold ({report.alarm_fraction:.1%} above)")
    ax.set_xlabel("top-1 similarity to real data")
    ax.set_ylabel("mass")
    ax.legend()
    fig.tight_layout()
    p = out / "similarity.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    return p


def render_loss_curve(losses, out_dir: str | Path, name: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(losses)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(name)
    fig.tight_layout()
    p = out / f"{name}_loss.png"
    fig.savefig(p, dpi=120)
    plt.close(fig)
    return p
