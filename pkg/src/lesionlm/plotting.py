"""Figures rendered from the report CSVs (Agg backend, files only)."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

VARIANT_COLORS = {"intact": "#3b6fb6", "random": "#8e5ea2", "core": "#e08a2c"}
SPECIFIC_COLOR = "#4f9a6a"

STYLE = {
    "figure.dpi": 110,
    "savefig.dpi": 150,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.linewidth": 0.6,
    "legend.frameon": False,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
}


def _rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _color(v: str) -> str:
    return VARIANT_COLORS.get(v, SPECIFIC_COLOR)


def _save(fig, out, rel: str) -> Path:
    path = out(rel)
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_encoding_bars(report: Path, langs, out) -> Path:
    fig, axes = plt.subplots(1, len(langs), figsize=(2.4 * len(langs), 2.6), sharey=True)
    for ax, L in zip(np.atleast_1d(axes), langs):
        rows = _rows(report / f"baseline_contrast_{L}.csv")
        names = [r["variant"] for r in rows]
        ax.bar(names, [float(r["mean_r"]) for r in rows], yerr=[float(r["sem"]) for r in rows],
               color=[_color(v) for v in names], capsize=2, width=0.65)
        ax.set_title(f"group {L}")
        ax.tick_params(axis="x", rotation=30)
    np.atleast_1d(axes)[0].set_ylabel("mean encoding r")
    fig.tight_layout()
    return _save(fig, out, "report/figures/encoding_by_variant.png")


def plot_lesion_matrix(report: Path, langs, out) -> Path:
    rows = _rows(report / "lesion_matrix.csv")
    M = np.array([[float(r["mean_t"]) for r in rows if r["lesion"] == f"specific-{A}"]
                  for A in langs])
    fig, ax = plt.subplots(figsize=(3.2, 2.8))
    im = ax.imshow(M, cmap="viridis")
    for i in range(len(langs)):
        for j in range(len(langs)):
            ax.text(j, i, f"{M[i, j]:.2f}", ha="center", va="center", color="w", fontsize=8)
    ax.set_xticks(range(len(langs)), langs)
    ax.set_yticks(range(len(langs)), [f"lesion {A}" for A in langs])
    ax.set_xlabel("subject group")
    fig.colorbar(im, ax=ax, label="mean paired t")
    fig.tight_layout()
    return _save(fig, out, "report/figures/lesion_matrix.png")


def plot_perplexity(report: Path, langs, variants, out) -> Path:
    rows = _rows(report / "perplexity.csv")
    fig, ax = plt.subplots(figsize=(5.0, 2.6))
    w = 0.8 / len(variants)
    x = np.arange(len(langs))
    for i, v in enumerate(variants):
        vals = {r["language"]: float(r["ratio_to_intact"]) for r in rows if r["variant"] == v}
        ax.bar(x + i * w - 0.4 + w / 2, [vals[L] for L in langs], w, label=v, color=_color(v),
               alpha=1.0 if v in VARIANT_COLORS else 0.45 + 0.15 * i / len(variants))
    ax.axhline(1.0, color="0.4", lw=0.6, ls="--")
    ax.set_xticks(x, langs)
    ax.set_ylabel("perplexity / intact")
    ax.legend(ncol=3, loc="upper left", bbox_to_anchor=(0, 1.25))
    fig.tight_layout()
    return _save(fig, out, "report/figures/perplexity_ratio.png")


def plot_projections(report: Path, langs, out) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(6.0, 2.8))
    for ax, v in zip(axes, ("intact", "core")):
        rows = _rows(report / f"projection_{v}.csv")
        for L in langs:
            pts = np.array([(float(r["x"]), float(r["y"])) for r in rows if r["label"] == L])
            ax.scatter(pts[:, 0], pts[:, 1], s=3, alpha=0.5, label=L)
        ax.set_title(v)
        ax.set_xlabel("PC1")
    axes[0].set_ylabel("PC2")
    axes[1].legend(markerscale=3)
    fig.tight_layout()
    return _save(fig, out, "report/figures/embedding_projection.png")


def plot_lpi(report: Path, langs, out) -> Path:
    fig, ax = plt.subplots(figsize=(3.6, 2.6))
    bins = np.linspace(-1, 1, 21)
    for L in langs:
        vals = np.array([float(r["lpi"]) for r in _rows(report / f"lpi_{L}.csv")])
        vals = vals[~np.isnan(vals)]
        if vals.size:
            ax.hist(vals, bins=bins, histtype="step", label=L)
    ax.set_xlabel("LPI")
    ax.set_ylabel("voxels")
    ax.legend()
    fig.tight_layout()
    return _save(fig, out, "report/figures/lpi_hist.png")


def render_report_figures(report: Path, langs, variants, out) -> list[Path]:
    """Render every report figure; ``out`` maps a run-relative path to a
    writable file path."""
    with plt.rc_context(STYLE):
        return [plot_encoding_bars(report, langs, out),
                plot_lesion_matrix(report, langs, out),
                plot_perplexity(report, langs, variants, out),
                plot_projections(report, langs, out),
                plot_lpi(report, langs, out)]
