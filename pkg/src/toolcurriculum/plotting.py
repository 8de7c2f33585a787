"""Report figures written next to the CLI's delimited outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .metrics import ASPECT_TITLES, ASPECTS, EvalReport  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.titlesize": 11,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
}

# no timestamps or version strings, so reruns are byte-identical
_PNG_METADATA = {"Software": None}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="png", metadata=_PNG_METADATA)
    plt.close(fig)


def plot_eval_report(report: EvalReport, path, label: str = "Model") -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        values = [getattr(report, a) * 100 for a in ASPECTS]
        bars = ax.bar([ASPECT_TITLES[a].replace(" ", "\n") for a in ASPECTS], values, color="#4c72b0")
        for bar, v in zip(bars, values):
            ax.text(bar.get_x() + bar.get_width() / 2, v + 1, f"{v:.2f}", ha="center", va="bottom")
        ax.set_ylim(0, 110)
        ax.set_ylabel("score (x100)")
        ax.set_title(f"{label}: {len(report.per_instance)} instances")
        _save(fig, path)


def plot_perplexities(perplexities: dict[str, float], selected: list[str], path) -> None:
    """Histogram of per-instance perplexity with the selected (hard) share overlaid."""
    chosen = set(selected)
    all_h = [perplexities[k] for k in sorted(perplexities)]
    hard = [perplexities[k] for k in sorted(perplexities) if k in chosen]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.4, 3.6))
        bins = 20
        lo, hi = (min(all_h), max(all_h)) if all_h else (0.0, 1.0)
        if hi <= lo:
            hi = lo + 1.0
        ax.hist(all_h, bins=bins, range=(lo, hi), color="#8c8c8c", label="all instances")
        if hard:
            ax.hist(hard, bins=bins, range=(lo, hi), color="#c44e52", label="selected for self-instruct")
        ax.set_xlabel("perplexity")
        ax.set_ylabel("instances")
        ax.legend(frameon=False)
        _save(fig, path)


def plot_recall_curve(ks: list[int], recalls: list[float], path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        ax.plot(ks, [r * 100 for r in recalls], marker="o", color="#55a868")
        ax.set_xlabel("k")
        ax.set_ylabel("recall@k (x100)")
        ax.set_ylim(0, 105)
        ax.grid(alpha=0.3)
        _save(fig, path)
