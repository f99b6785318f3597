"""Report figures written next to the CSV/JSON outputs.

Uses the non-interactive Agg backend; PNGs carry no timestamp metadata so
reruns are byte-identical.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 150,
}

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def figsize(width=5.0):
    return (width, width * GOLDEN)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_pr_curve(curve, selected, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        rec = [m.recall for m in curve]
        prec = [m.precision for m in curve]
        ax.plot(rec, prec, "o-", ms=3, lw=1, color="0.3")
        for m in curve:
            ax.annotate(str(m.threshold), (m.recall, m.precision), fontsize=6, xytext=(3, 3), textcoords="offset points")
        ax.plot([selected.recall], [selected.precision], "o", ms=7, mfc="none", mec="C3",
                label=f"TH={selected.threshold} (F1 {selected.f1:.4f})")
        ax.set_xlabel("amplified recall")
        ax.set_ylabel("amplified precision")
        ax.set_title(f"k-of-{selected.window} confirmation rule")
        ax.legend(loc="lower left")
        return _save(fig, path)


def plot_monthly(rows, path):
    """``rows``: (month label, frames, detections, days of coverage)."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        labels = [r[0] for r in rows]
        x = np.arange(len(rows))
        ax.bar(x, [r[2] for r in rows], color="0.4")
        ax.set_xticks(x, labels, rotation=45, ha="right")
        ax.set_ylabel("positive detections")
        ax2 = ax.twinx()
        ax2.plot(x, [r[3] for r in rows], "s--", ms=3, color="C1")
        ax2.set_ylabel("days of coverage", color="C1")
        return _save(fig, path)


def plot_confirmation_delay(verdicts, path):
    delays = [
        (v.first_confirmed_at - v.first_observed_at).total_seconds() / 86400.0
        for v in verdicts
        if v.confirmed and v.first_observed_at is not None
    ]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        if delays:
            ax.hist(delays, bins=min(40, max(5, len(delays) // 5)), color="0.4")
        else:
            ax.text(0.5, 0.5, "no confirmed cells", ha="center", va="center", transform=ax.transAxes)
        ax.set_xlabel("days from first observation to confirmation")
        ax.set_ylabel("cells")
        return _save(fig, path)


def plot_borough_shares(names, target, observed, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        x = np.arange(len(names))
        ax.bar(x - 0.2, target, 0.4, label="permits", color="0.6")
        ax.bar(x + 0.2, observed, 0.4, label="selected frames", color="0.2")
        ax.set_xticks(x, names, rotation=20)
        ax.set_ylabel("share")
        ax.legend()
        return _save(fig, path)


def plot_evaluation(report, path):
    names = sorted(report.per_borough)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(6.0))
        x = np.arange(len(names))
        bottom = np.zeros(len(names))
        for key, color, label in (
            ("confirmed_permitted", "0.2", "confirmed"),
            ("missed_permits", "0.55", "missed"),
            ("out_of_scope_permits", "0.85", "out of coverage"),
            ("unpermitted_clusters", "C3", "unpermitted"),
        ):
            vals = np.array([getattr(report.per_borough[n], key) for n in names], dtype=float)
            ax.bar(x, vals, bottom=bottom, color=color, label=label)
            bottom += vals
        ax.set_xticks(x, names, rotation=20)
        ax.set_ylabel("structures")
        ax.legend(fontsize=7)
        return _save(fig, path)


def plot_simulation(result, path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize(4.0))
        ax.errorbar([0], [result.analytic], yerr=[result.sigmas_allowed * result.sigma], fmt="o", color="0.3",
                    capsize=4, label=f"model ± {result.sigmas_allowed:g}σ")
        ax.plot([1], [result.empirical], "o", color="C3", label="pipeline")
        ax.set_xticks([0, 1], ["binomial model", "simulated pipeline"])
        ax.set_xlim(-0.6, 1.6)
        ax.set_ylabel("confirmed fraction")
        ax.legend(loc="lower center")
        return _save(fig, path)
