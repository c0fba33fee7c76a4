"""Figures for the report path. Always renders off-screen to files."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    # fixed metadata keeps repeated renders byte-stable
    fig.savefig(path, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return path


def report_figure(rows: list[dict], path, metric: str = "mse") -> Path:
    """Grouped bars of ``metric`` per method, one group per prediction length."""
    by_pl = defaultdict(dict)
    for r in rows:
        by_pl[r["pl"]][r["method"]] = r[metric]
    pls = sorted(by_pl)
    methods = sorted({r["method"] for r in rows})
    width = 0.8 / max(1, len(methods))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(pls) * max(1, len(methods)) * 0.5, 3.0))
        x = np.arange(len(pls))
        for i, m in enumerate(methods):
            vals = [by_pl[pl].get(m, np.nan) for pl in pls]
            ax.bar(x + (i - (len(methods) - 1) / 2) * width, vals, width, label=m)
        ax.set_xticks(x)
        ax.set_xticklabels([str(p) for p in pls])
        ax.set_xlabel("prediction length")
        ax.set_ylabel(f"test {metric.upper()} (mean over seeds)")
        ax.legend(frameon=False)
        return _save(fig, path)


def pca_figure(rows: list[tuple], path) -> Path:
    """Scatter of a two-component projection; rows are ``(set, x, y)``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.2))
        for name, style in (("original", dict(s=4, alpha=0.3, c="0.6")), ("condensed", dict(s=14, c="C3"))):
            pts = np.array([(x, y) for s, x, y in rows if s == name])
            if len(pts):
                ax.scatter(pts[:, 0], pts[:, 1], label=name, **style)
        ax.set_xlabel("PC 1")
        ax.set_ylabel("PC 2")
        ax.legend(frameon=False)
        return _save(fig, path)
