"""Static figures from a plot-ready report file."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import read_plot_file  # noqa: E402

PANELS = (
    ("utilization", None, "average utilization rate"),
    ("violation", "violation_err", "violation probability"),
    ("purchase_mw", "purchase_err_mw", "energy purchase (MW)"),
    ("solve_time_s", None, "solving time (s)"),
)


def render_report(plot_file, out_path=None, title: str | None = None) -> Path:
    """Four panels against the risk level, one line per method."""
    plot_file = Path(plot_file)
    data = read_plot_file(plot_file)
    if out_path is None:
        out_path = plot_file.with_name(plot_file.name.replace(".plot.csv", "") + ".png")
    out_path = Path(out_path)
    fig, axes = plt.subplots(2, 2, figsize=(9, 7), constrained_layout=True)
    for ax, (col, err, label) in zip(axes.flat, PANELS):
        for method in sorted(data):
            cols = data[method]
            yerr = cols[err] if err else None
            ax.errorbar(cols["epsilon"], cols[col], yerr=yerr, marker="o", capsize=3, label=method)
        if col == "violation":
            eps = sorted({e for cols in data.values() for e in cols["epsilon"]})
            ax.plot(eps, eps, "k--", lw=0.8, label="risk level")
        if col == "solve_time_s":
            ax.set_yscale("log")
        ax.set_xlabel("risk level")
        ax.set_ylabel(label)
        ax.grid(alpha=0.3)
    axes.flat[0].legend(fontsize=8)
    if title:
        fig.suptitle(title)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
