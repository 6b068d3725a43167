"""Accuracy-curve figures for reports (headless matplotlib)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed ids and no timestamps so identical inputs give identical SVG bytes
matplotlib.rcParams["svg.hashsalt"] = "tplab"


def plot_curves(curves, reference, path_stem, title="Accuracy over labeled data"):
    """Write ``<path_stem>.svg`` and ``.png``: mean accuracy with stderr bands per strategy.

    ``curves`` maps strategy name to a metrics.Curve; ``reference`` (or None)
    draws the full-data accuracy as a horizontal line.  Returns written paths.
    """
    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for name, c in curves.items():
        pct = 100 * c.fractions
        ax.plot(pct, c.mean, marker="o", ms=3, label=name)
        ax.fill_between(pct, c.mean - c.stderr, c.mean + c.stderr, alpha=0.2)
    if reference is not None:
        ax.axhline(reference, color="black", ls="--", lw=1, label="full data")
    ax.set_xlabel("labeled data (%)")
    ax.set_ylabel("test accuracy")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    paths = [f"{path_stem}.svg", f"{path_stem}.png"]
    fig.savefig(paths[0], metadata={"Date": None})
    fig.savefig(paths[1], dpi=120, metadata={"Software": None})
    plt.close(fig)
    return paths
