"""Deterministic rendering defaults shared by every figure."""

import matplotlib

matplotlib.use("Agg")

SOURCE_COLORS = {"pmmh": "#1f1f1f", "snl": "#d95f02"}
FALLBACK_COLORS = ["#7570b3", "#1b9e77", "#e7298a", "#66a61e"]
DPI = 100


def apply_style():
    matplotlib.rcdefaults()
    matplotlib.rcParams.update({
        "figure.dpi": DPI,
        "savefig.dpi": DPI,
        "font.size": 9,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "svg.hashsalt": "plotkit",
    })


def source_color(source, index):
    return SOURCE_COLORS.get(
        source.lower(), FALLBACK_COLORS[index % len(FALLBACK_COLORS)]
    )


def save(fig, path):
    # strip the software/date metadata so identical input gives
    # identical bytes across invocations
    fig.savefig(path, dpi=DPI, metadata={"Software": None})
