"""Sampling-efficiency comparison on log-log axes.

Input rows are (x, source, ESS per second) where x is the experiment
size (population, household count, ...). The reference source is drawn
as a line through its per-x values; any source with repeated
measurements at an x gets its mean with min/max error bars.
"""

from collections import defaultdict

import numpy as np
import matplotlib.pyplot as plt

from .style import apply_style, save, source_color


def ess_plot(rows, out_path, x_label="experiment size"):
    if not rows:
        raise ValueError("no ESS rows")
    by_source = defaultdict(lambda: defaultdict(list))
    for x, source, value in rows:
        by_source[source][x].append(value)

    apply_style()
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    sources = sorted(by_source)
    for si, source in enumerate(sources):
        xs = np.array(sorted(by_source[source]))
        means = np.array([np.mean(by_source[source][x]) for x in xs])
        lows = np.array([min(by_source[source][x]) for x in xs])
        highs = np.array([max(by_source[source][x]) for x in xs])
        color = source_color(source, si)
        if np.any(lows < means) or np.any(highs > means):
            ax.errorbar(xs, means, yerr=[means - lows, highs - means],
                        color=color, marker="o", ms=4, capsize=3, label=source)
        else:
            ax.plot(xs, means, color=color, marker="o", ms=4, label=source)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel(x_label)
    ax.set_ylabel("ESS per second")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    save(fig, out_path)
    plt.close(fig)
    return out_path
