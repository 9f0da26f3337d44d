"""Posterior pairs figure: marginals on the diagonal, one bivariate
panel per parameter pair below it.

Every run of every source is overlaid on the diagonal; the bivariate
panels show the reference source as a shaded histogram with a single
overlaid run of each remaining source, which keeps them readable when a
source carries many repeated runs.
"""

import warnings

import numpy as np
import matplotlib.pyplot as plt

from .style import apply_style, save, source_color

REFERENCE_SOURCE = "pmmh"


def _density_curve(values, grid):
    """Gaussian kernel density with Scott's bandwidth."""
    values = np.asarray(values)
    n = len(values)
    sd = values.std(ddof=1) if n > 1 else 1.0
    h = max(sd * n ** (-0.2), 1e-9)
    z = (grid[:, None] - values[None, :]) / h
    return np.exp(-0.5 * z * z).sum(axis=1) / (n * h * np.sqrt(2 * np.pi))


def pairs_plot(tidy, out_path):
    if len(tidy.parameters) < 2:
        raise ValueError("pairs plot needs at least two parameters")
    sources = tidy.sources
    if not sources:
        raise ValueError("no samples to plot")
    if REFERENCE_SOURCE not in [s.lower() for s in sources]:
        warnings.warn(
            f"reference source {REFERENCE_SOURCE!r} missing; rendering"
            " the available sources only"
        )

    apply_style()
    params = tidy.parameters
    p = len(params)
    fig, axes = plt.subplots(p, p, figsize=(2.4 * p, 2.4 * p))
    axes = np.atleast_2d(axes)

    limits = {
        par: (
            min(v[par].min() for v in tidy.groups.values()),
            max(v[par].max() for v in tidy.groups.values()),
        )
        for par in params
    }

    for i, par_i in enumerate(params):
        for j, par_j in enumerate(params):
            ax = axes[i, j]
            if i == j:
                lo, hi = limits[par_i]
                pad = 0.05 * (hi - lo + 1e-12)
                grid = np.linspace(lo - pad, hi + pad, 200)
                for si, source in enumerate(sources):
                    for run in tidy.runs(source):
                        ax.plot(
                            grid,
                            _density_curve(tidy.groups[(source, run)][par_i], grid),
                            color=source_color(source, si),
                            lw=0.9,
                            alpha=0.8,
                            label=source if run == tidy.runs(source)[0] else None,
                        )
                ax.set_yticks([])
                ax.set_xlabel(par_i)
            elif i > j:
                for si, source in enumerate(sources):
                    run = tidy.runs(source)[0]
                    x = tidy.groups[(source, run)][par_j]
                    y = tidy.groups[(source, run)][par_i]
                    if source.lower() == REFERENCE_SOURCE:
                        ax.hist2d(x, y, bins=40, cmap="Greys")
                    else:
                        ax.scatter(x, y, s=2, lw=0,
                                   color=source_color(source, si), alpha=0.5)
                ax.set_xlabel(par_j)
                ax.set_ylabel(par_i)
            else:
                ax.axis("off")
    axes[0, 0].legend(loc="upper right", frameon=False, fontsize=8)
    fig.tight_layout()
    save(fig, out_path)
    plt.close(fig)
    return out_path
