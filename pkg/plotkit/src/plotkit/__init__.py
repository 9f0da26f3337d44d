"""Figures for posterior comparisons, rendered from CSV artifacts only."""

__version__ = "0.1.0"

from .io import read_ess_table, read_tidy_samples
from .pairs import pairs_plot
from .essfig import ess_plot

__all__ = ["read_tidy_samples", "read_ess_table", "pairs_plot", "ess_plot"]
