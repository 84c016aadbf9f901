"""Plotting helpers and bundled data."""

from pfh.specrec.extras import plots
