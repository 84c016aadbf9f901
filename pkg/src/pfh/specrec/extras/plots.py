"""Utility functions for generating visualizations."""

from __future__ import annotations

import matplotlib.pyplot as plt
import numpy as np


__all__ = [
    "plot_spectrum",
]


def __dir__():
    return __all__


def plot_spectrum(frequencies, spectrum, title=None, ax=None, show: bool = False):
    """
    Plot the magnitude of a graph signal's spectrum against frequency.

    Parameters
    ----------
    frequencies : array of float, shape (n,)
        The eigenvalues of the basis, ascending.
    spectrum : array of float, shape (n,)
        The graph Fourier coefficients.
    title : string, optional
    ax : matplotlib.axes.Axes, optional
        Plot into an existing axes instead of creating a figure.
    show : bool, optional
        Whether to call `plt.show` when `ax = None`.

    Returns
    -------
    fig : matplotlib.figure.Figure
    ax : matplotlib.axes.Axes
    """
    frequencies = np.asarray(frequencies, dtype=float)
    magnitude = np.abs(np.asarray(spectrum, dtype=float))
    if frequencies.shape != magnitude.shape:
        raise ValueError("`frequencies` and `spectrum` must have the same shape")

    if ax is None:
        fig, ax = plt.subplots(figsize=(8, 4))
        independent_plot = True
    else:
        fig = ax.figure
        independent_plot = False

    ax.vlines(frequencies, 0, magnitude, lw=1)
    ax.plot(frequencies, magnitude, "o", ms=3)
    ax.set_xlabel("frequency")
    ax.set_ylabel("|coefficient|")
    if title:
        ax.set_title(title)
    ax.grid(which="major", alpha=0.3)

    if independent_plot and show:
        plt.show()
    return fig, ax
