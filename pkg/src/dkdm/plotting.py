"""Figures written next to the CSV outputs of ``eval``, ``sample`` and ``ablate``."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from dkdm.export import tile  # noqa: E402

STYLE = {
    "figure.figsize": (5.0, 3.5),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
    "font.size": 9,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_curves(curves, path, ylabel="metric", title=None, log_y=True):
    """Line plot of ``{label: (iterations, values)}``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for label, (its, vals) in curves.items():
            ax.plot(its, vals, marker="o", ms=2.5, lw=1.2, label=label)
        ax.set_xlabel("iteration")
        ax.set_ylabel(ylabel)
        if log_y:
            ax.set_yscale("log")
        if title:
            ax.set_title(title)
        ax.legend()
        return _save(fig, path)


def plot_sweep(xs, ys, path, xlabel="rho", ylabel="final metric", log_x=True):
    """Final metric against a swept hyperparameter; ``ys`` holds one list of seeds per x."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        med = [float(np.median(y)) for y in ys]
        for x, y in zip(xs, ys):
            ax.scatter([x] * len(y), y, s=10, color="0.6")
        ax.plot(xs, med, marker="o", lw=1.5, label="median")
        if log_x:
            ax.set_xscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.legend()
        return _save(fig, path)


def plot_samples(samples, path, reference=None, title=None):
    """Scatter for 2-D samples (optionally over a reference set), image grid otherwise."""
    x = np.asarray(samples)
    with plt.rc_context(STYLE):
        if x.ndim == 2 and x.shape[1] == 2:
            fig, ax = plt.subplots(figsize=(4.0, 4.0))
            if reference is not None:
                r = np.asarray(reference)
                ax.scatter(r[:, 0], r[:, 1], s=2, color="0.75", label="reference")
            ax.scatter(x[:, 0], x[:, 1], s=2, label="samples")
            ax.set_aspect("equal")
            ax.legend(markerscale=4)
        else:
            fig, ax = plt.subplots(figsize=(4.0, 4.0))
            ax.imshow(tile(x[:64]), cmap="gray", vmin=-1, vmax=1, interpolation="nearest")
            ax.axis("off")
        if title:
            ax.set_title(title)
        return _save(fig, path)
