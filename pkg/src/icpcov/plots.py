"""SVG figures for calibration reports. Output is byte-stable for fixed inputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import trajectory_ellipses  # noqa: E402

_RC = {"svg.hashsalt": "icpcov", "svg.fonttype": "none", "path.simplify": False}
_LABELS = ("x", "y", "z", "roll", "pitch", "yaw")


def _save(fig, path):
    fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)


def plot_error_bands(records, path, n_sigma: float = 3.0) -> None:
    """Per-component label against the predicted ``n_sigma`` band, per sample."""
    records = [r for r in records if r.converged]
    with plt.rc_context(_RC):
        fig, axes = plt.subplots(2, 3, figsize=(10, 5), sharex=True)
        x = np.arange(len(records))
        labels = np.array([r.label for r in records]).reshape(-1, 6)
        tot = np.array([np.sqrt(np.diag(r.total)) for r in records]).reshape(-1, 6)
        ale = np.array([np.sqrt(np.diag(r.aleatoric)) for r in records]).reshape(-1, 6)
        for k, ax in enumerate(axes.flat):
            ax.fill_between(x, -n_sigma * tot[:, k], n_sigma * tot[:, k], color="tab:blue", alpha=0.25, label="total")
            ax.plot(x, n_sigma * ale[:, k], color="tab:orange", lw=0.8, label="aleatoric")
            ax.plot(x, -n_sigma * ale[:, k], color="tab:orange", lw=0.8)
            ax.plot(x, labels[:, k], ".", ms=2, color="k", label="error")
            ax.set_title(_LABELS[k])
        axes[0, 0].legend(fontsize=6)
        fig.tight_layout()
        _save(fig, path)


def plot_trajectories(results: dict, path, n_sigma: float = 3.0) -> None:
    """Estimated vs true path in the xy plane with compound-covariance ellipses."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 5))
        for name in sorted(results):
            res = results[name]
            est = np.array([T.translation for T in res.poses])
            tru = np.array([T.translation for T in res.truth])
            (line,) = ax.plot(est[:, 0], est[:, 1], lw=1, label=f"{name} estimate")
            ax.plot(tru[:, 0], tru[:, 1], "--", lw=0.8, color=line.get_color())
            for e in trajectory_ellipses(res, n_sigma):
                ax.plot(e[:, 0], e[:, 1], lw=0.5, color=line.get_color(), alpha=0.6)
        ax.set_xlabel("x [m]")
        ax.set_ylabel("y [m]")
        ax.set_aspect("equal", adjustable="datalim")
        ax.legend(fontsize=6)
        fig.tight_layout()
        _save(fig, path)


def plot_epistemic(series: dict, path) -> None:
    """Epistemic traces, each normalised by the mean of the first series."""
    names = list(series)
    ref = float(np.mean(series[names[0]])) if names else 1.0
    ref = ref if ref > 0 else 1.0
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6, 3))
        for name in names:
            v = np.asarray(series[name], dtype=float) / ref
            ax.plot(np.arange(len(v)), v, lw=0.8, label=name)
        ax.set_xlabel("sample")
        ax.set_ylabel("epistemic trace / reference mean")
        ax.legend(fontsize=6)
        fig.tight_layout()
        _save(fig, path)
