"""Report figures. Every PNG carries the run's config hash and seed as metadata."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.stats import norm  # noqa: E402

plt.rcParams.update({
    "figure.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
})


def _save(fig, path, cfg):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"Software": "embodied_comm"}
    if cfg is not None:
        meta["Description"] = f"config_hash={cfg.config_hash()}, seed={cfg.experiment_seed}"
    fig.tight_layout()
    fig.savefig(path, metadata=meta)
    plt.close(fig)
    return path


def _smooth(y, window):
    if len(y) < window:
        return y
    kernel = np.ones(window) / window
    return np.convolve(y, kernel, mode="valid")


def learning_curves(logs, path, cfg=None, window=25):
    """Self-play accuracy and mean energy against iteration, one line per agent."""
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3))
    for i, tlog in enumerate(logs):
        it = tlog.column("iteration")
        acc = _smooth(tlog.column("sp_accuracy"), window)
        eng = _smooth(tlog.column("loss_energy"), window)
        ax0.plot(it[len(it) - len(acc):], acc, lw=1, label=f"agent {i}")
        ax1.plot(it[len(it) - len(eng):], eng, lw=1)
    ax0.set(xlabel="iteration", ylabel="SP accuracy", ylim=(0, 1.02))
    ax1.set(xlabel="iteration", ylabel="mean energy", yscale="log")
    if logs:
        ax0.legend(fontsize=7, frameon=False)
    return _save(fig, path, cfg)


def energy_gaussians(gaussians, path, cfg=None):
    """Fitted per-intent energy densities, one panel per agent."""
    k = max(len(gaussians), 1)
    fig, axes = plt.subplots(1, k, figsize=(2.6 * k, 2.4), squeeze=False)
    for ax, (agent, fits) in zip(axes[0], sorted(gaussians.items())):
        lo = min(f.mean - 4 * max(f.std, 1e-6) for f in fits)
        hi = max(f.mean + 4 * max(f.std, 1e-6) for f in fits)
        x = np.linspace(lo, hi, 400)
        for g, f in enumerate(fits):
            ax.plot(x, norm.pdf(x, f.mean, max(f.std, 1e-9)), lw=1.2, label=f"intent {g}")
        ax.set(title=f"agent {agent}", xlabel="energy")
    axes[0][0].set_ylabel("density")
    axes[0][0].legend(fontsize=7, frameon=False)
    return _save(fig, path, cfg)


def intent_energy_traces(traces, path, cfg=None):
    """Window-averaged energy per intent over training, one panel per agent."""
    k = max(len(traces), 1)
    fig, axes = plt.subplots(1, k, figsize=(2.6 * k, 2.4), squeeze=False)
    for i, (ax, tr) in enumerate(zip(axes[0], traces)):
        for g in range(tr["energy"].shape[1]):
            ax.plot(tr["iteration"], tr["energy"][:, g], lw=1, label=f"intent {g}")
        ax.set(title=f"agent {i}", xlabel="iteration", yscale="log")
    axes[0][0].set_ylabel("energy")
    axes[0][0].legend(fontsize=7, frameon=False)
    return _save(fig, path, cfg)


def observer_curves(results, path, cfg=None):
    """External-observer test accuracy for each (train feed, test feed) cell."""
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for (tr, te), res in sorted(results.items()):
        arr = res.as_array()
        ax.plot(arr[:, 0], arr[:, 2], lw=1, label=f"train {tr} / test {te}")
    ax.set(xlabel="iteration", ylabel="test accuracy", ylim=(0, 1.02))
    ax.legend(fontsize=7, frameon=False)
    return _save(fig, path, cfg)


def discrete_protocols(pairs, path, cfg=None):
    """Rows of (sender policy, receiver policy, SP confusion) heatmaps."""
    from .discrete import confusion

    rows = max(len(pairs), 1)
    fig, axes = plt.subplots(rows, 3, figsize=(8, 2.2 * rows), squeeze=False)
    for r, pair in enumerate(pairs):
        panels = (pair.sender_policy(), pair.receiver_policy(), confusion(pair, pair))
        names = ("sender p(a|g)", "receiver q(g|a)", "p(pred|true)")
        for ax, mat, name in zip(axes[r], panels, names):
            ax.imshow(mat, vmin=0, vmax=1, cmap="viridis", aspect="auto")
            ax.set_title(f"seed {pair.seed}: {name}", fontsize=8)
    return _save(fig, path, cfg)


def crossplay_heatmap(grid, path, cfg=None, title="cross-play"):
    fig, ax = plt.subplots(figsize=(3.4, 3))
    im = ax.imshow(grid, vmin=0, vmax=1, cmap="magma")
    ax.set(xlabel="receiver", ylabel="sender", title=title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    return _save(fig, path, cfg)
