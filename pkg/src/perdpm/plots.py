"""Static SVG figures for the analysis subcommand (matplotlib, Agg backend)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed ids and no timestamp so identical inputs give identical bytes
matplotlib.rcParams["svg.hashsalt"] = "perdpm"
matplotlib.rcParams["svg.fonttype"] = "none"
_META = {"Date": None, "Creator": "perdpm"}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def cluster_means_figure(path, means: np.ndarray, dim: int = 0) -> None:
    """Mean of observation ``dim`` per group over time."""
    fig, ax = plt.subplots(figsize=(6, 4))
    t = np.arange(means.shape[1])
    for k, curve in enumerate(means[:, :, dim]):
        ax.plot(t, curve, marker="o", label=f"group {k + 1}")
    ax.set_xlabel("time step")
    ax.set_ylabel(f"mean X[{dim}]")
    ax.legend()
    _save(fig, path)


def patient_states_figure(path, probs: np.ndarray, true_states: np.ndarray | None,
                          title: str = "") -> None:
    """Per-state probability lines; true states (1-based) as dots on a right axis."""
    fig, ax = plt.subplots(figsize=(6, 4))
    t = np.arange(probs.shape[0])
    for k in range(probs.shape[1]):
        ax.plot(t, probs[:, k], label=f"state {k + 1}")
    ax.set_ylim(0, 1)
    ax.set_xlabel("time step")
    ax.set_ylabel("predicted probability")
    if true_states is not None:
        ax2 = ax.twinx()
        ax2.plot(t, true_states, "o", color="tab:blue", label="true state")
        ax2.set_ylim(0.5, probs.shape[1] + 0.5)
        ax2.set_ylabel("true state")
    ax.legend(loc="upper left", fontsize="small")
    ax.set_title(title)
    _save(fig, path)


def dsi_clusters_figure(path, cluster_dsi: np.ndarray) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    t = np.arange(cluster_dsi.shape[1])
    for k, curve in enumerate(cluster_dsi):
        ax.plot(t, curve, marker="o", label=f"cluster {k + 1}")
    ax.set_xlabel("time step")
    ax.set_ylabel("mean DSI")
    ax.legend()
    _save(fig, path)
