"""
Static trajectory plots
"""

import io
from pathlib import Path
from typing import Dict, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import as_matrices  # noqa: E402
from .storage import artifact_store  # noqa: E402

_STYLES = [("-", "black"), ("--", "tab:blue"), ("-.", "tab:red"), (":", "tab:green")]


def plot_trajectories(path: Union[str, Path], trajectories: Dict[str, object], title: str = "") -> Path:
    """
    Top-down (x/z) and 3D views of camera positions, one line per trajectory.

    Trajectories are PoseSE3 batches or (n, 4, 4) camera-to-world matrices.
    """
    fig = plt.figure(figsize=(10, 4.5))
    top = fig.add_subplot(1, 2, 1)
    space = fig.add_subplot(1, 2, 2, projection="3d")

    for k, (label, trajectory) in enumerate(trajectories.items()):
        style, color = _STYLES[k % len(_STYLES)]
        positions = as_matrices(trajectory)[:, :3, 3]
        top.plot(positions[:, 0], positions[:, 2], style, color=color, label=label)
        top.plot(positions[:1, 0], positions[:1, 2], "o", color=color)
        space.plot(positions[:, 0], positions[:, 1], positions[:, 2], style, color=color, label=label)

    top.set_xlabel("x")
    top.set_ylabel("z")
    top.set_aspect("equal", adjustable="datalim")
    top.legend(loc="best")
    top.set_title("top-down")
    space.set_xlabel("x")
    space.set_ylabel("y")
    space.set_zlabel("z")
    space.set_title("3D")
    if title:
        fig.suptitle(title)
    fig.tight_layout()

    buffer = io.BytesIO()
    fig.savefig(buffer, format="png", dpi=90)
    plt.close(fig)
    return artifact_store.write_bytes(path, buffer.getvalue())


def plot_uncertainty(path: Union[str, Path], sigma: np.ndarray, title: str = "") -> Path:
    """Uncertainty raster as a heat map"""
    fig, ax = plt.subplots(figsize=(4, 4))
    image = ax.imshow(np.asarray(sigma), cmap="magma")
    fig.colorbar(image, ax=ax, fraction=0.046)
    ax.set_axis_off()
    if title:
        ax.set_title(title)
    buffer = io.BytesIO()
    fig.savefig(buffer, format="png", dpi=90)
    plt.close(fig)
    return artifact_store.write_bytes(path, buffer.getvalue())


def plot_losses(path: Union[str, Path], losses, title: str = "training loss") -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(np.asarray(losses, dtype=np.float64), linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog")
    ax.set_title(title)
    fig.tight_layout()
    buffer = io.BytesIO()
    fig.savefig(buffer, format="png", dpi=90)
    plt.close(fig)
    return artifact_store.write_bytes(path, buffer.getvalue())
