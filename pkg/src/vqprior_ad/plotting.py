"""Static four-panel figure: series, per-band scores, final score, counterfactual overlay."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def plot_detection(
    path: str | Path,
    values: np.ndarray,
    interval: tuple[int, int] | None,
    timesteps: np.ndarray,
    bands: np.ndarray,
    final: np.ndarray,
    threshold: float | None = None,
    counterfactuals: list[tuple[np.ndarray, np.ndarray, np.ndarray]] | None = None,
    title: str = "",
) -> int:
    """Write the figure and return how many panels it has.

    ``bands`` is ``(H, L)`` aligned with ``timesteps``; each counterfactual is
    ``(timesteps, original, resampled)``. Without counterfactuals the last
    panel is left out.
    """
    counterfactuals = counterfactuals or []
    n_rows = 4 if counterfactuals else 3
    fig, axes = plt.subplots(n_rows, 1, figsize=(12, 2.4 * n_rows), sharex=True)
    t_all = np.arange(len(values))

    ax = axes[0]
    ax.plot(t_all, values, lw=0.7, color="k")
    if interval is not None:
        # the edge keeps single-point labels visible
        ax.axvspan(interval[0], interval[1] + 1, facecolor="tab:red", edgecolor="tab:red", alpha=0.3, lw=1.0,
                   label="labeled anomaly")
        ax.legend(loc="upper right", fontsize=8)
    ax.set_ylabel("x")
    if title:
        ax.set_title(title)

    ax = axes[1]
    vmax = threshold if threshold is not None else float(np.max(bands))
    extent = [timesteps[0], timesteps[-1] + 1, bands.shape[0] - 0.5, -0.5]
    im = ax.imshow(np.minimum(bands, vmax), aspect="auto", extent=extent, cmap="viridis", vmin=0, vmax=vmax,
                   interpolation="nearest")
    ax.set_ylabel("band")
    # inset colorbar: stealing width from this axis would misalign it with the shared time axis
    fig.colorbar(im, cax=ax.inset_axes([1.005, 0.0, 0.01, 1.0]))

    ax = axes[2]
    ax.plot(timesteps, final, lw=0.8, color="tab:blue")
    if threshold is not None:
        ax.axhline(threshold, color="tab:red", ls="--", lw=0.8, label="threshold")
        ax.legend(loc="upper right", fontsize=8)
    ax.set_ylabel("a_final")

    if counterfactuals:
        ax = axes[3]
        for i, (t, orig, cf) in enumerate(counterfactuals):
            ax.plot(t, orig, color="k", lw=0.7, label="original" if i == 0 else None)
            ax.plot(t, cf, color="tab:green", lw=0.9, label="counterfactual" if i == 0 else None)
        ax.legend(loc="upper right", fontsize=8)
        ax.set_ylabel("x")
    axes[-1].set_xlabel("timestep")
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated renders byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None} if path.suffix == ".png" else None)
    plt.close(fig)
    return n_rows
