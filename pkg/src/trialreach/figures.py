"""Diagnostic figures written as standalone SVG files.

Both plots are rendered with the Agg backend and a fixed hash salt so a
rerun of the same analysis writes byte-identical files.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .similarity import GRID_POINTS, _kde_on_grid, silverman_bandwidth

TRIAL_COLOR = "#1f6fb2"
TARGET_COLOR = "#c45a27"


@dataclass
class FigureData:
    """Inputs the two diagnostic plots need from a finished run."""

    trial_ps: np.ndarray
    target_ps: np.ndarray
    smd_before: dict[str, float]
    smd_after: dict[str, float] | None
    threshold: float
    scheme: str


def _density(x: np.ndarray, grid: np.ndarray) -> np.ndarray:
    bw = silverman_bandwidth(x)
    if bw <= 0.0 or x.shape[0] < 2:
        # Point mass: draw a spike bin instead of a smooth curve.
        dens = np.zeros_like(grid)
        idx = int(np.argmin(np.abs(grid - float(np.mean(x)))))
        dens[idx] = 1.0 / (grid[1] - grid[0])
        return dens
    return _kde_on_grid(np.asarray(x, dtype=float), grid, bw, reflect01=True)


def _save(fig, path: str) -> None:
    with plt.rc_context({"svg.hashsalt": "trialreach"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_score_densities(data: FigureData, path: str) -> None:
    grid = np.linspace(0.0, 1.0, GRID_POINTS)
    fig, ax = plt.subplots(figsize=(7.0, 4.2))
    ax.plot(grid, _density(data.trial_ps, grid), color=TRIAL_COLOR, label="Trial")
    ax.fill_between(
        grid, _density(data.trial_ps, grid), color=TRIAL_COLOR, alpha=0.2
    )
    ax.plot(
        grid, _density(data.target_ps, grid), color=TARGET_COLOR, label="Target"
    )
    ax.fill_between(
        grid, _density(data.target_ps, grid), color=TARGET_COLOR, alpha=0.2
    )
    ax.set_xlabel("Sampling score")
    ax.set_ylabel("Density")
    ax.set_title(f"Sampling score overlap ({data.scheme})")
    ax.set_xlim(0.0, 1.0)
    ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)


def plot_smd_dots(data: FigureData, path: str) -> None:
    names = sorted(data.smd_before)
    before = [data.smd_before[n] for n in names]
    after = (
        [data.smd_after.get(n, np.nan) for n in names]
        if data.smd_after is not None
        else None
    )
    height = max(2.5, 0.45 * len(names) + 1.2)
    fig, ax = plt.subplots(figsize=(7.0, height))
    ypos = np.arange(len(names))[::-1]
    ax.axvline(0.0, color="0.6", linewidth=0.8)
    ax.axvline(data.threshold, color="0.75", linewidth=0.8, linestyle="--")
    ax.axvline(-data.threshold, color="0.75", linewidth=0.8, linestyle="--")
    ax.scatter(before, ypos, color=TRIAL_COLOR, label="Before weighting", zorder=3)
    if after is not None:
        ax.scatter(
            after,
            ypos,
            facecolors="none",
            edgecolors=TARGET_COLOR,
            label="After weighting",
            zorder=3,
        )
    ax.set_yticks(ypos)
    ax.set_yticklabels(names)
    ax.set_xlabel("Standardized mean difference (trial minus target)")
    ax.set_title("Covariate balance")
    ax.legend(frameon=False, loc="best")
    fig.tight_layout()
    _save(fig, path)


def render_figures(data: FigureData, out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    density_path = os.path.join(out_dir, "score_densities.svg")
    smd_path = os.path.join(out_dir, "smd_balance.svg")
    plot_score_densities(data, density_path)
    plot_smd_dots(data, smd_path)
    return [density_path, smd_path]
