"""Report figures. Rendered off-screen to PNG with metadata stripped so reruns are byte-identical."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 100,
}
ARCH_COLORS = {"lstm": "#1f77b4", "transformer": "#d62728"}


def save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def f1_boxplot(reports: Sequence, path: str | Path) -> Path:
    """Test F1 per fold configuration, one box per (window, architecture)."""
    groups: dict[tuple[int, str], list[float]] = defaultdict(list)
    for r in reports:
        groups[(r.window, r.arch)].append(r.f1)
    keys = sorted(groups, key=lambda k: (k[0], k[1]))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.5, 0.9 * len(keys) + 1.5), 3.2))
        if keys:
            bp = ax.boxplot([groups[k] for k in keys], patch_artist=True, widths=0.6)
            for patch, (_, arch) in zip(bp["boxes"], keys):
                patch.set_facecolor(ARCH_COLORS.get(arch, "0.7"))
                patch.set_alpha(0.6)
            ax.set_xticks(range(1, len(keys) + 1))
            ax.set_xticklabels([f"{arch}\nw={w}" for w, arch in keys])
        ax.set_ylabel("test F1")
        ax.set_ylim(0, 1.02)
        ax.set_title("Reward machine F1 across fold configurations")
        fig.tight_layout()
        return save(fig, path)


def training_curves(curves: Sequence[dict], path: str | Path, title: str = "Reward machine training") -> Path:
    epochs = [c["epoch"] for c in curves]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.plot(epochs, [c["train_loss"] for c in curves], label="train loss")
        ax.plot(epochs, [c["val_loss"] for c in curves], label="val loss")
        ax2 = ax.twinx()
        ax2.plot(epochs, [c["val_f1"] for c in curves], color="k", lw=1, label="val F1")
        ax2.set_ylim(0, 1.02)
        ax2.set_ylabel("val F1")
        ax.set_xlabel("epoch")
        ax.set_ylabel("cross-entropy")
        ax.set_title(title)
        lines = ax.get_lines() + ax2.get_lines()
        ax.legend(lines, [l.get_label() for l in lines], loc="center right")
        fig.tight_layout()
        return save(fig, path)


def reward_curve(curve: Sequence[dict], path: str | Path, smooth: int = 50) -> Path:
    """Per-episode mean graded reward with a trailing moving average."""
    ep = np.array([c["episode"] for c in curve])
    r = np.array([c["mean_reward"] for c in curve], dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.plot(ep, r, color="0.75", lw=0.6, label="episode mean")
        if len(r) >= smooth > 1:
            kernel = np.ones(smooth) / smooth
            ax.plot(ep[smooth - 1:], np.convolve(r, kernel, mode="valid"), color="C0", label=f"{smooth}-episode average")
        ax.set_xlabel("episode")
        ax.set_ylabel("reward")
        ax.set_ylim(0, 1.02)
        ax.set_title("Agent training")
        ax.legend(loc="lower right")
        fig.tight_layout()
        return save(fig, path)


def verify_bars(reports: Sequence, path: str | Path) -> Path:
    """Paces delivered and incorrect actions per heart mode."""
    modes = [r.mode for r in reports]
    x = np.arange(len(modes))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.9 * len(modes) + 1.5), 3.2))
        ax.bar(x - 0.27, [r.ap_count for r in reports], 0.27, label="AP")
        ax.bar(x, [r.vp_count for r in reports], 0.27, label="VP")
        ax.bar(x + 0.27, [r.incorrect_count for r in reports], 0.27, label="incorrect", color="C3")
        ax.set_xticks(x)
        ax.set_xticklabels(modes, rotation=20, ha="right")
        ax.set_ylabel("count")
        ax.set_title("Lockstep verification against the reference")
        ax.legend()
        fig.tight_layout()
        return save(fig, path)
