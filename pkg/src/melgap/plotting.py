"""Figure rendering for reports. Everything writes PNG files; nothing is shown."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def _show_mel(ax, values, title, gap=None):
    ax.imshow(values, origin="lower", aspect="auto", cmap="magma", vmin=-1, vmax=1, interpolation="nearest")
    if gap is not None and gap.frame_len:
        ax.axvline(gap.frame_start - 0.5, color="lime", lw=0.8)
    ax.set_title(title)
    ax.set_xlabel("frame")


def plot_mels(panels, path, gap=None, suptitle=None):
    """One row of normalized mel images; ``panels`` is a list of (title, array)."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 2.6), squeeze=False)
        for ax, (title, values) in zip(axes[0], panels):
            _show_mel(ax, values, title, gap)
        axes[0][0].set_ylabel("mel channel")
        if suptitle:
            fig.suptitle(suptitle)
        return _save(fig, path)


def plot_gap_sweep(aggregates, path, reference=None):
    """Mean feature MSE (and MOS, when scored) against gap size."""
    packets = sorted(aggregates)
    with plt.rc_context(STYLE):
        has_mos = any(aggregates[p].get("mos") is not None for p in packets)
        fig, axes = plt.subplots(1, 2 if has_mos else 1, figsize=(7 if has_mos else 3.6, 2.8), squeeze=False)
        ax = axes[0][0]
        ax.plot(packets, [aggregates[p]["vgg_mse"] for p in packets], "o-", label="this run")
        if reference:
            ax2 = ax.twinx()
            ax2.plot(reference["packets"], reference["vgg19_loss"], "s--", color="grey", label="reference")
            ax2.set_ylabel("reference feature loss", color="grey")
        ax.set_xlabel("lost packets (x 40 ms)")
        ax.set_ylabel("feature MSE")
        if has_mos:
            ax = axes[0][1]
            ax.plot(packets, [aggregates[p]["mos"] for p in packets], "o-", label="this run")
            if reference:
                ax.plot(reference["packets"], reference["mos"], "s--", color="grey", label="reference")
            ax.set_xlabel("lost packets (x 40 ms)")
            ax.set_ylabel("MOS")
            ax.legend()
        return _save(fig, path)


def plot_loss_curves(records, path, window=25):
    """Per-step generator/discriminator losses with a running mean."""
    keys = [k for k in ("rec", "adv", "chunk", "d_loss") if any(r.get(k) for r in records)]
    steps = np.array([r["step"] for r in records])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(keys), figsize=(2.8 * len(keys), 2.4), squeeze=False)
        for ax, key in zip(axes[0], keys):
            y = np.array([r[key] for r in records], dtype=float)
            ax.plot(steps, y, lw=0.4, alpha=0.5)
            if len(y) >= window:
                smooth = np.convolve(y, np.ones(window) / window, mode="valid")
                ax.plot(steps[window - 1:], smooth, lw=1.2)
            ax.set_title(key)
            ax.set_xlabel("step")
        return _save(fig, path)


def plot_waveforms(before, after, sample_rate, path, gap_start=None):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 1, figsize=(6.5, 3.2), sharex=True)
        for ax, (title, x) in zip(axes, (("input", before), ("filled", after))):
            ax.plot(np.arange(x.size) / sample_rate, x, lw=0.4)
            if gap_start is not None:
                ax.axvline(gap_start / sample_rate, color="tab:green", lw=0.8)
            ax.set_title(title)
        axes[-1].set_xlabel("time (s)")
        return _save(fig, path)
