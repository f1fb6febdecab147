"""Report figures rendered to files (non-interactive backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from modese.eval import MetricReport  # noqa: E402

CLASS_NAMES = {0: "silence", 1: "voiced", 2: "unvoiced"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps repeated runs byte-identical
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def _image(ax, data, sample_rate, hop, title, vmin=None, vmax=None, cmap="magma"):
    n_frames, n_bins = data.shape
    extent = (0, n_frames * hop / sample_rate, 0, sample_rate / 2000)
    im = ax.imshow(data.T, origin="lower", aspect="auto", extent=extent, vmin=vmin, vmax=vmax, cmap=cmap,
                   interpolation="nearest")
    ax.set_ylabel("kHz")
    ax.set_title(title, fontsize=9, loc="left")
    return im


def plot_expert_activity(noisy_logspec, gate_probs, expert_masks, combined_mask, path, sample_rate=16000,
                         hop=256, labels=None) -> Path:
    """Noisy log-spectrum, gate probabilities over time, each expert's mask and
    the combined mask, stacked on one time axis."""
    m = gate_probs.shape[1]
    fig, axes = plt.subplots(m + 3, 1, figsize=(8, 1.7 * (m + 3)), sharex=True)
    _image(axes[0], noisy_logspec, sample_rate, hop, "noisy log-spectrum", cmap="viridis")
    t = (np.arange(len(gate_probs)) + 0.5) * hop / sample_rate
    ax = axes[1]
    for i in range(m):
        ax.plot(t, gate_probs[:, i], lw=1, label=f"expert {i}")
    if labels is not None and np.any(np.asarray(labels) >= 0):
        for cls in np.unique(labels[labels >= 0]):
            ax.fill_between(t, 0, 1, where=labels == cls, step="mid", alpha=0.08, color=f"C{7 + int(cls) % 3}",
                            label=CLASS_NAMES.get(int(cls), str(cls)))
    ax.set_ylim(-0.02, 1.02)
    ax.set_ylabel("gate p")
    ax.legend(fontsize=6, ncol=m + 3, loc="upper right")
    ax.set_title("gate probabilities", fontsize=9, loc="left")
    for i in range(m):
        _image(axes[2 + i], expert_masks[:, i, :], sample_rate, hop, f"expert {i} mask", 0, 1)
    _image(axes[-1], combined_mask, sample_rate, hop, "combined mask", 0, 1)
    axes[-1].set_xlabel("time (s)")
    fig.tight_layout()
    return _save(fig, path)


def plot_metric_vs_snr(report: MetricReport, path, metric: str = "si_sdr_db") -> Path:
    """Mean ``metric`` against input SNR, one line per method."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    snrs = sorted({r["snr_db"] for r in report.rows})
    for method in report.methods:
        ys = [report.mean(method, metric, snr=s) if report.select(method, s) else np.nan for s in snrs]
        ax.plot(snrs, ys, marker="o", label=method)
    ax.set_xlabel("input SNR (dB)")
    ax.set_ylabel(metric)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_training_curves(histories: dict[str, list[float]], path) -> Path:
    """Per-epoch loss for each named stage."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, hist in histories.items():
        if len(hist):
            ax.plot(np.arange(1, len(hist) + 1), hist, marker=".", label=name)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
