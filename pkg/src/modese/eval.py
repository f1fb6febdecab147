"""Objective metrics, gate analysis and enhancement evaluation reports.

Report files
------------
``metrics.csv`` has one row per (utterance, method) with columns::

    utt         utterance index in the evaluated dataset
    clean_id    clean source file
    noise_type  noise condition tag
    snr_db      input SNR of the mixture
    method      noisy | oracle | full | top1 | single | ones
    si_sdr_db   scale-invariant SDR of the output vs the clean reference
    seg_snr_db  segmental SNR (256-sample frames, clamped to [-10, 35] dB)
    lsd_db      log-spectral distance of output vs clean spectra
    mask_mse    mean squared error of the applied mask vs the IRM target
    si_sdr_gain_db  si_sdr_db minus the noisy input's si_sdr_db

``gate_probs.csv`` (gate analysis) has one row per frame: ``frame``,
``label`` (-1 when unknown) and ``p0 .. p{m-1}``.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from modese.data import Dataset
from modese.dsp import Spectrogram, Waveform, istft, stft
from modese.errors import ConfigError, DataError
from modese.mask import DEFAULT_BETA, soft_enhance
from modese.mode import ModeModel, infer_mask

SI_SDR_CLAMP = 60.0
SEG_SNR_RANGE = (-10.0, 35.0)


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def si_sdr(reference, estimate, clamp: float = SI_SDR_CLAMP) -> float:
    """Scale-invariant SDR in dB, clamped to [-clamp, clamp]."""
    ref, est = _samples(reference), _samples(estimate)
    if ref.shape != est.shape:
        raise DataError(f"length mismatch: {ref.shape} vs {est.shape}")
    ref_energy = float(ref @ ref)
    if ref_energy == 0.0:
        raise DataError("SI-SDR is undefined for an all-zero reference")
    target = (float(est @ ref) / ref_energy) * ref
    resid = est - target
    t_e, r_e = float(target @ target), float(resid @ resid)
    if r_e == 0.0:
        return clamp
    if t_e == 0.0:
        return -clamp
    return float(np.clip(10.0 * np.log10(t_e / r_e), -clamp, clamp))


def segmental_snr(reference, estimate, frame: int = 256, clamp: tuple[float, float] = SEG_SNR_RANGE) -> float:
    """Mean over non-overlapping frames of the clamped per-frame SNR.

    Frames whose reference is silent score the lower clamp.
    """
    ref, est = _samples(reference), _samples(estimate)
    if ref.shape != est.shape:
        raise DataError(f"length mismatch: {ref.shape} vs {est.shape}")
    n = len(ref) // frame
    if n == 0:
        raise DataError(f"signal shorter than one {frame}-sample frame")
    r = ref[: n * frame].reshape(n, frame)
    e = (ref - est)[: n * frame].reshape(n, frame)
    sig, err = np.sum(r * r, axis=1), np.sum(e * e, axis=1)
    lo, hi = clamp
    snr = np.full(n, hi)
    ok = (sig > 0) & (err > 0)
    snr[ok] = 10.0 * np.log10(sig[ok] / err[ok])
    snr[sig == 0] = lo
    return float(np.mean(np.clip(snr, lo, hi)))


def lsd(ref_spec, est_spec, floor: float = 1e-8) -> float:
    """Mean over frames of the RMS (over bins) difference of dB spectra."""
    a = ref_spec.frames if isinstance(ref_spec, Spectrogram) else np.asarray(ref_spec)
    b = est_spec.frames if isinstance(est_spec, Spectrogram) else np.asarray(est_spec)
    if a.shape != b.shape:
        raise DataError(f"spectrogram shapes differ: {a.shape} vs {b.shape}")
    da = 20.0 * np.log10(np.maximum(np.abs(a), floor))
    db = 20.0 * np.log10(np.maximum(np.abs(b), floor))
    return float(np.mean(np.sqrt(np.mean((da - db) ** 2, axis=-1))))


def mask_mse(estimate, target) -> float:
    estimate, target = np.asarray(estimate), np.asarray(target)
    if estimate.shape != target.shape:
        raise DataError(f"mask shapes differ: {estimate.shape} vs {target.shape}")
    return float(np.mean((estimate - target) ** 2))


def purity(assignments, labels) -> float:
    """Accuracy under the best one-to-one matching of assignment ids to labels."""
    assignments, labels = np.asarray(assignments), np.asarray(labels)
    keep = labels >= 0
    assignments, labels = assignments[keep], labels[keep]
    if labels.size == 0:
        return float("nan")
    a_ids, a_inv = np.unique(assignments, return_inverse=True)
    l_ids, l_inv = np.unique(labels, return_inverse=True)
    counts = np.zeros((len(a_ids), len(l_ids)))
    np.add.at(counts, (a_inv, l_inv), 1)
    rows, cols = linear_sum_assignment(-counts)
    return float(counts[rows, cols].sum() / labels.size)


@dataclass
class GateReport:
    gate_probs: np.ndarray  # (frames, m)
    utilization: np.ndarray  # mean probability per expert
    entropy: float  # mean per-frame entropy, nats
    purity: float | None = None
    labels: np.ndarray | None = None

    @property
    def m(self) -> int:
        return self.gate_probs.shape[1]

    @property
    def argmax_share(self) -> np.ndarray:
        """Fraction of frames on which each expert has the top probability."""
        return np.bincount(self.gate_probs.argmax(axis=1), minlength=self.m) / len(self.gate_probs)

    def to_text(self) -> str:
        lines = [f"experts: {self.m}", f"mean gate entropy: {self.entropy:.4f} nats (max {np.log(self.m):.4f})"]
        for i, (u, s) in enumerate(zip(self.utilization, self.argmax_share)):
            lines.append(f"  expert {i}: utilization {u:.3f}  argmax share {s:.3f}")
        if self.purity is not None:
            lines.append(f"gate/label purity: {self.purity:.3f}")
        return "\n".join(lines)

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        labels = self.labels if self.labels is not None else np.full(len(self.gate_probs), -1)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame", "label"] + [f"p{i}" for i in range(self.m)])
            for n, (lab, row) in enumerate(zip(labels, self.gate_probs)):
                w.writerow([n, int(lab)] + [f"{p:.6g}" for p in row])
        return path


def gate_report(probs, labels=None) -> GateReport:
    probs = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.sum(np.where(probs > 0, probs * np.log(probs), 0.0), axis=1)
    pur = None
    if labels is not None and np.any(np.asarray(labels) >= 0):
        pur = purity(probs.argmax(axis=1), labels)
    return GateReport(probs, probs.mean(axis=0), float(np.mean(ent)), pur,
                      None if labels is None else np.asarray(labels))


def gate_analysis(model: ModeModel, data: Dataset, utt: int | None = None, frame_labels=None) -> GateReport:
    """Gate probabilities for one utterance (or all frames) of ``data``."""
    if data.config_hash() != model.config_hash():
        raise ConfigError(f"features ({data.config_hash()}) were not built with the model's config "
                          f"({model.config_hash()})")
    rows = np.arange(data.num_frames) if utt is None else np.arange(data.num_frames)[data.frames_of(utt)]
    probs = model.gate.predict(data.gate_inputs(rows))
    if frame_labels is None:
        frame_labels = data.frame_labels[rows]
    return gate_report(probs, frame_labels)


MaskProvider = Callable[[Dataset, np.ndarray], np.ndarray]


def model_masks(model: ModeModel, strategy: str) -> MaskProvider:
    return lambda data, rows: infer_mask(model, data.expert_inputs(rows), data.gate_inputs(rows), strategy)


def oracle_masks(data: Dataset, rows) -> np.ndarray:
    return data.targets[rows]


def ones_masks(data: Dataset, rows) -> np.ndarray:
    return np.ones_like(data.targets[rows])


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)

    COLUMNS = ("utt", "clean_id", "noise_type", "snr_db", "method", "si_sdr_db", "seg_snr_db", "lsd_db",
               "mask_mse", "si_sdr_gain_db")
    METRICS = ("si_sdr_db", "seg_snr_db", "lsd_db", "mask_mse", "si_sdr_gain_db")

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(r["method"] for r in self.rows))

    def select(self, method: str, snr: float | None = None, noise: str | None = None) -> list[dict]:
        return [r for r in self.rows if r["method"] == method and (snr is None or r["snr_db"] == snr)
                and (noise is None or r["noise_type"] == noise)]

    def mean(self, method: str, metric: str, snr: float | None = None, noise: str | None = None) -> float:
        sel = self.select(method, snr, noise)
        if not sel:
            raise DataError(f"no rows for method={method!r} snr={snr} noise={noise}")
        return float(np.mean([r[metric] for r in sel]))

    def aggregate(self) -> dict[str, dict[str, float]]:
        return {m: {k: self.mean(m, k) for k in self.METRICS} for m in self.methods}

    def by_condition(self) -> dict[tuple[str, float, str], dict[str, float]]:
        groups = defaultdict(list)
        for r in self.rows:
            groups[(r["noise_type"], r["snr_db"], r["method"])].append(r)
        return {k: {m: float(np.mean([r[m] for r in v])) for m in self.METRICS} for k, v in sorted(groups.items())}

    def paired_delta(self, a: str, b: str, metric: str = "si_sdr_db") -> np.ndarray:
        """Per-utterance ``metric(a) - metric(b)``."""
        va = {r["utt"]: r[metric] for r in self.select(a)}
        vb = {r["utt"]: r[metric] for r in self.select(b)}
        return np.array([va[u] - vb[u] for u in sorted(va) if u in vb])

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (f"{r[k]:.6g}" if isinstance(r[k], float) else r[k]) for k in self.COLUMNS})
        return path

    def to_text(self) -> str:
        head = f"{'noise':<10} {'snr':>5} {'method':<8} {'SI-SDR':>8} {'gain':>7} {'segSNR':>8} {'LSD':>7} {'maskMSE':>9}"
        lines = [head, "-" * len(head)]
        for (noise, snr, method), v in self.by_condition().items():
            lines.append(f"{noise:<10} {snr:>5g} {method:<8} {v['si_sdr_db']:>8.2f} {v['si_sdr_gain_db']:>7.2f} "
                         f"{v['seg_snr_db']:>8.2f} {v['lsd_db']:>7.2f} {v['mask_mse']:>9.4f}")
        lines.append("-" * len(head))
        for method, v in self.aggregate().items():
            lines.append(f"{'all':<10} {'':>5} {method:<8} {v['si_sdr_db']:>8.2f} {v['si_sdr_gain_db']:>7.2f} "
                         f"{v['seg_snr_db']:>8.2f} {v['lsd_db']:>7.2f} {v['mask_mse']:>9.4f}")
        return "\n".join(lines)


def evaluate_masks(data: Dataset, providers: dict[str, MaskProvider], beta: float = DEFAULT_BETA,
                   utts: Sequence[int] | None = None) -> MetricReport:
    """Enhance every utterance with each mask provider and score it.

    The unprocessed mixture is always reported as method ``noisy``.
    """
    if data.num_frames == 0 or not data.utts:
        raise DataError("cannot evaluate an empty test set")
    report = MetricReport()
    utts = range(len(data.utts)) if utts is None else utts
    for u in utts:
        info = data.utts[u]
        clean, noisy = data.waveforms(u)
        noisy_spec = stft(noisy, data.stft)
        clean_spec = stft(clean, data.stft)
        rows = np.arange(data.frames_of(u).start, data.frames_of(u).stop)
        target = data.targets[rows]
        base = {"utt": u, "clean_id": info.clean_id, "noise_type": info.condition[0], "snr_db": info.snr_db}
        noisy_sdr = si_sdr(clean, noisy)
        outputs = {"noisy": (noisy, noisy_spec, np.ones_like(target))}
        for name, provider in providers.items():
            m = provider(data, rows)
            spec = soft_enhance(noisy_spec, m, beta)
            outputs[name] = (istft(spec), spec, m)
        for name, (wave, spec, m) in outputs.items():
            sdr = si_sdr(clean, wave)
            report.rows.append({**base, "method": name, "si_sdr_db": sdr, "seg_snr_db": segmental_snr(clean, wave),
                                "lsd_db": lsd(clean_spec, spec), "mask_mse": mask_mse(m, target),
                                "si_sdr_gain_db": sdr - noisy_sdr})
    return report


def evaluate_enhancement(model: ModeModel | None, data: Dataset, strategies: Sequence[str] = ("full", "top1"),
                         beta: float = DEFAULT_BETA, oracle: bool = True) -> MetricReport:
    """Score the model (each strategy), the oracle IRM and the noisy input."""
    providers: dict[str, MaskProvider] = {}
    if oracle:
        providers["oracle"] = oracle_masks
    if model is not None:
        if data.config_hash() != model.config_hash():
            raise ConfigError(f"test features ({data.config_hash()}) do not match the model ({model.config_hash()})")
        for s in strategies:
            providers[s] = model_masks(model, s)
    return evaluate_masks(data, providers, beta)
