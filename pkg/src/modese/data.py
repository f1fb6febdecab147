"""Corpora, SNR mixing and training-set construction.

A :class:`Dataset` keeps frame-level feature streams (normalized noisy
log-spectrum and MFCC, IRM targets, normalized clean log-spectrum) for a
list of utterances, plus the waveforms needed for enhancement metrics.
Context stacking is done on demand so that stored datasets stay small.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from modese import container
from modese.dsp import StftConfig, Waveform, cmvn, log_spectrum, mfcc, stack_context, stft
from modese.errors import ConfigError, DataError, FormatError
from modese.mask import DEFAULT_GAMMA, compute_irm
from modese.mode import feature_hash
from modese.wavio import quantize, read_wav, write_wav

log = logging.getLogger(__name__)

DATASET_KIND = "mode-dataset"
SILENCE, VOICED, UNVOICED = 0, 1, 2
CLASS_NAMES = {SILENCE: "silence", VOICED: "voiced", UNVOICED: "unvoiced"}


def power(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    return float(np.mean(x * x))


def snr_db(clean, noise) -> float:
    return 10.0 * np.log10(power(clean) / power(noise))


@dataclass
class UtterancePair:
    clean: Waveform
    noise: Waveform
    noisy: Waveform
    snr_db: float
    clean_id: str = ""
    noise_id: str = ""


def fit_noise(noise: Waveform, length: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Random crop of ``length`` samples, tiling first if the noise is short."""
    n = noise.samples
    if n.size == 0:
        raise DataError("noise waveform is empty")
    if n.size < length:
        n = np.tile(n, -(-length // n.size))
    if n.size == length:
        return n.copy()
    rng = np.random.default_rng(0) if rng is None else rng
    start = int(rng.integers(0, n.size - length + 1))
    return n[start : start + length].copy()


def mix_at_snr(clean: Waveform, noise: Waveform, snr: float, rng: np.random.Generator | None = None,
               clean_id: str = "", noise_id: str = "") -> UtterancePair:
    """Scale the noise so the full-utterance SNR equals ``snr`` dB and add it."""
    if clean.sample_rate != noise.sample_rate:
        raise DataError(f"sample rates differ: {clean.sample_rate} vs {noise.sample_rate}")
    n = fit_noise(noise, len(clean), rng)
    p_clean, p_noise = power(clean.samples), power(n)
    if p_clean == 0.0:
        raise DataError(f"clean signal {clean_id!r} is silent; SNR is undefined")
    if p_noise == 0.0:
        raise DataError(f"noise signal {noise_id!r} is silent; SNR is undefined")
    scaled = n * np.sqrt(p_clean / (p_noise * 10.0 ** (snr / 10.0)))
    sr = clean.sample_rate
    return UtterancePair(clean, Waveform(scaled, sr), Waveform(clean.samples + scaled, sr), float(snr),
                         clean_id, noise_id)


# -- corpora -----------------------------------------------------------------

@dataclass
class Utterance:
    id: str
    wave: Waveform
    labels: np.ndarray | None = None  # per STFT frame class ids, when known


def noise_type(noise_id: str) -> str:
    """Noise condition tag: the file stem up to the first '_' or '-'."""
    stem = Path(noise_id).stem
    for sep in ("_", "-"):
        stem = stem.split(sep)[0]
    return stem


def load_corpus(directory, sample_rate: int = 16000) -> list[Utterance]:
    """Load WAVs listed in ``manifest.txt`` (one relative path per line) or,
    without a manifest, every ``*.wav`` below ``directory`` in sorted order.

    Unreadable files are skipped with a warning.  A ``<stem>.labels.txt``
    sidecar, when present, supplies per-frame class labels.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"corpus directory {directory} does not exist")
    manifest = directory / "manifest.txt"
    if manifest.exists():
        rels = [ln.strip() for ln in manifest.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
        paths = [directory / r for r in rels]
    else:
        paths = sorted(directory.rglob("*.wav"))
    out = []
    for p in paths:
        try:
            w = read_wav(p, sample_rate)
        except (DataError, FileNotFoundError) as exc:
            log.warning("skipping %s: %s", p, exc)
            continue
        labels = None
        side = p.with_name(p.stem + ".labels.txt")
        if side.exists():
            labels = np.loadtxt(side, dtype=np.int64, ndmin=1)
        out.append(Utterance(str(p.relative_to(directory)), w, labels))
    return out


# -- synthetic corpus --------------------------------------------------------

@dataclass
class SynthConfig:
    num_utts: int = 40
    seed: int = 0
    sample_rate: int = 16000
    duration: float = 1.5
    hop: int = 256
    segment_frames: tuple[int, int] = (6, 16)
    noise_duration: float = 20.0


def _fade(n: int, sr: int, ms: float = 5.0) -> np.ndarray:
    env = np.ones(n)
    k = min(n // 2, int(sr * ms / 1000))
    if k:
        ramp = 0.5 - 0.5 * np.cos(np.pi * np.arange(k) / k)
        env[:k] = ramp
        env[-k:] = ramp[::-1]
    return env


def _voiced(n: int, sr: int, rng) -> np.ndarray:
    f0 = rng.uniform(100.0, 300.0)
    t = np.arange(n) / sr
    f_track = f0 * (1.0 + 0.03 * np.sin(2 * np.pi * rng.uniform(3, 6) * t))
    phase = 2 * np.pi * np.cumsum(f_track) / sr
    formants = rng.uniform([300, 900], [800, 2200])
    x = np.zeros(n)
    for h in range(1, int(4000.0 // f0) + 1):
        fh = h * f0
        gain = sum(np.exp(-0.5 * ((fh - f) / 250.0) ** 2) for f in formants) + 0.3 / h
        x += gain * np.sin(h * phase + rng.uniform(0, 2 * np.pi))
    return 0.1 * x / np.sqrt(np.mean(x**2)) * _fade(n, sr)


def _unvoiced(n: int, sr: int, rng) -> np.ndarray:
    sos = signal.butter(6, [4000.0, 0.47 * sr], btype="bandpass", fs=sr, output="sos")
    x = signal.sosfilt(sos, rng.standard_normal(n + 512))[512:]
    return 0.05 * x / np.sqrt(np.mean(x**2)) * _fade(n, sr)


def _silence(n: int, sr: int, rng) -> np.ndarray:
    return 3e-4 * rng.standard_normal(n)


def synth_utterance(cfg: SynthConfig, rng: np.random.Generator) -> tuple[Waveform, np.ndarray]:
    """Concatenated silence/voiced/unvoiced segments and per-frame labels.

    Every utterance contains each class at least once.
    """
    sr, hop = cfg.sample_rate, cfg.hop
    total = int(cfg.duration * sr)
    classes: list[int] = []
    lengths: list[int] = []
    while sum(lengths) < total or len(classes) < 3:
        for c in rng.permutation(3):
            classes.append(int(c))
            lengths.append(int(rng.integers(cfg.segment_frames[0], cfg.segment_frames[1] + 1)) * hop)
    gens = {SILENCE: _silence, VOICED: _voiced, UNVOICED: _unvoiced}
    pieces, sample_class = [], []
    for c, n in zip(classes, lengths):
        pieces.append(gens[c](n, sr, rng))
        sample_class.append(np.full(n, c))
    x = np.concatenate(pieces)
    cls = np.concatenate(sample_class)
    n_frames = 1 + -(-x.size // hop)
    centers = np.minimum(np.arange(n_frames) * hop, x.size - 1)
    return quantize(Waveform(x, sr)), cls[centers]


def synth_noise(kind: str, cfg: SynthConfig, rng: np.random.Generator) -> Waveform:
    sr = cfg.sample_rate
    n = int(cfg.noise_duration * sr)
    x = rng.standard_normal(n)
    if kind == "modulated":
        t = np.arange(n) / sr
        x = x * (1.0 + 0.8 * np.sin(2 * np.pi * rng.uniform(2.0, 6.0) * t))
    elif kind != "white":
        raise ConfigError(f"unknown synthetic noise kind {kind!r}")
    return quantize(Waveform(0.1 * x / np.sqrt(np.mean(x**2)), sr))


SYNTH_NOISES = ("white", "modulated")


@dataclass
class SynthCorpus:
    clean: list[Utterance]
    noise: list[Utterance]


def synth_corpus(cfg: SynthConfig | None = None) -> SynthCorpus:
    """Deterministic three-class synthetic speech corpus plus noises."""
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    clean = []
    for i in range(cfg.num_utts):
        w, labels = synth_utterance(cfg, rng)
        clean.append(Utterance(f"synth_{i:04d}.wav", w, labels))
    noise = [Utterance(f"{kind}_noise.wav", synth_noise(kind, cfg, rng)) for kind in SYNTH_NOISES]
    return SynthCorpus(clean, noise)


def write_corpus(corpus: SynthCorpus, out_dir) -> tuple[Path, Path]:
    """Write ``clean/`` (WAV + label sidecars) and ``noise/`` under ``out_dir``."""
    out_dir = Path(out_dir)
    clean_dir, noise_dir = out_dir / "clean", out_dir / "noise"
    for utt in corpus.clean:
        path = write_wav(clean_dir / utt.id, utt.wave)
        if utt.labels is not None:
            np.savetxt(path.with_name(path.stem + ".labels.txt"), utt.labels, fmt="%d")
    for utt in corpus.noise:
        write_wav(noise_dir / utt.id, utt.wave)
    for d, utts in ((clean_dir, corpus.clean), (noise_dir, corpus.noise)):
        (d / "manifest.txt").write_text("".join(u.id + "\n" for u in utts))
    return clean_dir, noise_dir


# -- datasets ----------------------------------------------------------------

@dataclass
class UtteranceInfo:
    clean_id: str
    noise_id: str
    snr_db: float
    num_frames: int
    num_samples: int

    @property
    def condition(self) -> tuple[str, float]:
        return noise_type(self.noise_id), self.snr_db


@dataclass
class Dataset:
    """Frame-level training/evaluation data for a list of mixed utterances.

    Per-frame arrays are concatenated over utterances; ``frame_offsets`` and
    ``sample_offsets`` (length ``len(utts) + 1``) delimit each utterance.
    """

    stft: StftConfig
    context: int
    gamma: float
    utts: list[UtteranceInfo]
    noisy_logspec: np.ndarray
    noisy_mfcc: np.ndarray
    clean_logspec: np.ndarray
    targets: np.ndarray
    frame_labels: np.ndarray
    clean_samples: np.ndarray
    noisy_samples: np.ndarray
    _ctx_index: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_frames(self) -> int:
        return self.targets.shape[0]

    def __len__(self):
        return self.num_frames

    @property
    def frame_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([u.num_frames for u in self.utts])]).astype(np.int64)

    @property
    def sample_offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum([u.num_samples for u in self.utts])]).astype(np.int64)

    @property
    def utt_index(self) -> np.ndarray:
        return np.repeat(np.arange(len(self.utts)), [u.num_frames for u in self.utts])

    def config_hash(self) -> str:
        return feature_hash(self.stft, self.context)

    @property
    def context_index(self) -> np.ndarray:
        """(frames, 2c+1) global row indices of each frame's context window."""
        if self._ctx_index is None:
            parts = []
            for start, stop in zip(self.frame_offsets[:-1], self.frame_offsets[1:]):
                parts.append(start + stack_context(np.arange(stop - start)[:, None], self.context))
            self._ctx_index = np.concatenate(parts) if parts else np.zeros((0, 2 * self.context + 1), np.int64)
        return self._ctx_index

    def expert_inputs(self, rows=None) -> np.ndarray:
        idx = self.context_index if rows is None else self.context_index[rows]
        return self.noisy_logspec[idx].reshape(idx.shape[0], -1)

    def gate_inputs(self, rows=None) -> np.ndarray:
        idx = self.context_index if rows is None else self.context_index[rows]
        return self.noisy_mfcc[idx].reshape(idx.shape[0], -1)

    def frames_of(self, u: int) -> slice:
        off = self.frame_offsets
        return slice(int(off[u]), int(off[u + 1]))

    def waveforms(self, u: int) -> tuple[Waveform, Waveform]:
        """(clean, noisy) waveforms of utterance ``u``."""
        off = self.sample_offsets
        sl = slice(int(off[u]), int(off[u + 1]))
        sr = self.stft.sample_rate
        return Waveform(self.clean_samples[sl], sr), Waveform(self.noisy_samples[sl], sr)

    def subset(self, utt_indices: Sequence[int]) -> "Dataset":
        utt_indices = list(utt_indices)
        frames = np.concatenate([np.arange(self.frames_of(u).start, self.frames_of(u).stop) for u in utt_indices]
                                or [np.zeros(0, np.int64)])
        s_off = self.sample_offsets
        samples = np.concatenate([np.arange(s_off[u], s_off[u + 1]) for u in utt_indices] or [np.zeros(0, np.int64)])
        return Dataset(self.stft, self.context, self.gamma, [self.utts[u] for u in utt_indices],
                       self.noisy_logspec[frames], self.noisy_mfcc[frames], self.clean_logspec[frames],
                       self.targets[frames], self.frame_labels[frames], self.clean_samples[samples],
                       self.noisy_samples[samples])

    def split(self, val_fraction: float = 0.1, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Seeded split by utterance: (train, validation)."""
        n = len(self.utts)
        if n < 2:
            raise DataError("need at least two utterances to split")
        order = np.random.default_rng(seed).permutation(n)
        n_val = min(n - 1, max(1, int(round(val_fraction * n))))
        return self.subset(sorted(order[n_val:])), self.subset(sorted(order[:n_val]))

    def save(self, path) -> Path:
        meta = {
            "stft": self.stft.to_dict(), "context": self.context, "gamma": self.gamma,
            "config_hash": self.config_hash(),
            "utts": [vars(u) for u in self.utts],
        }
        arrays = {name: getattr(self, name) for name in (
            "noisy_logspec", "noisy_mfcc", "clean_logspec", "targets", "frame_labels",
            "clean_samples", "noisy_samples")}
        return container.write_container(path, DATASET_KIND, meta, arrays)

    @classmethod
    def load(cls, path) -> "Dataset":
        meta, arrays = container.read_container(path, DATASET_KIND)
        try:
            ds = cls(StftConfig(**meta["stft"]), int(meta["context"]), float(meta["gamma"]),
                     [UtteranceInfo(**u) for u in meta["utts"]], **arrays)
        except (KeyError, TypeError) as exc:
            raise FormatError(f"{path}: inconsistent dataset description ({exc})") from exc
        if ds.config_hash() != meta["config_hash"]:
            raise FormatError(f"{path}: stored config hash does not match its feature config")
        return ds


def featurize_pair(pair: UtterancePair, cfg: StftConfig, gamma: float = DEFAULT_GAMMA) -> dict:
    s_clean, s_noise, s_noisy = stft(pair.clean, cfg), stft(pair.noise, cfg), stft(pair.noisy, cfg)
    return {
        "noisy_logspec": cmvn(log_spectrum(s_noisy, cfg.magnitude_floor)),
        "noisy_mfcc": cmvn(mfcc(s_noisy, cfg)),
        "clean_logspec": cmvn(log_spectrum(s_clean, cfg.magnitude_floor)),
        "targets": compute_irm(s_clean.frames, s_noise.frames, gamma),
    }


def build_dataset(clean_corpus: Sequence[Utterance], noise_corpus: Sequence[Utterance], snr_list: Sequence[float],
                  cfg: StftConfig, context: int = 4, seed: int = 0, gamma: float = DEFAULT_GAMMA,
                  all_conditions: bool = False) -> Dataset:
    """Mix, analyse and normalise a corpus into a :class:`Dataset`.

    By default each clean utterance is mixed once with a seeded random
    choice of noise and SNR; ``all_conditions`` mixes it with every
    (noise, SNR) combination instead.
    """
    if not clean_corpus or not noise_corpus or not len(snr_list):
        raise DataError("clean corpus, noise corpus and SNR list must all be non-empty")
    rng = np.random.default_rng(seed)
    utts, streams, labels, cleans, noisys = [], [], [], [], []
    for utt in clean_corpus:
        if utt.wave.sample_rate != cfg.sample_rate:
            raise ConfigError(f"{utt.id}: {utt.wave.sample_rate} Hz does not match config {cfg.sample_rate} Hz")
        if all_conditions:
            conditions = [(nz, s) for nz in noise_corpus for s in snr_list]
        else:
            conditions = [(noise_corpus[int(rng.integers(len(noise_corpus)))],
                           float(snr_list[int(rng.integers(len(snr_list)))]))]
        for nz, snr in conditions:
            try:
                pair = mix_at_snr(utt.wave, nz.wave, snr, rng, utt.id, nz.id)
                feats = featurize_pair(pair, cfg, gamma)
            except DataError as exc:
                log.warning("skipping %s + %s: %s", utt.id, nz.id, exc)
                continue
            n_frames = feats["targets"].shape[0]
            lab = np.full(n_frames, -1, np.int64)
            if utt.labels is not None:
                if len(utt.labels) == n_frames:
                    lab = np.asarray(utt.labels, np.int64)
                else:
                    log.warning("%s: %d labels for %d frames; ignoring labels", utt.id, len(utt.labels), n_frames)
            utts.append(UtteranceInfo(utt.id, nz.id, float(snr), n_frames, len(utt.wave)))
            streams.append(feats)
            labels.append(lab)
            cleans.append(pair.clean.samples)
            noisys.append(pair.noisy.samples)
    if not utts:
        raise DataError("no usable utterances; dataset would be empty")
    cat = {k: np.concatenate([s[k] for s in streams]) for k in streams[0]}
    return Dataset(cfg, context, gamma, utts, cat["noisy_logspec"], cat["noisy_mfcc"], cat["clean_logspec"],
                   cat["targets"], np.concatenate(labels), np.concatenate(cleans), np.concatenate(noisys))
