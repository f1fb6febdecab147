"""Time-frequency analysis/synthesis and feature extraction.

STFT/ISTFT with a periodic Hann window, log-magnitude spectra, MFCCs and
per-utterance mean/variance normalization.  Everything here is a pure
function of its inputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.fft

from modese.errors import ConfigError, DataError

WINDOWS = ("hann",)
VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise DataError(f"waveform must be 1-D, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise DataError("waveform contains NaN or Inf")
        if int(self.sample_rate) <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    """Analysis settings shared by every feature stream of a model."""

    sample_rate: int = 16000
    frame_len: int = 512
    hop: int = 256
    window: str = "hann"
    magnitude_floor: float = 1e-8
    n_mels: int = 40
    n_mfcc: int = 13

    def __post_init__(self):
        self.validate()

    @property
    def n_bins(self) -> int:
        return self.frame_len // 2 + 1

    def validate(self):
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.frame_len <= 0 or self.frame_len % 2:
            raise ConfigError(f"frame_len must be a positive even number, got {self.frame_len}")
        if not 0 < self.hop <= self.frame_len:
            raise ConfigError(f"hop must satisfy 0 < hop <= frame_len, got {self.hop}")
        if self.window not in WINDOWS:
            raise ConfigError(f"unknown window {self.window!r}; supported: {WINDOWS}")
        if not self.magnitude_floor > 0:
            raise ConfigError("magnitude_floor must be positive")
        if self.n_mels < 1 or not 1 <= self.n_mfcc <= self.n_mels:
            raise ConfigError(f"need 1 <= n_mfcc <= n_mels, got n_mfcc={self.n_mfcc}, n_mels={self.n_mels}")
        if not is_cola(self.window, self.frame_len, self.hop):
            raise ConfigError(
                f"window {self.window!r} with frame_len={self.frame_len}, hop={self.hop} "
                "does not satisfy the constant-overlap-add condition"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class Spectrogram:
    """One-sided STFT, shape (num_frames, frame_len // 2 + 1).

    ``length`` is the number of samples of the analysed signal, needed to
    trim the overlap-add output back to the original support.
    """

    frames: np.ndarray
    frame_len: int
    hop: int
    window: str
    sample_rate: int
    length: int

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 2 or frames.shape[1] != self.frame_len // 2 + 1:
            raise DataError(
                f"spectrogram frames must have shape (n, {self.frame_len // 2 + 1}), got {frames.shape}"
            )
        object.__setattr__(self, "frames", frames.astype(np.complex128, copy=False))

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def with_frames(self, frames: np.ndarray) -> "Spectrogram":
        return Spectrogram(frames, self.frame_len, self.hop, self.window, self.sample_rate, self.length)


def get_window(name: str, frame_len: int) -> np.ndarray:
    if name != "hann":
        raise ConfigError(f"unknown window {name!r}")
    # periodic Hann: w[L/2] == 1 and shifted copies at hop L/2 sum to exactly 1
    n = np.arange(frame_len)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / frame_len)


def is_cola(window: str, frame_len: int, hop: int, tol: float = 1e-10) -> bool:
    """True when shifted copies of the window at ``hop`` sum to a constant."""
    if frame_len % hop:
        return False
    w = get_window(window, frame_len)
    total = w.reshape(frame_len // hop, hop).sum(axis=0)
    return bool(np.ptp(total) <= tol * max(total.max(), 1.0) and total.min() > 0)


def num_frames_for(length: int, hop: int) -> int:
    return 1 + -(-length // hop)


def stft(w: Waveform, cfg: StftConfig) -> Spectrogram:
    """Centered STFT: frame ``n`` is centered on sample ``n * hop``."""
    cfg.validate()
    if w.sample_rate != cfg.sample_rate:
        raise ConfigError(f"waveform is {w.sample_rate} Hz but config expects {cfg.sample_rate} Hz")
    x = w.samples
    if x.size == 0:
        raise DataError("cannot analyse an empty waveform")
    L, hop = cfg.frame_len, cfg.hop
    n_frames = num_frames_for(x.size, hop)
    padded = np.zeros((n_frames - 1) * hop + L)
    padded[L // 2 : L // 2 + x.size] = x
    idx = np.arange(L)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * get_window(cfg.window, L)
    return Spectrogram(np.fft.rfft(frames, axis=1), L, hop, cfg.window, cfg.sample_rate, x.size)


def istft(s: Spectrogram) -> Waveform:
    """Least-squares overlap-add inverse (exact for unmodified spectrograms)."""
    L, hop = s.frame_len, s.hop
    if L % hop or not is_cola(s.window, L, hop):
        raise ConfigError(f"frame_len={L}, hop={hop} is not a COLA configuration for {s.window!r}")
    w = get_window(s.window, L)
    n_frames = s.num_frames
    total = (n_frames - 1) * hop + L if n_frames else L
    out = np.zeros(total)
    norm = np.zeros(total)
    if n_frames:
        frames = np.fft.irfft(s.frames, n=L, axis=1) * w
        for n in range(n_frames):
            out[n * hop : n * hop + L] += frames[n]
            norm[n * hop : n * hop + L] += w * w
    start = L // 2
    seg = out[start : start + s.length]
    den = norm[start : start + s.length]
    if seg.size < s.length:
        raise DataError(f"spectrogram has {n_frames} frames, too few for {s.length} samples")
    y = np.divide(seg, den, out=np.zeros_like(seg), where=den > 1e-12)
    return Waveform(y, s.sample_rate)


def log_spectrum(s: Spectrogram, magnitude_floor: float = 1e-8) -> np.ndarray:
    """ln(max(|X|, floor)) per frame and bin."""
    return np.log(np.maximum(np.abs(s.frames), magnitude_floor))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: StftConfig) -> np.ndarray:
    """Triangular HTK-mel filters over [0, fs/2], each row summing to 1.

    Shape (n_mels, n_bins).  Sum-normalisation makes a flat power spectrum
    map to equal band energies.
    """
    n_bins = cfg.n_bins
    freqs = np.linspace(0.0, cfg.sample_rate / 2.0, n_bins)
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(cfg.sample_rate / 2.0), cfg.n_mels + 2))
    fb = np.zeros((cfg.n_mels, n_bins))
    for m in range(cfg.n_mels):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = (freqs - lo) / (center - lo)
        falling = (hi - freqs) / (hi - center)
        fb[m] = np.maximum(0.0, np.minimum(rising, falling))
        if fb[m].sum() == 0.0:
            # band narrower than a bin: fall back to the nearest bin
            fb[m, np.argmin(np.abs(freqs - center))] = 1.0
    return fb / fb.sum(axis=1, keepdims=True)


def mfcc(s: Spectrogram, cfg: StftConfig) -> np.ndarray:
    """MFCCs, shape (num_frames, n_mfcc).

    The DCT-II is orthonormal and divided by sqrt(n_mels), so coefficient 0
    is the mean log band energy.
    """
    power = np.abs(s.frames) ** 2
    energies = power @ mel_filterbank(cfg).T
    log_e = np.log(np.maximum(energies, cfg.magnitude_floor**2))
    coeffs = scipy.fft.dct(log_e, type=2, norm="ortho", axis=1) / np.sqrt(cfg.n_mels)
    return coeffs[:, : cfg.n_mfcc]


def cmvn(frames) -> np.ndarray:
    """Zero-mean, unit-variance per coordinate over one utterance.

    Coordinates whose variance is below 1e-12 are only centered.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2:
        raise DataError(f"cmvn expects a (frames, dims) matrix, got shape {x.shape}")
    if x.shape[0] < 2:
        raise DataError("cmvn needs at least two frames; variance of a single frame is undefined")
    mean = x.mean(axis=0)
    var = x.var(axis=0)
    std = np.where(var < VARIANCE_FLOOR, 1.0, np.sqrt(var))
    return (x - mean) / std


@dataclass
class UtteranceFeatures:
    """Per-frame feature streams of one utterance (before context stacking)."""

    log_spec: np.ndarray
    mfcc: np.ndarray
    spectrogram: Spectrogram = field(repr=False)


def extract_features(w: Waveform, cfg: StftConfig, normalize: bool = True) -> UtteranceFeatures:
    spec = stft(w, cfg)
    logs = log_spectrum(spec, cfg.magnitude_floor)
    mf = mfcc(spec, cfg)
    if normalize:
        logs, mf = cmvn(logs), cmvn(mf)
    return UtteranceFeatures(logs, mf, spec)


def stack_context(frames: np.ndarray, context: int) -> np.ndarray:
    """Concatenate each frame with ``context`` neighbours on each side.

    Edges are padded by replicating the first/last frame.  Output row ``n``
    is ``[f(n-c), ..., f(n), ..., f(n+c)]``.
    """
    frames = np.asarray(frames)
    n = frames.shape[0]
    offsets = np.arange(-context, context + 1)
    idx = np.clip(np.arange(n)[:, None] + offsets[None, :], 0, n - 1)
    return frames[idx].reshape(n, -1)
