"""Ideal ratio mask targets and mask-based enhancement rules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from modese.dsp import Spectrogram
from modese.errors import ConfigError, DataError

# exp(-beta) = 10 ** (-20 / 20): at most 20 dB attenuation
DEFAULT_BETA = math.log(10.0)
DEFAULT_GAMMA = 0.5


@dataclass(frozen=True)
class EnhanceConfig:
    beta: float = DEFAULT_BETA
    gamma: float = DEFAULT_GAMMA

    def __post_init__(self):
        if not self.beta > 0:
            raise ConfigError(f"beta must be positive, got {self.beta}")
        if not 0 < self.gamma <= 1:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")

    @classmethod
    def from_attenuation_db(cls, max_attenuation_db: float, gamma: float = DEFAULT_GAMMA):
        return cls(beta=max_attenuation_db / 20.0 * math.log(10.0), gamma=gamma)


def compute_irm(clean, noise, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """IRM = (|S|^2 / (|S|^2 + |N|^2)) ** gamma, elementwise.

    Accepts single frames or whole (frames, bins) matrices of complex or
    magnitude values.  Bins where both powers are zero get 0.
    """
    if not 0 < gamma <= 1:
        raise ConfigError(f"gamma must be in (0, 1], got {gamma}")
    s_pow = np.abs(np.asarray(clean)) ** 2
    n_pow = np.abs(np.asarray(noise)) ** 2
    if s_pow.shape != n_pow.shape:
        raise DataError(f"clean and noise shapes differ: {s_pow.shape} vs {n_pow.shape}")
    total = s_pow + n_pow
    ratio = np.divide(s_pow, total, out=np.zeros_like(total), where=total > 0)
    return np.clip(ratio, 0.0, 1.0) ** gamma


def _check_mask(noisy: Spectrogram, mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != noisy.frames.shape:
        raise DataError(f"mask shape {mask.shape} does not match spectrogram {noisy.frames.shape}")
    return mask


def hard_enhance(noisy: Spectrogram, mask) -> Spectrogram:
    """X * rho, phase preserved."""
    return noisy.with_frames(noisy.frames * _check_mask(noisy, mask))


def soft_gain(mask, beta: float = DEFAULT_BETA) -> np.ndarray:
    if not beta > 0:
        raise ConfigError(f"beta must be positive, got {beta}")
    return np.exp(-(1.0 - np.asarray(mask, dtype=np.float64)) * beta)


def soft_enhance(noisy: Spectrogram, mask, beta: float = DEFAULT_BETA) -> Spectrogram:
    """X * exp(-(1 - rho) * beta); attenuation bounded by exp(-beta)."""
    mask = _check_mask(noisy, mask)
    return noisy.with_frames(noisy.frames * soft_gain(mask, beta))
