"""16-bit PCM mono WAV reading and writing."""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

from modese.dsp import Waveform
from modese.errors import DataError

PCM_SCALE = 32768.0


def read_wav(path, expected_rate: int | None = 16000) -> Waveform:
    """Read a 16-bit signed little-endian mono WAV into [-1, 1) floats.

    Files with another sample rate are rejected (no resampling is done).
    """
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            channels, width, rate = fh.getnchannels(), fh.getsampwidth(), fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: not a readable PCM WAV file ({exc})") from exc
    if channels != 1:
        raise DataError(f"{path}: expected mono audio, found {channels} channels")
    if width != 2:
        raise DataError(f"{path}: expected 16-bit PCM, found {8 * width}-bit samples")
    if expected_rate is not None and rate != expected_rate:
        raise DataError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz (resampling is not supported)")
    if len(raw) % 2:
        raise DataError(f"{path}: truncated sample data")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM_SCALE
    return Waveform(samples, rate)


def write_wav(path, w: Waveform) -> Path:
    """Write as 16-bit PCM; samples outside [-1, 1) are clipped."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ints = np.clip(np.round(w.samples * PCM_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(ints.tobytes())
    return path


def quantize(w: Waveform) -> Waveform:
    """The waveform as it would read back after :func:`write_wav`."""
    ints = np.clip(np.round(w.samples * PCM_SCALE), -32768, 32767)
    return Waveform(ints / PCM_SCALE, w.sample_rate)
