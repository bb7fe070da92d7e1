"""WAV ingest/emit for the pipeline: 48 kHz PCM, 16-bit int or 32-bit float.

Channel 0 is the left ear, channel 1 the right ear.  The optional noise
reference is a mono file at the same rate.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 48000


class WavFormatError(ValueError):
    """Input file violates the 48 kHz / channel-count / dtype contract."""


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float64) / 2147483648.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float64)
    raise WavFormatError(f"unsupported WAV sample format {data.dtype}")


def read_stereo(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Read a 48 kHz stereo WAV, returning (left, right) float arrays in [-1, 1]."""
    rate, data = wavfile.read(str(path))
    if rate != SAMPLE_RATE:
        raise WavFormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
    if data.ndim != 2 or data.shape[1] != 2:
        raise WavFormatError(f"{path}: expected 2 channels")
    samples = _to_float(data)
    if not np.all(np.isfinite(samples)):
        raise WavFormatError(f"{path}: non-finite samples")
    return samples[:, 0].copy(), samples[:, 1].copy()


def read_mono(path: str | Path) -> np.ndarray:
    """Read a 48 kHz mono WAV (noise reference track)."""
    rate, data = wavfile.read(str(path))
    if rate != SAMPLE_RATE:
        raise WavFormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
    if data.ndim != 1:
        raise WavFormatError(f"{path}: expected 1 channel")
    samples = _to_float(data)
    if not np.all(np.isfinite(samples)):
        raise WavFormatError(f"{path}: non-finite samples")
    return samples


def write_stereo(path: str | Path, left: np.ndarray, right: np.ndarray) -> None:
    """Write a float32 stereo WAV at 48 kHz."""
    data = np.stack([left, right], axis=1).astype(np.float32)
    wavfile.write(str(path), SAMPLE_RATE, data)


def write_mono(path: str | Path, samples: np.ndarray) -> None:
    wavfile.write(str(path), SAMPLE_RATE, samples.astype(np.float32))
