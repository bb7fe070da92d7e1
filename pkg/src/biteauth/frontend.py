"""Air-noise removal frontend.

Turns a raw stereo capture into a denoised, band-limited signal:
50 ms frames at a 10 ms hop, per-frame loudness normalization to a target
RMS level, power spectral subtraction against a noise profile, and a
zero-phase Butterworth band-pass (100 Hz - 2.5 kHz by default).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, sosfiltfilt

SAMPLE_RATE = 48000
FRAME_MS = 50.0
HOP_MS = 10.0
FRAME_LEN = int(SAMPLE_RATE * FRAME_MS / 1000.0)   # 2400
HOP_LEN = int(SAMPLE_RATE * HOP_MS / 1000.0)       # 480


class FrontendError(ValueError):
    pass


@dataclass
class StereoCapture:
    """Raw two-channel 48 kHz recording; optional mono noise reference."""
    left: np.ndarray
    right: np.ndarray
    noise_ref: np.ndarray | None = None
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=np.float64)
        self.right = np.asarray(self.right, dtype=np.float64)
        if self.sample_rate_hz != SAMPLE_RATE:
            raise FrontendError(f"sample rate must be {SAMPLE_RATE} Hz")
        if self.left.shape != self.right.shape or self.left.ndim != 1:
            raise FrontendError("left/right must be 1-D and equal length")
        if not (np.all(np.isfinite(self.left)) and np.all(np.isfinite(self.right))):
            raise FrontendError("samples must be finite")
        if self.noise_ref is not None:
            self.noise_ref = np.asarray(self.noise_ref, dtype=np.float64)


@dataclass
class PcmFrame:
    """One 50 ms single-channel frame."""
    samples: np.ndarray
    start_time_s: float
    channel: str                      # "left" | "right"
    sample_rate_hz: int = SAMPLE_RATE
    silent: bool = False              # set when loudness normalization skips a zero frame

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)


@dataclass
class NoiseProfile:
    """Per-bin noise amplitude estimate D(k), length fft_size//2 + 1."""
    magnitudes: np.ndarray
    fft_size: int

    def __post_init__(self):
        self.magnitudes = np.asarray(self.magnitudes, dtype=np.float64)
        if self.magnitudes.shape != (self.fft_size // 2 + 1,):
            raise FrontendError("noise profile length must be fft_size//2 + 1")
        if np.any(self.magnitudes < 0):
            raise FrontendError("noise magnitudes must be non-negative")

    @classmethod
    def zero(cls, fft_size: int) -> "NoiseProfile":
        return cls(np.zeros(fft_size // 2 + 1), fft_size)


def _frame_matrix(x: np.ndarray) -> np.ndarray:
    """(n_frames, FRAME_LEN) view tiling x with the 50 ms / 10 ms grid."""
    n = (len(x) - FRAME_LEN) // HOP_LEN + 1 if len(x) >= FRAME_LEN else 0
    if n <= 0:
        return np.empty((0, FRAME_LEN))
    idx = np.arange(FRAME_LEN)[None, :] + HOP_LEN * np.arange(n)[:, None]
    return x[idx]


def frame_stream(capture: StereoCapture) -> list[tuple[PcmFrame, PcmFrame]]:
    """Tile the capture with time-aligned 50 ms frame pairs at a 10 ms hop.

    The trailing partial window is dropped; a capture shorter than one
    window yields an empty list.
    """
    lm = _frame_matrix(capture.left)
    rm = _frame_matrix(capture.right)
    out = []
    for i in range(lm.shape[0]):
        t = i * HOP_MS / 1000.0
        out.append((PcmFrame(lm[i].copy(), t, "left"),
                    PcmFrame(rm[i].copy(), t, "right")))
    return out


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def normalize_loudness(frame: PcmFrame, target_db: float = -24.0) -> PcmFrame:
    """Pure-gain rescale so the frame RMS sits at target_db dBFS.

    All-zero frames come back unchanged with the silent flag set (no
    division by zero).
    """
    rms = _rms(frame.samples)
    if rms == 0.0:
        return PcmFrame(frame.samples.copy(), frame.start_time_s,
                        frame.channel, frame.sample_rate_hz, silent=True)
    gain = 10.0 ** (target_db / 20.0) / rms
    return PcmFrame(frame.samples * gain, frame.start_time_s,
                    frame.channel, frame.sample_rate_hz)


def estimate_noise_profile(noise_samples: np.ndarray, fft_size: int) -> NoiseProfile:
    """Mean per-bin magnitude spectrum over consecutive noise-only windows.

    Windows are Hann-weighted; magnitudes are rescaled by
    sqrt(N / sum(w^2)) so the estimate matches the unwindowed-transform
    scale used by spectral_subtract.
    """
    noise_samples = np.asarray(noise_samples, dtype=np.float64)
    if len(noise_samples) < fft_size:
        raise FrontendError("noise reference shorter than one FFT window")
    n = len(noise_samples) // fft_size
    chunks = noise_samples[: n * fft_size].reshape(n, fft_size)
    w = np.hanning(fft_size)
    comp = np.sqrt(fft_size / np.sum(w * w))
    mags = np.abs(np.fft.rfft(chunks * w, axis=1)) * comp
    return NoiseProfile(mags.mean(axis=0), fft_size)


def _subtract_spectrum(x: np.ndarray, noise: NoiseProfile,
                       alpha: float, beta: float) -> np.ndarray:
    """Power spectral subtraction of one or more rows, phase preserved."""
    spec = np.fft.rfft(x, n=noise.fft_size, axis=-1)
    power = np.abs(spec) ** 2
    d = noise.magnitudes
    # Floor at beta*D; the over-subtracted branch is power - alpha*D.
    out_power = np.maximum(power - alpha * d, beta * d)
    mag = np.sqrt(out_power)
    phase = np.where(np.abs(spec) > 0, spec / np.maximum(np.abs(spec), 1e-300), 1.0)
    y = np.fft.irfft(mag * phase, n=noise.fft_size, axis=-1)
    return y[..., : x.shape[-1]]


def spectral_subtract(frame: PcmFrame, noise: NoiseProfile,
                      alpha: float = 4.0, beta: float = 0.01) -> PcmFrame:
    """Eq-style power subtraction: out power = |X|^2 - alpha*D above the
    floor, beta*D below it; input phase reused."""
    if alpha < 1.0 or not (0.0 < beta < 1.0):
        raise FrontendError("require alpha >= 1 and 0 < beta < 1")
    y = _subtract_spectrum(frame.samples, noise, alpha, beta)
    return PcmFrame(y, frame.start_time_s, frame.channel,
                    frame.sample_rate_hz, frame.silent)


def _bandpass_sos(order: int, low_hz: float, high_hz: float,
                  fs: int = SAMPLE_RATE):
    return butter(order, [low_hz, high_hz], btype="bandpass", fs=fs,
                  output="sos")


def bandpass_100_2500(frame: PcmFrame, order: int = 4,
                      low_hz: float = 100.0, high_hz: float = 2500.0) -> PcmFrame:
    """Zero-phase (forward-backward) Butterworth band-pass of one frame."""
    sos = _bandpass_sos(order, low_hz, high_hz, frame.sample_rate_hz)
    y = sosfiltfilt(sos, frame.samples)
    return PcmFrame(y, frame.start_time_s, frame.channel,
                    frame.sample_rate_hz, frame.silent)


# ---------------------------------------------------------------------------
# capture-level pipeline

def noise_profile_from_capture(capture: StereoCapture, cfg) -> NoiseProfile:
    """Noise profile from the explicit reference track when present,
    otherwise from the capture's leading noise-only prefix."""
    fft_size = cfg.frontend_fft_size
    if capture.noise_ref is not None:
        ref = capture.noise_ref
    else:
        prefix = int(SAMPLE_RATE * cfg.frontend_noise_prefix_ms / 1000.0)
        ref = 0.5 * (capture.left[:prefix] + capture.right[:prefix])
    if len(ref) < fft_size:
        return NoiseProfile.zero(fft_size)
    # Normalize the reference to the same loudness target as the frames so
    # the profile scale matches the post-normalization spectra (and the
    # whole pipeline stays invariant to input amplitude scaling).
    rms = _rms(ref)
    if rms == 0.0:
        return NoiseProfile.zero(fft_size)
    ref = ref * (10.0 ** (cfg.frontend_target_db / 20.0) / rms)
    return estimate_noise_profile(ref, fft_size)


def _denoise_channel(x: np.ndarray, noise: NoiseProfile, cfg) -> np.ndarray:
    """Frame-wise normalize + subtract, Hann overlap-add, then one
    zero-phase band-pass over the reassembled stream."""
    frames = _frame_matrix(x)
    out = np.zeros_like(x)
    if frames.shape[0] == 0:
        return out
    # One gain for the whole stream, anchored to its noise floor (a low
    # percentile of the frame RMS distribution).  Per-frame gains would
    # boost frames holding only part of an event by wildly different
    # amounts, and the overlap-add of unequally scaled copies distorts the
    # waveform fine structure the downstream features depend on.  Anchoring
    # to the noise floor also lines the stream up with the noise profile,
    # which is normalized to the same loudness target.
    rms = np.sqrt(np.mean(frames ** 2, axis=1))
    target = 10.0 ** (cfg.frontend_target_db / 20.0)
    live = rms[rms > 0]
    if len(live) == 0:
        return out
    frames = frames * (target / np.percentile(live, 10.0))
    frames = _subtract_spectrum(frames, noise,
                                cfg.frontend_alpha, cfg.frontend_beta)
    # Hann overlap-add; hop divides the window so the weight sum is flat
    # away from the edges, and we renormalize by the accumulated weight.
    w = np.hanning(FRAME_LEN)
    wsum = np.zeros_like(x)
    for i in range(frames.shape[0]):
        s = i * HOP_LEN
        out[s: s + FRAME_LEN] += frames[i] * w
        wsum[s: s + FRAME_LEN] += w
    covered = wsum > 1e-6
    out[covered] /= wsum[covered]
    sos = _bandpass_sos(cfg.frontend_filter_order, cfg.frontend_band_low_hz,
                        cfg.frontend_band_high_hz)
    if np.count_nonzero(covered) > 50:
        out = sosfiltfilt(sos, out)
    return out


def denoise_capture(capture: StereoCapture, cfg,
                    noise: NoiseProfile | None = None
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Full frontend over a capture; returns the denoised (left, right)
    streams aligned with the input sample grid."""
    if noise is None:
        noise = NoiseProfile.zero(cfg.frontend_fft_size)
    return (_denoise_channel(capture.left, noise, cfg),
            _denoise_channel(capture.right, noise, cfg))
