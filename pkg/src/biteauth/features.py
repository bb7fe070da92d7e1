"""The four biometric features extracted from each occlusion candidate.

* teeth structure: sign-partitioned cepstrum -> sonorant / fricative
  log-spectral envelopes, resampled to a fixed length
* bone structure: zero-crossing spacing sequences per channel (dispersion)
* location: per-band inter-ear delay from normalized cross-correlation
* acoustic: synchrosqueezed scalogram of both channels as a two-channel
  grayscale image
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, correlate, correlation_lags, sosfiltfilt

from .detect import UnifiedEvent

SAMPLE_RATE = 48000
BAND_LOW_HZ = 100.0
BAND_HIGH_HZ = 2500.0


class FeatureError(ValueError):
    pass


@dataclass
class TeethStructureFeature:
    """Sonorant/fricative log-spectral envelopes (length 64) per channel."""
    sonorant_left: np.ndarray
    fricative_left: np.ndarray
    sonorant_right: np.ndarray
    fricative_right: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.concatenate([self.sonorant_left, self.fricative_left,
                               self.sonorant_right, self.fricative_right])


@dataclass
class BoneStructureFeature:
    """Zero-crossing spacing sequences (seconds) per channel."""
    zs_left: np.ndarray
    zs_right: np.ndarray


@dataclass
class LocationFeature:
    """Per-band peak lag of the normalized cross-correlation, in seconds.

    Positive lag means the left channel leads (sound arrived left first).
    """
    rb: np.ndarray
    confident: np.ndarray = field(default=None)

    def __post_init__(self):
        self.rb = np.asarray(self.rb, dtype=np.float64)
        if self.rb.shape != (5,):
            raise FeatureError("location feature must have 5 band lags")
        if self.confident is None:
            self.confident = np.ones(5, dtype=bool)


@dataclass
class AcousticFeature:
    """Two-channel 64x64 grayscale image in [0, 1] (0 = left, 1 = right)."""
    image: np.ndarray

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if self.image.ndim != 3 or self.image.shape[0] != 2:
            raise FeatureError("acoustic image must be (2, H, W)")


@dataclass
class FeatureBundle:
    teeth: TeethStructureFeature
    bone: BoneStructureFeature
    location: LocationFeature
    acoustic: AcousticFeature
    start_s: float = 0.0
    end_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "start_s": self.start_s,
            "end_s": self.end_s,
            "teeth": {
                "sonorant_left": self.teeth.sonorant_left.tolist(),
                "fricative_left": self.teeth.fricative_left.tolist(),
                "sonorant_right": self.teeth.sonorant_right.tolist(),
                "fricative_right": self.teeth.fricative_right.tolist(),
            },
            "bone": {
                "zs_left": self.bone.zs_left.tolist(),
                "zs_right": self.bone.zs_right.tolist(),
            },
            "location": {
                "rb": self.location.rb.tolist(),
                "confident": self.location.confident.tolist(),
            },
            "acoustic": {"image": self.acoustic.image.tolist()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureBundle":
        return cls(
            teeth=TeethStructureFeature(
                np.array(d["teeth"]["sonorant_left"]),
                np.array(d["teeth"]["fricative_left"]),
                np.array(d["teeth"]["sonorant_right"]),
                np.array(d["teeth"]["fricative_right"])),
            bone=BoneStructureFeature(np.array(d["bone"]["zs_left"]),
                                      np.array(d["bone"]["zs_right"])),
            location=LocationFeature(np.array(d["location"]["rb"]),
                                     np.array(d["location"]["confident"])),
            acoustic=AcousticFeature(np.array(d["acoustic"]["image"])),
            start_s=d["start_s"], end_s=d["end_s"])


# ---------------------------------------------------------------------------
# teeth structure

def _resample(x: np.ndarray, out_len: int) -> np.ndarray:
    if len(x) == out_len:
        return x.copy()
    src = np.linspace(0.0, 1.0, len(x))
    dst = np.linspace(0.0, 1.0, out_len)
    return np.interp(dst, src, x)


def cepstral_split(event_channel: np.ndarray,
                   out_len: int = 64) -> tuple[np.ndarray, np.ndarray]:
    """Sign-partition the real cepstrum and return the sonorant and
    fricative log-spectral envelopes, each resampled to out_len.

    The partition is linear, so the two envelopes sum to the full
    log-spectrum exactly.
    """
    x = np.asarray(event_channel, dtype=np.float64)
    if len(x) < 64:
        raise FeatureError("event too short for cepstral analysis")
    peak = np.max(np.abs(x))
    if peak == 0.0:
        raise FeatureError("all-zero event")
    spec = np.fft.rfft(x)
    # floor the magnitude well above numerical noise: deep spectral valleys
    # carry no identity information but their log jitters wildly between
    # events, which would dominate the envelope
    mag = np.maximum(np.abs(spec), 1e-3 * np.max(np.abs(spec)))
    log_spec = np.log(mag)
    cep = np.fft.irfft(log_spec, n=len(x))
    cep_pos = np.where(cep > 0, cep, 0.0)
    cep_neg = cep - cep_pos
    sonorant = np.fft.rfft(cep_pos, n=len(x)).real
    fricative = np.fft.rfft(cep_neg, n=len(x)).real
    return _resample(sonorant, out_len), _resample(fricative, out_len)


# ---------------------------------------------------------------------------
# bone structure

def zero_crossing_sequence(event_channel: np.ndarray,
                           sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Spacings (seconds) between consecutive sign-change instants, with
    linear interpolation for sub-sample crossing times.

    Leading/trailing samples below 5% of the peak are trimmed first:
    crossings there belong to noise or filter edge ripple, not the event.
    """
    x = np.asarray(event_channel, dtype=np.float64)
    mag = np.abs(x)
    keep = np.nonzero(mag >= 0.05 * mag.max())[0]
    if len(keep):
        x = x[keep[0]: keep[-1] + 1]
    idx = np.nonzero(x[:-1] * x[1:] < 0)[0]
    if len(idx) < 2:
        raise FeatureError("fewer than 2 zero crossings")
    frac = x[idx] / (x[idx] - x[idx + 1])
    times = (idx + frac) / sample_rate
    spacings = np.diff(times)
    # the outermost cycles straddle the onset/offset transients, where
    # instantaneous frequency is ill-defined; trim a fixed fraction so the
    # kept window is consistent across events of different lengths
    if len(spacings) > 8:
        # asymmetric: the attack ramp corrupts the first cycle or two, while
        # the decaying tail is already amplitude-gated and carries the most
        # user-specific spacing structure, so keep all but its last cycle
        k_front = max(2, int(round(0.03 * len(spacings))))
        spacings = spacings[k_front:-1]
    return spacings


# ---------------------------------------------------------------------------
# location

def _band_edges(num_bands: int = 5) -> list[tuple[float, float]]:
    edges = np.linspace(BAND_LOW_HZ, BAND_HIGH_HZ, num_bands + 1)
    return [(float(edges[i]), float(edges[i + 1])) for i in range(num_bands)]


def banded_delay(left: np.ndarray, right: np.ndarray,
                 sample_rate: int = SAMPLE_RATE) -> LocationFeature:
    """Peak lag of the normalized cross-correlation in 5 equal-width bands
    of 100 Hz - 2.5 kHz, with parabolic sub-sample interpolation.

    Positive lag = left leads.  An all-zero band records lag 0 with the
    confidence flag cleared.
    """
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.shape != right.shape:
        raise FeatureError("channel lengths differ")
    n = len(left)
    lags = np.zeros(5)
    confident = np.ones(5, dtype=bool)
    lag_grid = correlation_lags(n, n, mode="full")
    e_tot_l = float(np.sum(left * left))
    e_tot_r = float(np.sum(right * right))
    for b, (lo, hi) in enumerate(_band_edges()):
        sos = butter(2, [lo, hi], btype="bandpass", fs=sample_rate,
                     output="sos")
        lb = sosfiltfilt(sos, left)
        rb = sosfiltfilt(sos, right)
        el, er = np.sum(lb * lb), np.sum(rb * rb)
        # a band with almost no event energy yields a meaningless peak; its
        # lag is recorded as 0 so templates stay stable across events
        if el <= 0.01 * e_tot_l or er <= 0.01 * e_tot_r:
            confident[b] = False
            continue
        # correlate(right, left) peaks at +d when the right channel is the
        # left delayed by d samples, i.e. positive when left leads.
        c = correlate(rb, lb, mode="full") / np.sqrt(el * er)
        k = int(np.argmax(c))
        if c[k] < 0.5:
            confident[b] = False
            continue
        delta = 0.0
        if 0 < k < len(c) - 1:
            y0, y1, y2 = c[k - 1], c[k], c[k + 1]
            denom = y0 - 2 * y1 + y2
            if denom != 0.0:
                delta = 0.5 * (y0 - y2) / denom
                delta = float(np.clip(delta, -1.0, 1.0))
        lags[b] = (lag_grid[k] + delta) / sample_rate
    return LocationFeature(lags, confident)


# ---------------------------------------------------------------------------
# acoustic (CWT -> SWT -> image)

MORLET_W0 = 6.0


def wavelet_scales(num_scales: int = 64, w0: float = MORLET_W0,
                   sample_rate: int = SAMPLE_RATE,
                   f_lo: float = BAND_LOW_HZ,
                   f_hi: float = BAND_HIGH_HZ) -> np.ndarray:
    """Log-spaced scales (samples), ascending, covering f_lo..f_hi."""
    freqs = np.geomspace(f_hi, f_lo, num_scales)   # descending freq
    return w0 * sample_rate / (2.0 * np.pi * freqs)


def cwt(event_channel: np.ndarray, scales: np.ndarray | None = None,
        w0: float = MORLET_W0,
        sample_rate: int = SAMPLE_RATE) -> tuple[np.ndarray, np.ndarray]:
    """Continuous wavelet transform with an analytic Morlet wavelet.

    Returns (W, scales) with W of shape (num_scales, len(x)), complex.
    """
    x = np.asarray(event_channel, dtype=np.float64)
    if len(x) < 64:
        raise FeatureError("event too short for wavelet analysis")
    if scales is None:
        scales = wavelet_scales(sample_rate=sample_rate, w0=w0)
    n = len(x)
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    xf = np.fft.fft(x, n=nfft)
    # angular frequency grid in radians per sample
    omega = 2.0 * np.pi * np.fft.fftfreq(nfft)
    pos = omega > 0
    W = np.empty((len(scales), n), dtype=np.complex128)
    norm = np.pi ** -0.25
    for i, a in enumerate(scales):
        psi_hat = np.zeros(nfft)
        psi_hat[pos] = norm * np.exp(-0.5 * (a * omega[pos] - w0) ** 2)
        W[i] = np.fft.ifft(xf * np.sqrt(a) * psi_hat)[:n]
    return W, np.asarray(scales, dtype=np.float64)


def swt_frequency_grid(num_bins: int,
                       f_lo: float = BAND_LOW_HZ,
                       f_hi: float = BAND_HIGH_HZ) -> np.ndarray:
    """Linear frequency bin centers (Hz) for the reassignment."""
    return np.linspace(f_lo, f_hi, num_bins)


def swt(W: np.ndarray, scales: np.ndarray,
        freq_bins: np.ndarray | None = None,
        sample_rate: int = SAMPLE_RATE,
        rel_floor: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    """Synchrosqueezing reassignment of wavelet coefficients.

    The instantaneous frequency of each cell is the imaginary part of
    (dW/db) / W; each coefficient, weighted by a^(-3/2) * delta_a, is
    accumulated into the nearest bin of a linear frequency grid and the
    result is divided by the bin width.  Cells with |W| below
    rel_floor * max|W| are skipped (phase undefined).

    Returns (T, freq_bins) with T of shape (num_bins, n_times), complex.
    """
    W = np.asarray(W)
    scales = np.asarray(scales, dtype=np.float64)
    if freq_bins is None:
        freq_bins = swt_frequency_grid(64)
    nbins = len(freq_bins)
    dw = freq_bins[1] - freq_bins[0]
    n = W.shape[1]
    T = np.zeros((nbins, n), dtype=np.complex128)
    absW = np.abs(W)
    floor = rel_floor * absW.max() if absW.size else 0.0
    if floor == 0.0:
        return T, freq_bins
    # dW/db in per-second units
    dWdb = np.gradient(W, axis=1) * sample_rate
    valid = absW >= floor
    with np.errstate(divide="ignore", invalid="ignore"):
        inst_w = np.where(valid, (dWdb / np.where(valid, W, 1.0)).imag, 0.0)
    inst_f = inst_w / (2.0 * np.pi)
    da = np.diff(scales, prepend=scales[0] - (scales[1] - scales[0]))
    weights = scales ** -1.5 * da
    bin_idx = np.rint((inst_f - freq_bins[0]) / dw).astype(int)
    in_grid = valid & (bin_idx >= 0) & (bin_idx < nbins)
    contrib = W * weights[:, None] / dw
    time_idx = np.broadcast_to(np.arange(n), W.shape)
    flat = (bin_idx * n + time_idx)[in_grid]
    np.add.at(T.reshape(-1), flat, contrib[in_grid])
    return T, freq_bins


def _resize_bilinear(img: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Separable endpoint-aligned bilinear resize."""
    h, w = img.shape
    oh, ow = out_shape
    rows = np.linspace(0.0, h - 1.0, oh)
    cols = np.linspace(0.0, w - 1.0, ow)
    tmp = np.empty((oh, w))
    src_r = np.arange(h, dtype=np.float64)
    for j in range(w):
        tmp[:, j] = np.interp(rows, src_r, img[:, j])
    out = np.empty((oh, ow))
    src_c = np.arange(w, dtype=np.float64)
    for i in range(oh):
        out[i] = np.interp(cols, src_c, tmp[i])
    return out


def to_acoustic_image(T_left: np.ndarray, T_right: np.ndarray,
                      size: int = 64, gamma: float = 100.0) -> AcousticFeature:
    """Joint min-max normalization of |T| across both channels (preserving
    the inter-ear level difference), log compression, bilinear resize.

    Normalizing before the log keeps the image exactly invariant to global
    amplitude scaling of the event.
    """
    ml, mr = np.abs(T_left), np.abs(T_right)
    lo = min(ml.min(), mr.min())
    hi = max(ml.max(), mr.max())
    if hi <= lo:
        z = np.zeros((2, size, size))
        return AcousticFeature(z)
    planes = []
    for m in (ml, mr):
        v = (m - lo) / (hi - lo)
        v = np.log1p(gamma * v) / np.log1p(gamma)
        planes.append(_resize_bilinear(v, (size, size)))
    img = np.clip(np.stack(planes), 0.0, 1.0)
    return AcousticFeature(img)


# ---------------------------------------------------------------------------
# bundle assembly

def extract_bundle(event: UnifiedEvent, cfg) -> FeatureBundle:
    """All four features of one occlusion candidate."""
    out_len = cfg.features_envelope_len
    sl, fl = cepstral_split(event.left, out_len)
    sr, fr = cepstral_split(event.right, out_len)
    teeth = TeethStructureFeature(sl, fl, sr, fr)
    bone = BoneStructureFeature(
        zero_crossing_sequence(event.left, event.sample_rate_hz),
        zero_crossing_sequence(event.right, event.sample_rate_hz))
    location = banded_delay(event.left, event.right, event.sample_rate_hz)
    scales = wavelet_scales(cfg.features_num_scales, cfg.features_wavelet_w0)
    bins = swt_frequency_grid(cfg.features_num_freq_bins)
    Wl, _ = cwt(event.left, scales, cfg.features_wavelet_w0)
    Wr, _ = cwt(event.right, scales, cfg.features_wavelet_w0)
    Tl, _ = swt(Wl, scales, bins, event.sample_rate_hz)
    Tr, _ = swt(Wr, scales, bins, event.sample_rate_hz)
    acoustic = to_acoustic_image(Tl, Tr, cfg.features_image_size)
    return FeatureBundle(teeth, bone, location, acoustic,
                         start_s=event.start_s, end_s=event.end_s)
