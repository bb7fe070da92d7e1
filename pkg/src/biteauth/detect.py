"""Spectrum-variance event detection.

A 2.5 ms inner window slides at 1 ms over the denoised signal.  Each
window's magnitude spectrum is split into q even sub-bands; the unbiased
variance of the sub-band magnitude sums is the detection statistic.  A
double threshold (seed at T1, grow boundaries out to the T2 crossings)
segments events, and left/right events are unified to a common span.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

SAMPLE_RATE = 48000
INNER_WINDOW_MS = 2.5
INNER_HOP_MS = 1.0
INNER_WINDOW = int(SAMPLE_RATE * INNER_WINDOW_MS / 1000.0)  # 120
INNER_HOP = int(SAMPLE_RATE * INNER_HOP_MS / 1000.0)        # 48


class DetectError(ValueError):
    pass


@dataclass
class SubbandSpec:
    """Sub-band layout for the variance statistic."""
    q: int = 8
    nfft: int = 512
    band_low_hz: float = 100.0
    band_high_hz: float = 2500.0

    def __post_init__(self):
        if self.q < 2:
            raise DetectError("q must be >= 2")
        if self.q * self.bins_per_band > self.nfft // 2 + 1:
            raise DetectError("q*p exceeds usable bin count")

    @property
    def start_bin(self) -> int:
        # first bin at or above the low band edge
        df = SAMPLE_RATE / self.nfft
        return int(np.ceil(self.band_low_hz / df))

    @property
    def bins_per_band(self) -> int:
        df = SAMPLE_RATE / self.nfft
        last = int(np.floor(self.band_high_hz / df))
        usable = last - self.start_bin + 1
        p = usable // self.q
        if p < 1:
            raise DetectError("band too narrow for q sub-bands")
        return p


@dataclass
class VarianceSeries:
    values: np.ndarray          # one D_i per inner window, >= 0
    times: np.ndarray           # window start times, seconds

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.times = np.asarray(self.times, dtype=np.float64)
        if np.any(~np.isfinite(self.values)) or np.any(self.values < 0):
            raise DetectError("variance values must be finite and non-negative")


@dataclass
class DetectorThresholds:
    t1: float
    t2: float

    def __post_init__(self):
        if not (0.0 < self.t2 < self.t1):
            raise DetectError("thresholds must satisfy 0 < t2 < t1")


@dataclass
class EventBounds:
    start_s: float
    end_s: float
    channel: str = "unified"

    def __post_init__(self):
        if not self.start_s < self.end_s:
            raise DetectError("event start must precede end")


@dataclass
class UnifiedEvent:
    """A binaural segment with identical bounds in both channels."""
    start_s: float
    end_s: float
    left: np.ndarray
    right: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.left = np.asarray(self.left, dtype=np.float64)
        self.right = np.asarray(self.right, dtype=np.float64)
        if self.left.shape != self.right.shape:
            raise DetectError("unified event channels must have equal length")
        if not self.end_s > self.start_s:
            raise DetectError("event duration must be positive")

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


def _subband_sums(window: np.ndarray, spec: SubbandSpec) -> np.ndarray:
    mags = np.abs(np.fft.rfft(window, n=spec.nfft, axis=-1))
    p = spec.bins_per_band
    s = spec.start_bin
    bands = mags[..., s: s + spec.q * p]
    return bands.reshape(*bands.shape[:-1], spec.q, p).sum(axis=-1)


def spectrum_variance(window_samples: np.ndarray, spec: SubbandSpec) -> float:
    """Unbiased variance of the q sub-band magnitude sums of one window."""
    window_samples = np.asarray(window_samples, dtype=np.float64)
    if window_samples.shape != (INNER_WINDOW,):
        raise DetectError(f"window must be {INNER_WINDOW} samples")
    sums = _subband_sums(window_samples, spec)
    return float(np.var(sums, ddof=1))


def variance_series_from_samples(x: np.ndarray, spec: SubbandSpec,
                                 t0: float = 0.0) -> VarianceSeries:
    """Variance statistic over any sample stream (2.5 ms windows, 1 ms hop)."""
    x = np.asarray(x, dtype=np.float64)
    n = (len(x) - INNER_WINDOW) // INNER_HOP + 1 if len(x) >= INNER_WINDOW else 0
    if n <= 0:
        return VarianceSeries(np.empty(0), np.empty(0))
    idx = np.arange(INNER_WINDOW)[None, :] + INNER_HOP * np.arange(n)[:, None]
    sums = _subband_sums(x[idx], spec)
    values = np.var(sums, axis=-1, ddof=1)
    # timestamps at window centers so event bounds land on signal time
    center = 0.5 * INNER_WINDOW_MS / 1000.0
    times = t0 + center + np.arange(n) * INNER_HOP_MS / 1000.0
    return VarianceSeries(values, times)


def variance_series(frame, spec: SubbandSpec) -> VarianceSeries:
    """Variance series of one 50 ms frame (48 inner windows)."""
    return variance_series_from_samples(frame.samples, spec,
                                        t0=frame.start_time_s)


def smooth_series(series: VarianceSeries, k: int = 3) -> VarianceSeries:
    """Centered moving average; stabilizes boundaries against single-window
    dips inside long events."""
    if k <= 1 or len(series.values) == 0:
        return series
    kern = np.ones(k) / k
    return VarianceSeries(np.convolve(series.values, kern, mode="same"),
                          series.times)


def detect_events(series: VarianceSeries, th: DetectorThresholds,
                  channel: str = "unified") -> list[EventBounds]:
    """Double-threshold segmentation.

    Runs above T1 seed events; each seed is grown left and right to the
    nearest points where the series drops below T2.  Seeds that grow into
    the same span merge into one event.
    """
    v = series.values
    n = len(v)
    if n == 0:
        return []
    events: list[tuple[int, int]] = []
    i = 0
    while i < n:
        if v[i] >= th.t1:
            lo = i
            while lo > 0 and v[lo - 1] >= th.t2:
                lo -= 1
            hi = i
            while hi < n - 1 and v[hi + 1] >= th.t2:
                hi += 1
            if events and lo <= events[-1][1]:
                events[-1] = (events[-1][0], max(events[-1][1], hi))
            else:
                events.append((lo, hi))
            i = hi + 1
        else:
            i += 1
    out = []
    hop_s = INNER_HOP_MS / 1000.0
    for lo, hi in events:
        # boundaries sit on the first sub-threshold samples outside the run
        start = series.times[lo - 1] if lo > 0 else series.times[0]
        end = series.times[hi + 1] if hi < n - 1 else series.times[hi] + hop_s
        out.append(EventBounds(start, end, channel))
    return out


def unify_lengths(left: EventBounds, right: EventBounds,
                  max_gap_s: float = 0.020) -> tuple[float, float]:
    """Union span of a paired left/right event: min start, max end."""
    gap = max(left.start_s, right.start_s) - min(left.end_s, right.end_s)
    if gap > max_gap_s:
        raise DetectError("events neither overlap nor fall within the pairing gap")
    return (min(left.start_s, right.start_s), max(left.end_s, right.end_s))


def pair_events(left_events: list[EventBounds], right_events: list[EventBounds],
                max_gap_s: float = 0.020) -> list[tuple[float, float]]:
    """Greedy in-order pairing of per-channel detections; unpaired
    single-channel events are dropped."""
    spans = []
    used_r: set[int] = set()
    for le in left_events:
        best = None
        best_gap = None
        for j, re in enumerate(right_events):
            if j in used_r:
                continue
            gap = max(le.start_s, re.start_s) - min(le.end_s, re.end_s)
            if gap <= max_gap_s and (best_gap is None or gap < best_gap):
                best, best_gap = j, gap
        if best is not None:
            used_r.add(best)
            spans.append(unify_lengths(le, right_events[best], max_gap_s))
    return sorted(spans)


def extract_unified_events(left: np.ndarray, right: np.ndarray,
                           spans: list[tuple[float, float]],
                           rate: int = SAMPLE_RATE,
                           tail_pad_s: float = 0.0) -> list[UnifiedEvent]:
    """Slice unified sample segments for the given spans.

    tail_pad_s extends the slices (not the reported bounds) past the
    detector's end boundary.  The boundary threshold cuts events while the
    signal is still well above the noise floor and jitters by a hop or two
    between otherwise identical events; padding lets downstream
    amplitude-gated features find the true signal end consistently.
    """
    out = []
    pad = int(round(tail_pad_s * rate))
    for start, end in spans:
        a = max(0, int(round(start * rate)))
        b = min(len(left), int(round(end * rate)) + pad)
        if b - a < 2:
            continue
        out.append(UnifiedEvent(a / rate, min(b, int(round(end * rate))) / rate,
                                left[a:b], right[a:b], rate))
    return out


def _match_f1(pred: list[EventBounds], truth: list[tuple[float, float]],
              tol_s: float) -> tuple[int, int, int]:
    """(tp, fp, fn) with both boundaries within tol_s counting as a hit."""
    used: set[int] = set()
    tp = 0
    for ev in pred:
        for j, (ts, te) in enumerate(truth):
            if j in used:
                continue
            if abs(ev.start_s - ts) <= tol_s and abs(ev.end_s - te) <= tol_s:
                used.add(j)
                tp += 1
                break
    return tp, len(pred) - tp, len(truth) - tp


def calibrate_thresholds(labeled_series: list[tuple[VarianceSeries,
                                                    list[tuple[float, float]]]],
                         tol_s: float = 0.005,
                         grid_size: int = 24) -> DetectorThresholds:
    """Grid search over (T1, T2) maximizing event-level F1 at +/-5 ms
    boundary tolerance; ties break toward the larger (more conservative) T1."""
    if not labeled_series:
        raise DetectError("calibration requires labeled series")
    n_events = sum(len(t) for _, t in labeled_series)
    if n_events < 10:
        raise DetectError("calibration requires at least 10 labeled events")
    peaks = np.concatenate([s.values for s, _ in labeled_series])
    peaks = peaks[peaks > 0]
    if len(peaks) == 0:
        raise DetectError("no detectable events in calibration data")
    lo, hi = np.percentile(peaks, 50), peaks.max()
    t1_grid = np.geomspace(max(lo, 1e-12), hi, grid_size)
    frac_grid = np.array([0.05, 0.1, 0.2, 0.3, 0.5, 0.7, 0.9])
    best = None
    for t1, frac in product(t1_grid, frac_grid):
        th = DetectorThresholds(float(t1), float(t1 * frac))
        tp = fp = fn = 0
        for series, truth in labeled_series:
            a, b, c = _match_f1(detect_events(series, th), truth, tol_s)
            tp, fp, fn = tp + a, fp + b, fn + c
        denom = 2 * tp + fp + fn
        f1 = 2 * tp / denom if denom else 0.0
        key = (f1, t1)
        if best is None or key > best[0]:
            best = (key, th)
    th = best[1]
    if best[0][0] == 0.0:
        raise DetectError("calibration failed: no threshold detects the labels")
    return th
