"""Rejection of non-occlusion bone-conducted events.

Duration separates gulping (> 700 ms) and chewing (> 250 ms); the
100-300 Hz PSD energy ratio flags speaking; short broadband bursts stay
occlusion candidates.  Walking never reaches this stage - the frontend
band-pass removes its sub-100 Hz energy before detection.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.signal import periodogram

from .detect import UnifiedEvent


class MotionError(ValueError):
    pass


class EventClass(Enum):
    OCCLUSION_CANDIDATE = "occlusion_candidate"
    CHEWING = "chewing"
    GULPING = "gulping"
    SPEAKING = "speaking"
    UNKNOWN = "unknown"


@dataclass
class MotionRules:
    occlusion_max_ms: float = 50.0
    chewing_min_ms: float = 250.0
    gulping_min_ms: float = 700.0
    speaking_ratio_threshold: float = 0.6
    speaking_band_hz: tuple[float, float] = (100.0, 300.0)
    full_band_hz: tuple[float, float] = (100.0, 2500.0)

    def __post_init__(self):
        if min(self.occlusion_max_ms, self.chewing_min_ms,
               self.gulping_min_ms) <= 0:
            raise MotionError("duration thresholds must be positive")
        if not 0.0 < self.speaking_ratio_threshold < 1.0:
            raise MotionError("speaking ratio threshold must be in (0, 1)")


def psd(event: UnifiedEvent) -> tuple[np.ndarray, np.ndarray]:
    """Hann periodogram averaged over the two channels -> (freqs, density)."""
    if len(event.left) == 0:
        raise MotionError("empty event")
    f, pl = periodogram(event.left, fs=event.sample_rate_hz, window="hann")
    _, pr = periodogram(event.right, fs=event.sample_rate_hz, window="hann")
    return f, 0.5 * (pl + pr)


def _band_power(f: np.ndarray, density: np.ndarray,
                lo: float, hi: float) -> float:
    mask = (f >= lo) & (f <= hi)
    return float(np.trapezoid(density[mask], f[mask]))


def speaking_energy_ratio(event: UnifiedEvent,
                          rules: MotionRules | None = None) -> float:
    """PSD energy in 100-300 Hz over energy in 100 Hz - 2.5 kHz."""
    rules = rules or MotionRules()
    f, density = psd(event)
    total = _band_power(f, density, *rules.full_band_hz)
    if total <= 0.0:
        raise MotionError("degenerate event: no in-band energy")
    ratio = _band_power(f, density, *rules.speaking_band_hz) / total
    return float(min(max(ratio, 0.0), 1.0))


def classify_event(event: UnifiedEvent,
                   rules: MotionRules | None = None) -> EventClass:
    """Duration tests first, then the speaking ratio; everything that is
    not a short in-band burst is discarded downstream."""
    rules = rules or MotionRules()
    dur_ms = event.duration_s * 1000.0
    if dur_ms > rules.gulping_min_ms:
        return EventClass.GULPING
    if dur_ms > rules.chewing_min_ms:
        return EventClass.CHEWING
    if speaking_energy_ratio(event, rules) > rules.speaking_ratio_threshold:
        return EventClass.SPEAKING
    if dur_ms <= rules.occlusion_max_ms:
        return EventClass.OCCLUSION_CANDIDATE
    return EventClass.UNKNOWN


def rules_from_config(cfg) -> MotionRules:
    return MotionRules(occlusion_max_ms=cfg.motion_occlusion_max_ms,
                       chewing_min_ms=cfg.motion_chewing_min_ms,
                       gulping_min_ms=cfg.motion_gulping_min_ms,
                       speaking_ratio_threshold=cfg.motion_speaking_ratio)
