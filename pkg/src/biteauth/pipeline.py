"""Capture-to-features glue: denoise, detect, unify, classify, extract."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import detect, features, frontend, motion


@dataclass
class DetectedEvent:
    event: detect.UnifiedEvent
    event_class: motion.EventClass


def _detector_spec(cfg) -> detect.SubbandSpec:
    return detect.SubbandSpec(q=cfg.detector_q, nfft=cfg.detector_nfft,
                              band_low_hz=cfg.frontend_band_low_hz,
                              band_high_hz=cfg.frontend_band_high_hz)


def detect_in_capture(capture: frontend.StereoCapture, cfg,
                      thresholds: detect.DetectorThresholds | None = None
                      ) -> list[DetectedEvent]:
    """Full detection chain on one capture.

    Denoises both channels, runs the variance detector per channel, pairs
    and unifies left/right bounds, and classifies every unified event.
    """
    if thresholds is None:
        thresholds = detect.DetectorThresholds(cfg.detector_t1, cfg.detector_t2)
    noise = frontend.noise_profile_from_capture(capture, cfg)
    left, right = frontend.denoise_capture(capture, cfg, noise)
    spec = _detector_spec(cfg)
    series_l = detect.smooth_series(detect.variance_series_from_samples(left, spec))
    series_r = detect.smooth_series(detect.variance_series_from_samples(right, spec))
    ev_l = detect.detect_events(series_l, thresholds, "left")
    ev_r = detect.detect_events(series_r, thresholds, "right")
    spans = detect.pair_events(ev_l, ev_r, cfg.detector_pair_gap_ms / 1000.0)
    # the pad does not move the reported bounds; it gives amplitude-gated
    # features room to find the true signal end past the detector cut
    events = detect.extract_unified_events(left, right, spans,
                                           tail_pad_s=0.008)
    rules = motion.rules_from_config(cfg)
    out = []
    for ev in events:
        try:
            cls = motion.classify_event(ev, rules)
        except motion.MotionError:
            cls = motion.EventClass.UNKNOWN
        out.append(DetectedEvent(ev, cls))
    return out


def occlusion_candidates(capture: frontend.StereoCapture, cfg,
                         thresholds: detect.DetectorThresholds | None = None
                         ) -> list[detect.UnifiedEvent]:
    return [d.event for d in detect_in_capture(capture, cfg, thresholds)
            if d.event_class is motion.EventClass.OCCLUSION_CANDIDATE]


def extract_bundles(capture: frontend.StereoCapture, cfg,
                    thresholds: detect.DetectorThresholds | None = None
                    ) -> list[features.FeatureBundle]:
    """Feature bundles for every occlusion candidate in a capture."""
    bundles = []
    for ev in occlusion_candidates(capture, cfg, thresholds):
        try:
            bundles.append(features.extract_bundle(ev, cfg))
        except features.FeatureError:
            continue
    return bundles


def bundle_from_event_samples(left: np.ndarray, right: np.ndarray, cfg,
                              denoise: bool = True) -> features.FeatureBundle:
    """Features of one pre-segmented binaural event (no detection pass).

    Used by the synthetic benches where event bounds are known exactly.
    The frontend band-pass is still applied so features see the same band
    the detection path would.
    """
    if denoise:
        from scipy.signal import sosfiltfilt
        sos = frontend._bandpass_sos(cfg.frontend_filter_order,
                                     cfg.frontend_band_low_hz,
                                     cfg.frontend_band_high_hz)
        pad = np.zeros(256)
        lf = sosfiltfilt(sos, np.concatenate([pad, left, pad]))[256:-256]
        rf = sosfiltfilt(sos, np.concatenate([pad, right, pad]))[256:-256]
    else:
        lf, rf = left, right
    ev = detect.UnifiedEvent(0.0, len(lf) / frontend.SAMPLE_RATE, lf, rf)
    return features.extract_bundle(ev, cfg)
