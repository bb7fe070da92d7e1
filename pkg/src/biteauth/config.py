"""Pipeline configuration: flat namespaced key-value document with defaults.

Config files are plain text, one ``section.key = value`` per line, ``#``
comments allowed.  Unknown keys are rejected, values are validated against
the owning module's invariants when the config is loaded.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    """Raised for unknown keys or values violating module invariants."""


@dataclass
class Config:
    # -- signal frontend -------------------------------------------------
    frontend_target_db: float = -24.0      # loudness normalization target (dBFS RMS)
    frontend_alpha: float = 4.0            # over-subtraction factor
    frontend_beta: float = 0.01            # spectral floor parameter
    frontend_fft_size: int = 4096          # FFT size for noise est. / subtraction
    frontend_filter_order: int = 4         # Butterworth band-pass order
    frontend_band_low_hz: float = 100.0
    frontend_band_high_hz: float = 2500.0
    frontend_noise_prefix_ms: float = 500.0  # noise-only prefix used when no ref track

    # -- event detector ---------------------------------------------------
    detector_q: int = 8                    # sub-band count for spectrum variance
    detector_nfft: int = 512               # transform size for the 2.5 ms window
    detector_t1: float = 10.0              # seed threshold (calibrated on synthetic data)
    detector_t2: float = 2.0               # boundary threshold (above the
                                           # ambient variance floor left by
                                           # noise-anchored normalization)
    detector_pair_gap_ms: float = 20.0     # max left/right gap for event pairing

    # -- motion filter ------------------------------------------------------
    motion_occlusion_max_ms: float = 50.0
    motion_chewing_min_ms: float = 250.0
    motion_gulping_min_ms: float = 700.0
    motion_speaking_ratio: float = 0.6

    # -- feature extraction -------------------------------------------------
    features_num_scales: int = 64          # log-spaced wavelet scales
    features_wavelet_w0: float = 6.0       # Morlet center frequency (rad)
    features_num_freq_bins: int = 64       # reassignment frequency grid
    features_envelope_len: int = 64        # resampled log-spectral envelope length
    features_image_size: int = 64
    features_num_bands: int = 5            # location-feature frequency bands

    # -- embedding network ----------------------------------------------------
    net_conv1: int = 8
    net_conv2: int = 16
    net_conv3: int = 32
    net_embed_dim: int = 64
    net_margin: float = 0.5
    net_lr: float = 0.01
    net_momentum: float = 0.9
    net_epochs: int = 12
    net_batch_size: int = 16
    net_triplet_cap: int = 256             # triplets per user per epoch
    net_seed: int = 7
    net_finetune_lr_scale: float = 0.1
    net_finetune_epoch_div: int = 4

    # -- augmentation -----------------------------------------------------------
    augment_copies: int = 3
    augment_max_warp_frac: float = 0.1
    augment_max_freq_mask: int = 8
    augment_max_time_mask: int = 8

    # -- authentication / templates ---------------------------------------------
    auth_tau_embed: float = 0.25
    auth_tau_ds: float = 4.7e-6            # mean |ZS - template ZS| (seconds)
    auth_tau_dr: float = 3.0e-7            # mean |Rb - template Rb| (seconds)
    auth_min_enroll: int = 5
    auth_lock_after: int = 4
    auth_lock_duration_s: float = 60.0

    def validate(self) -> None:
        c = self
        checks = [
            (c.frontend_alpha >= 1.0, "frontend.alpha must be >= 1"),
            (0.0 < c.frontend_beta < 1.0, "frontend.beta must be in (0, 1)"),
            (c.frontend_fft_size > 0 and c.frontend_fft_size % 2 == 0,
             "frontend.fft_size must be a positive even integer"),
            (c.frontend_filter_order >= 1, "frontend.filter_order must be >= 1"),
            (0.0 < c.frontend_band_low_hz < c.frontend_band_high_hz,
             "frontend band edges must satisfy 0 < low < high"),
            (c.detector_q >= 2, "detector.q must be >= 2"),
            (0.0 < c.detector_t2 < c.detector_t1,
             "detector thresholds must satisfy 0 < t2 < t1"),
            (c.motion_occlusion_max_ms > 0, "motion.occlusion_max_ms must be > 0"),
            (c.motion_chewing_min_ms > 0, "motion.chewing_min_ms must be > 0"),
            (c.motion_gulping_min_ms > 0, "motion.gulping_min_ms must be > 0"),
            (0.0 < c.motion_speaking_ratio < 1.0,
             "motion.speaking_ratio must be in (0, 1)"),
            (c.features_num_scales >= 2, "features.num_scales must be >= 2"),
            (c.features_num_freq_bins >= 2, "features.num_freq_bins must be >= 2"),
            (c.features_num_bands == 5, "features.num_bands is fixed at 5"),
            (c.net_margin > 0, "net.margin must be > 0"),
            (c.net_lr > 0, "net.lr must be > 0"),
            (c.net_epochs >= 1, "net.epochs must be >= 1"),
            (c.net_batch_size >= 1, "net.batch_size must be >= 1"),
            (c.auth_tau_embed > 0, "auth.tau_embed must be > 0"),
            (c.auth_tau_ds > 0, "auth.tau_ds must be > 0"),
            (c.auth_tau_dr > 0, "auth.tau_dr must be > 0"),
            (c.auth_min_enroll >= 1, "auth.min_enroll must be >= 1"),
            (c.auth_lock_after >= 1, "auth.lock_after must be >= 1"),
            (c.auth_lock_duration_s > 0, "auth.lock_duration_s must be > 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)


_FIELDS = {f.name: f for f in dataclasses.fields(Config)}


def _key_to_attr(key: str) -> str:
    return key.strip().replace(".", "_", 1)


def _attr_to_key(attr: str) -> str:
    return attr.replace("_", ".", 1)


def _coerce(attr: str, raw: str):
    kind = _FIELDS[attr].type
    raw = raw.strip()
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def load_config(path: str | Path | None = None,
                overrides: dict[str, str] | None = None) -> Config:
    """Build a validated Config; precedence overrides > file > defaults."""
    values: dict[str, object] = {}

    def apply(key: str, raw: str, source: str) -> None:
        attr = _key_to_attr(key)
        if attr not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r} ({source})")
        try:
            values[attr] = _coerce(attr, raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r} ({source})") from exc

    if path is not None:
        text = Path(path).read_text()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = line.split("=", 1)
            apply(key, raw, f"{path}:{lineno}")

    for key, raw in (overrides or {}).items():
        apply(key, raw, "override")

    cfg = Config(**values)
    cfg.validate()
    return cfg


def dump_config(cfg: Config) -> str:
    """Serialize to the plain-text key-value format (round-trips load_config)."""
    lines = [f"{_attr_to_key(f.name)} = {getattr(cfg, f.name)}"
             for f in dataclasses.fields(Config)]
    return "\n".join(lines) + "\n"
