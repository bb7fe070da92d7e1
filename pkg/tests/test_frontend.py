import numpy as np
import pytest

from biteauth import frontend
from biteauth.config import Config
from biteauth.frontend import (FrontendError, NoiseProfile, PcmFrame,
                               StereoCapture, SAMPLE_RATE,
                               bandpass_100_2500, denoise_capture,
                               estimate_noise_profile, frame_stream,
                               normalize_loudness, spectral_subtract)


def _frame(samples, t=0.0, ch="left"):
    return PcmFrame(np.asarray(samples, dtype=np.float64), t, ch)


# ---------------------------------------------------------------------------
# framing

def test_frame_grid_50ms_10ms_hop(rng):
    n = SAMPLE_RATE  # 1 s
    cap = StereoCapture(rng.normal(size=n), rng.normal(size=n))
    frames = frame_stream(cap)
    assert len(frames) == (n - frontend.FRAME_LEN) // frontend.HOP_LEN + 1
    l0, r0 = frames[0]
    assert len(l0.samples) == frontend.FRAME_LEN
    assert l0.start_time_s == 0.0
    l1, _ = frames[1]
    assert l1.start_time_s == pytest.approx(0.010)
    np.testing.assert_array_equal(
        l1.samples, cap.left[frontend.HOP_LEN:frontend.HOP_LEN
                             + frontend.FRAME_LEN])


def test_frame_stream_short_capture_empty():
    cap = StereoCapture(np.zeros(100), np.zeros(100))
    assert frame_stream(cap) == []


# ---------------------------------------------------------------------------
# loudness normalization

def test_normalize_loudness_hits_target(rng):
    f = _frame(rng.normal(0, 0.3, 2400))
    out = normalize_loudness(f, target_db=-24.0)
    rms = np.sqrt(np.mean(out.samples ** 2))
    assert rms == pytest.approx(10 ** (-24 / 20), rel=1e-12)
    assert not out.silent


def test_normalize_loudness_zero_frame_marked_silent():
    out = normalize_loudness(_frame(np.zeros(2400)))
    np.testing.assert_array_equal(out.samples, 0.0)
    assert out.silent


# ---------------------------------------------------------------------------
# spectral subtraction: both branch contracts, bin-exact

def test_spectral_subtraction_branches_bin_exact(rng):
    """Output power per bin is exactly power - alpha*D above the floor and
    exactly beta*D below it, with the input phase preserved."""
    fft = 256
    alpha, beta = 4.0, 0.01
    for _ in range(20):
        x = rng.normal(0, 1.0, fft)  # frame length == fft size: exact rfft
        d = rng.uniform(0.0, 50.0, fft // 2 + 1)
        noise = NoiseProfile(d, fft)
        y = spectral_subtract(_frame(x), noise, alpha, beta).samples
        spec_in = np.fft.rfft(x, n=fft)
        spec_out = np.fft.rfft(y, n=fft)
        power_in = np.abs(spec_in) ** 2
        expected = np.maximum(power_in - alpha * d, beta * d)
        np.testing.assert_allclose(np.abs(spec_out) ** 2, expected,
                                   rtol=1e-9, atol=1e-12)
        # phase preserved wherever the input bin is non-zero
        live = np.abs(spec_in) > 1e-9
        np.testing.assert_allclose(
            np.angle(spec_out[live] / spec_in[live]), 0.0, atol=1e-9)


def test_spectral_subtraction_zero_noise_is_identity(rng):
    fft = 256
    x = rng.normal(size=fft)
    y = spectral_subtract(_frame(x), NoiseProfile.zero(fft)).samples
    np.testing.assert_allclose(y, x, atol=1e-12)


def test_spectral_subtraction_rejects_bad_parameters(rng):
    f = _frame(rng.normal(size=256))
    noise = NoiseProfile.zero(256)
    with pytest.raises(FrontendError):
        spectral_subtract(f, noise, alpha=0.5)
    with pytest.raises(FrontendError):
        spectral_subtract(f, noise, beta=1.5)


# ---------------------------------------------------------------------------
# band-pass

def test_bandpass_passes_midband_rejects_out_of_band():
    t = np.arange(4800) / SAMPLE_RATE
    mid = np.sin(2 * np.pi * 1000 * t)
    low = np.sin(2 * np.pi * 20 * t)
    high = np.sin(2 * np.pi * 12000 * t)
    # measure away from the ends, where filtfilt edge transients live
    sl = slice(1200, 3600)
    rms = lambda v: np.sqrt(np.mean(v[sl] ** 2))
    assert rms(bandpass_100_2500(_frame(mid)).samples) > 0.9 * rms(mid)
    assert rms(bandpass_100_2500(_frame(low)).samples) < 0.05 * rms(low)
    assert rms(bandpass_100_2500(_frame(high)).samples) < 0.05 * rms(high)


def test_bandpass_zero_phase_no_lag():
    """Forward-backward filtering keeps a mid-band burst at its position."""
    x = np.zeros(4800)
    x[2400] = 1.0
    y = bandpass_100_2500(_frame(x)).samples
    assert abs(int(np.argmax(np.abs(y))) - 2400) <= 1


# ---------------------------------------------------------------------------
# noise estimation

def test_estimate_noise_profile_white_noise_flat(rng):
    prof = estimate_noise_profile(rng.normal(0, 0.1, 64 * 1024), 1024)
    mags = prof.magnitudes[10:-10]
    assert mags.std() / mags.mean() < 0.15
    assert len(prof.magnitudes) == 513


def test_estimate_noise_profile_too_short():
    with pytest.raises(FrontendError):
        estimate_noise_profile(np.zeros(100), 1024)


# ---------------------------------------------------------------------------
# capture-level chain

def _tone_burst_capture(rng, noise_rms=0.02, n=SAMPLE_RATE):
    x = rng.normal(0, noise_rms, n)
    t = np.arange(2400) / SAMPLE_RATE
    burst = 0.5 * np.sin(2 * np.pi * 800 * t) * np.hanning(2400)
    s = int(0.7 * SAMPLE_RATE)
    x[s:s + 2400] += burst
    return StereoCapture(x, x.copy()), s


def test_denoise_improves_burst_to_noise_ratio(rng, cfg):
    cap, s = _tone_burst_capture(rng)
    noise = frontend.noise_profile_from_capture(cap, cfg)
    left, _ = denoise_capture(cap, cfg, noise)
    burst = left[s:s + 2400]
    quiet = left[SAMPLE_RATE // 10: s - 2400]
    snr_out = np.sqrt(np.mean(burst ** 2) / max(np.mean(quiet ** 2), 1e-30))
    burst_in = cap.left[s:s + 2400]
    quiet_in = cap.left[SAMPLE_RATE // 10: s - 2400]
    snr_in = np.sqrt(np.mean(burst_in ** 2) / np.mean(quiet_in ** 2))
    assert snr_out > 2.0 * snr_in


def test_denoise_invariant_to_input_scale(rng, cfg):
    """One stream-level gain anchored to the noise floor makes the output
    independent of the capture's absolute level."""
    cap, _ = _tone_burst_capture(rng)
    scaled = StereoCapture(7.5 * cap.left, 7.5 * cap.right)
    noise = frontend.noise_profile_from_capture(cap, cfg)
    noise_s = frontend.noise_profile_from_capture(scaled, cfg)
    l1, _ = denoise_capture(cap, cfg, noise)
    l2, _ = denoise_capture(scaled, cfg, noise_s)
    np.testing.assert_allclose(l1, l2, atol=1e-9)


def test_denoise_no_per_frame_gain_artifacts(rng, cfg):
    """An event straddling frame boundaries must come through with one
    coherent gain: the denoised burst should correlate > 0.99 with the
    band-passed original up to a single scalar."""
    cap, s = _tone_burst_capture(rng, noise_rms=0.002)
    noise = frontend.noise_profile_from_capture(cap, cfg)
    left, _ = denoise_capture(cap, cfg, noise)
    ref = bandpass_100_2500(_frame(cap.left)).samples
    a, b = left[s:s + 2400], ref[s:s + 2400]
    corr = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
    assert corr > 0.99
