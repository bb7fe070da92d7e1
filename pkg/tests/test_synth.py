import json

import numpy as np
import pytest

from biteauth import synth
from biteauth.features import banded_delay
from biteauth.frontend import SAMPLE_RATE
from biteauth.synth import (SceneScript, ScriptEvent, SynthError,
                            SyntheticUserProfile, gen_distractor,
                            gen_occlusion, gen_stream, load_script,
                            natural_duration_s, profile_from_dict,
                            profile_to_dict, profiles_from_script_json,
                            random_profiles, script_from_json)


def _profile(**kw):
    base = dict(user_id="u", resonant_freqs=(400.0, 900.0, 1600.0),
                damping=(600.0, 700.0, 800.0), dispersion_coeff=6e-6,
                inter_ear_delay_s=0.0, fricative_mix=0.1, rng_seed=5)
    base.update(kw)
    return SyntheticUserProfile(**base)


# ---------------------------------------------------------------------------
# profile validation

def test_profile_validation_errors():
    with pytest.raises(SynthError):
        _profile(resonant_freqs=(400.0, 900.0))          # too few modes
    with pytest.raises(SynthError):
        _profile(resonant_freqs=(50.0, 900.0, 1600.0))   # out of band
    with pytest.raises(SynthError):
        _profile(damping=(600.0, -1.0, 800.0))
    with pytest.raises(SynthError):
        _profile(inter_ear_delay_s=2e-3)                 # > 1 ms
    with pytest.raises(SynthError):
        _profile(fricative_mix=1.5)


def test_profile_dict_roundtrip():
    p = _profile(inter_ear_delay_s=0.4e-3, ear_dispersion_delta=1e-7)
    q = profile_from_dict(profile_to_dict(p))
    assert q == p


def test_random_profiles_separation_and_band():
    profs = random_profiles(10, seed=11)
    bases = sorted(min(p.resonant_freqs) for p in profs)
    assert all(b2 - b1 >= 200.0 - 1e-9 for b1, b2 in zip(bases, bases[1:]))
    for p in profs:
        assert all(100.0 <= f <= 2500.0 for f in p.resonant_freqs)
        assert abs(p.inter_ear_delay_s) <= 1e-3


# ---------------------------------------------------------------------------
# occlusion generation

def test_gen_occlusion_deterministic():
    p = _profile()
    l1, r1 = gen_occlusion(p, 14.0, np.random.default_rng(3))
    l2, r2 = gen_occlusion(p, 14.0, np.random.default_rng(3))
    np.testing.assert_array_equal(l1, l2)
    np.testing.assert_array_equal(r1, r2)


def test_gen_occlusion_zero_delay_channels_identical(rng):
    p = _profile(inter_ear_delay_s=0.0, ear_dispersion_delta=0.0)
    l, r = gen_occlusion(p, 14.0, rng)
    np.testing.assert_array_equal(l, r)


@pytest.mark.parametrize("delay_ms", [-0.5, 0.25, 0.5])
def test_gen_occlusion_interaural_delay_recovered(delay_ms, rng):
    p = _profile(inter_ear_delay_s=delay_ms * 1e-3)
    l, r = gen_occlusion(p, 15.0, rng)
    feat = banded_delay(l, r)
    lags = feat.rb[feat.confident]
    assert len(lags) >= 2
    # positive lag convention: left leads
    np.testing.assert_allclose(np.median(lags), delay_ms * 1e-3,
                               atol=0.05e-3)


def test_natural_duration_in_valid_range():
    for p in random_profiles(10, seed=4):
        assert 0.010 <= natural_duration_s(p) <= 0.020


# ---------------------------------------------------------------------------
# distractors

def test_walking_energy_concentrated_below_100hz(rng):
    for _ in range(5):
        x, _, _ = gen_distractor("walking", rng)
        spec = np.abs(np.fft.rfft(x)) ** 2
        f = np.fft.rfftfreq(len(x), 1.0 / SAMPLE_RATE)
        assert spec[f < 100.0].sum() >= 0.9 * spec.sum()


def test_gulping_duration_700_to_1200ms(rng):
    for _ in range(5):
        x, _, _ = gen_distractor("gulping", rng)
        assert 0.700 <= len(x) / SAMPLE_RATE <= 1.200


def test_speaking_low_band_ratio_above_threshold(rng):
    from biteauth.detect import UnifiedEvent
    from biteauth.motion import speaking_energy_ratio
    for _ in range(5):
        l, r, _ = gen_distractor("speaking", rng)
        ev = UnifiedEvent(0.0, len(l) / SAMPLE_RATE, l, r)
        assert speaking_energy_ratio(ev) > 0.6


def test_unknown_distractor_kind(rng):
    with pytest.raises(SynthError):
        gen_distractor("yawning", rng)


# ---------------------------------------------------------------------------
# scene scripts and streams

def _script(events, duration_s=4.0):
    return SceneScript(events=events, duration_s=duration_s,
                       ambient_snr_db=30.0)


def test_gen_stream_places_events_and_labels(rng):
    p = _profile()
    script = _script([ScriptEvent("occlusion", 1.0, user_id="u"),
                      ScriptEvent("walking", 2.0)])
    left, right, labels = gen_stream(script, {"u": p}, seed=6)
    assert len(left) == len(right) == int(4.0 * SAMPLE_RATE)
    assert [l["kind"] for l in labels] == ["occlusion", "walking"]
    occ = labels[0]
    assert occ["user_id"] == "u"
    s = int(occ["start_s"] * SAMPLE_RATE)
    e = int(occ["end_s"] * SAMPLE_RATE)
    assert np.abs(left[s:e]).max() > 5 * np.abs(left[:s - 100]).max()


def test_gen_stream_deterministic():
    p = _profile()
    script = _script([ScriptEvent("occlusion", 1.0, user_id="u")])
    l1, r1, lab1 = gen_stream(script, {"u": p}, seed=9)
    l2, r2, lab2 = gen_stream(script, {"u": p}, seed=9)
    np.testing.assert_array_equal(l1, l2)
    np.testing.assert_array_equal(r1, r2)
    assert lab1 == lab2


def test_gen_stream_overlap_names_offending_pair():
    script = _script([ScriptEvent("occlusion", 1.0, user_id="u"),
                      ScriptEvent("occlusion", 1.01, user_id="u")])
    with pytest.raises(SynthError) as exc:
        gen_stream(script, {"u": _profile()}, seed=1)
    msg = str(exc.value)
    assert "1.000" in msg and "1.010" in msg


def test_gen_stream_event_outside_duration():
    script = _script([ScriptEvent("occlusion", 3.999, user_id="u")])
    with pytest.raises(SynthError):
        gen_stream(script, {"u": _profile()}, seed=1)


def test_gen_stream_unknown_user():
    script = _script([ScriptEvent("occlusion", 1.0, user_id="ghost")])
    with pytest.raises(SynthError):
        gen_stream(script, {"u": _profile()}, seed=1)


def test_script_json_roundtrip(tmp_path):
    doc = {"duration_s": 3.0, "ambient_snr_db": 25.0,
           "events": [{"kind": "occlusion", "time_s": 1.0, "user_id": "x"}]}
    s = script_from_json(doc)
    assert s.duration_s == 3.0 and s.events[0].user_id == "x"
    path = tmp_path / "s.json"
    path.write_text(json.dumps(doc))
    assert load_script(path) == s


def test_script_from_json_malformed():
    with pytest.raises(SynthError):
        script_from_json({"events": [{"kind": "occlusion"}]})


def test_profiles_from_script_json_combines_sources():
    doc = {"profiles": [profile_to_dict(_profile(user_id="embedded"))],
           "random_profiles": {"count": 2, "seed": 3, "prefix": "gen"}}
    profs = profiles_from_script_json(doc)
    assert set(profs) == {"embedded", "gen00", "gen01"}
    assert profs["gen00"] == random_profiles(2, seed=3, prefix="gen")[0]
