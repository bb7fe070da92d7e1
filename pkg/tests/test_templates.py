import itertools
import json

import numpy as np
import pytest

from biteauth import bench, network, pipeline, synth
from biteauth import templates as tpl
from biteauth.templates import (AuthDecision, AuthReason, AuthThresholds,
                                LockoutState, TemplateError, TemplateStore,
                                UserTemplate, authenticate,
                                build_template, calibrate_auth_thresholds,
                                resample_curve, structural_scores,
                                update_lockout)


@pytest.fixture(scope="module")
def material(cfg):
    """Two users' bundles, templates, and a lightly trained network."""
    rng = np.random.default_rng(77)
    profiles = synth.random_profiles(2, seed=21)
    params = network.init_params(np.random.default_rng(1))
    bundles = {p.user_id: bench.profile_bundles(p, 6, cfg, rng)
               for p in profiles}
    temps = [build_template(uid, bl, params) for uid, bl in
             sorted(bundles.items())]
    return profiles, bundles, temps, params


# ---------------------------------------------------------------------------
# curve resampling

def test_resample_curve_linear_interp():
    out = resample_curve(np.array([0.0, 1.0]), length=5)
    np.testing.assert_allclose(out, [0.0, 0.25, 0.5, 0.75, 1.0])


def test_resample_curve_single_point_and_empty():
    np.testing.assert_array_equal(resample_curve(np.array([2.0]), 4),
                                  np.full(4, 2.0))
    with pytest.raises(TemplateError):
        resample_curve(np.array([]))


# ---------------------------------------------------------------------------
# template construction

def test_build_template_enforces_min_enroll(material):
    _, bundles, _, params = material
    some = next(iter(bundles.values()))
    with pytest.raises(TemplateError):
        build_template("u", some[:3], params, min_enroll=5)


def test_build_template_unit_norm_and_means(material):
    _, bundles, temps, params = material
    uid, bl = sorted(bundles.items())[0]
    t = temps[0]
    assert np.linalg.norm(t.avg_embedding) == pytest.approx(1.0, abs=1e-9)
    rb = np.stack([b.location.rb for b in bl]).mean(axis=0)
    np.testing.assert_allclose(t.rb_avg, rb, atol=1e-15)


def test_template_dict_roundtrip(material):
    _, _, temps, _ = material
    t = temps[0]
    q = UserTemplate.from_dict(t.to_dict())
    np.testing.assert_array_equal(q.avg_embedding, t.avg_embedding)
    np.testing.assert_array_equal(q.zs_left_avg, t.zs_left_avg)
    assert q.user_id == t.user_id


def test_template_version_check(material):
    _, _, temps, _ = material
    d = temps[0].to_dict()
    d["version"] = 999
    with pytest.raises(TemplateError):
        UserTemplate.from_dict(d)


# ---------------------------------------------------------------------------
# two-of-three decision rule, exhaustively

def test_two_of_three_all_8_combinations(material):
    """For each of the 8 pass/fail patterns, build a template whose
    per-check distances are either 0 (pass) or far over threshold (fail)
    and verify accept iff at least two checks pass."""
    _, bundles, _, params = material
    uid, bl = sorted(bundles.items())[0]
    probe = bl[0]
    emb = network.forward(params, probe.acoustic.image,
                          probe.teeth.stacked().ravel())
    zl = resample_curve(probe.bone.zs_left)
    zr = resample_curve(probe.bone.zs_right)
    rb = probe.location.rb
    th = AuthThresholds(tau_embed=10.0, tau_ds=1e-5, tau_dr=1e-6)
    off = 1e-3  # >> both taus, keeps the spacing curves positive
    for pass_l, pass_r, pass_dr in itertools.product([True, False], repeat=3):
        t = UserTemplate(user_id=uid, avg_embedding=emb,
                         zs_left_avg=zl if pass_l else zl + off,
                         zs_right_avg=zr if pass_r else zr + off,
                         rb_avg=rb if pass_dr else rb + off)
        s = structural_scores(probe, t)
        assert (s["ds_left"] < th.tau_ds) == pass_l
        assert (s["ds_right"] < th.tau_ds) == pass_r
        assert (s["dr"] < th.tau_dr) == pass_dr
        d = authenticate(probe, [t], th, params, now=0.0)
        assert d.accepted == (sum([pass_l, pass_r, pass_dr]) >= 2)
        if d.accepted:
            assert d.matched_user == uid
            assert d.reason is AuthReason.ACCEPTED
        else:
            assert d.reason is AuthReason.STRUCTURAL_MISMATCH


def test_embed_stage_gates_structural_stage(material):
    _, bundles, temps, params = material
    probe = next(iter(bundles.values()))[0]
    th = AuthThresholds(tau_embed=1e-9, tau_ds=1.0, tau_dr=1.0)
    d = authenticate(probe, temps, th, params, now=0.0)
    assert not d.accepted
    assert d.reason is AuthReason.NO_EMBED_MATCH
    assert "ds_left" not in d.scores  # structure never evaluated


def test_authenticate_empty_store(material):
    _, bundles, _, params = material
    probe = next(iter(bundles.values()))[0]
    with pytest.raises(TemplateError):
        authenticate(probe, [], AuthThresholds(1, 1, 1), params)


def test_accepted_decision_requires_matched_user():
    with pytest.raises(TemplateError):
        AuthDecision(True, None, {}, AuthReason.ACCEPTED)


# ---------------------------------------------------------------------------
# lockout

def _fail_decision():
    return AuthDecision(False, None, {}, AuthReason.STRUCTURAL_MISMATCH)


def _ok_decision():
    return AuthDecision(True, "u", {}, AuthReason.ACCEPTED)


def test_lockout_scripted_sequence():
    """fail x4 -> locked; attempts while locked don't extend; success resets."""
    state = LockoutState()
    now = 1000.0
    for i in range(1, 4):
        state = update_lockout(state, _fail_decision(), now=now + i)
        assert state.consecutive_failures == i
        assert not state.is_locked(now + i)
    state = update_lockout(state, _fail_decision(), now=now + 4,
                           lock_after=4, lock_duration_s=60.0)
    assert state.is_locked(now + 5)
    assert state.locked_until == pytest.approx(now + 64.0)
    # a refused-because-locked attempt leaves the state untouched
    locked_try = AuthDecision(False, None, {}, AuthReason.LOCKED)
    state2 = update_lockout(state, locked_try, now=now + 10)
    assert state2.locked_until == state.locked_until
    assert state2.consecutive_failures == state.consecutive_failures
    # lock expires with time, then a success resets everything
    assert not state.is_locked(now + 65)
    state3 = update_lockout(state, _ok_decision(), now=now + 70)
    assert state3.consecutive_failures == 0
    assert state3.locked_until is None


def test_authenticate_locked_template(material):
    _, bundles, temps, params = material
    uid, bl = sorted(bundles.items())[0]
    temps_locked = [UserTemplate.from_dict(t.to_dict()) for t in temps]
    for t in temps_locked:
        if t.user_id == uid:
            t.lockout = LockoutState(4, locked_until=2000.0)
    th = AuthThresholds(tau_embed=10.0, tau_ds=1.0, tau_dr=1.0)
    d = authenticate(bl[0], temps_locked, th, params, now=1000.0)
    assert not d.accepted and d.reason is AuthReason.LOCKED
    d2 = authenticate(bl[0], temps_locked, th, params, now=3000.0)
    assert d2.accepted  # lock expired


# ---------------------------------------------------------------------------
# threshold calibration

def _score(e, dl, dr_, drr):
    return {"embed_dist": e, "ds_left": dl, "ds_right": dr_, "dr": drr}


def test_calibration_separable_clouds_yield_zero_error():
    rng = np.random.default_rng(5)
    genuine = [_score(rng.uniform(0.05, 0.2), rng.uniform(1e-7, 1e-6),
                      rng.uniform(1e-7, 1e-6), rng.uniform(1e-8, 1e-7))
               for _ in range(60)]
    impostor = [_score(rng.uniform(0.6, 1.2), rng.uniform(1e-5, 1e-4),
                       rng.uniform(1e-5, 1e-4), rng.uniform(1e-6, 1e-5))
                for _ in range(60)]
    th = calibrate_auth_thresholds(genuine, impostor)
    accept = lambda s: (s["embed_dist"] <= th.tau_embed
                        and sum([s["ds_left"] < th.tau_ds,
                                 s["ds_right"] < th.tau_ds,
                                 s["dr"] < th.tau_dr]) >= 2)
    assert all(accept(s) for s in genuine)
    assert not any(accept(s) for s in impostor)


def test_calibration_thresholds_positive():
    genuine = [_score(0.1, 1e-6, 1e-6, 1e-7)] * 10
    impostor = [_score(0.9, 1e-4, 1e-4, 1e-5)] * 10
    th = calibrate_auth_thresholds(genuine, impostor)
    assert th.tau_embed > 0 and th.tau_ds > 0 and th.tau_dr > 0


# ---------------------------------------------------------------------------
# on-disk store

def test_store_roundtrip_and_listing(tmp_path, material):
    _, _, temps, _ = material
    store = TemplateStore(tmp_path / "s")
    for t in temps:
        store.save(t)
    assert store.users() == sorted(t.user_id for t in temps)
    got = store.load(temps[0].user_id)
    np.testing.assert_array_equal(got.avg_embedding, temps[0].avg_embedding)
    # atomic writes leave no temp files behind
    assert not list((tmp_path / "s").glob("*.tmp"))
    store.delete(temps[0].user_id)
    assert temps[0].user_id not in store.users()


def test_store_missing_user(tmp_path):
    with pytest.raises(TemplateError):
        TemplateStore(tmp_path).load("ghost")


def test_store_update_lockout_persists(tmp_path, material):
    _, _, temps, _ = material
    store = TemplateStore(tmp_path)
    store.save(temps[0])
    store.update_lockout(temps[0].user_id, LockoutState(3, 123.0))
    got = store.load(temps[0].user_id)
    assert got.lockout.consecutive_failures == 3
    assert got.lockout.locked_until == 123.0


def test_store_reenroll_replaces(tmp_path, material):
    _, _, temps, _ = material
    store = TemplateStore(tmp_path)
    store.save(temps[0])
    changed = UserTemplate.from_dict(temps[0].to_dict())
    changed.enrolled_at = 42.0
    store.save(changed)
    assert store.load(temps[0].user_id).enrolled_at == 42.0
    assert len(list(tmp_path.glob("*.json"))) == 1
