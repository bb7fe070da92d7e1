import json
import wave
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from biteauth.cli import main
from biteauth.frontend import SAMPLE_RATE

FAST_CFG = "net.epochs = 2\nnet.triplet_cap = 48\naugment.copies = 1\n"


def _run(*args, catch=True):
    return CliRunner().invoke(main, [str(a) for a in args],
                              catch_exceptions=not catch)


def _script_doc(events, duration_s=None, seed=11, count=2):
    if duration_s is None:
        duration_s = max(e["time_s"] for e in events) + 0.6
    return {"duration_s": duration_s, "ambient_snr_db": 40.0,
            "events": events,
            "random_profiles": {"count": count, "seed": seed,
                                "prefix": "user"}}


def _occlusions(user_id, n, t0=0.7, gap=0.4):
    return [{"kind": "occlusion", "time_s": round(t0 + i * gap, 3),
             "user_id": user_id} for i in range(n)]


def _write_script(path, doc):
    Path(path).write_text(json.dumps(doc))
    return path


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Synthesized streams and an enrolled two-user store, built once."""
    root = tmp_path_factory.mktemp("cli")
    cfgfile = root / "fast.cfg"
    cfgfile.write_text(FAST_CFG)

    streams = {}
    jobs = {"enroll0": ("user00", 6, 1), "enroll1": ("user01", 6, 2),
            "login0": ("user00", 1, 3), "login1": ("user01", 1, 4)}
    for name, (uid, n, seed) in jobs.items():
        script = _write_script(root / f"{name}.json",
                               _script_doc(_occlusions(uid, n)))
        out = root / name
        r = _run("synth", script, out, "--seed", seed)
        assert r.exit_code == 0, r.output
        streams[name] = out / "stream.wav"

    imp_doc = _script_doc(_occlusions("intr00", 1), count=1)
    imp_doc["random_profiles"].update(prefix="intr", seed=31,
                                      base_offset_hz=100.0)
    script = _write_script(root / "impostor.json", imp_doc)
    r = _run("synth", script, root / "impostor", "--seed", 9)
    assert r.exit_code == 0, r.output
    streams["impostor"] = root / "impostor" / "stream.wav"

    store = root / "store"
    for uid, wav, seed in (("user00", streams["enroll0"], 5),
                           ("user01", streams["enroll1"], 6)):
        r = _run("--config", cfgfile, "enroll", uid, wav, store,
                 "--seed", seed, "--now", 100)
        assert r.exit_code == 0, r.output
    return {"root": root, "cfg": cfgfile, "store": store, **streams}


# ---------------------------------------------------------------------------
# synth

def test_synth_writes_wav_and_labels(workspace):
    out = workspace["root"] / "enroll0"
    assert (out / "stream.wav").exists()
    labels = json.loads((out / "labels.json").read_text())
    assert sum(1 for l in labels if l["kind"] == "occlusion") == 6


def test_synth_overlap_exit_2_names_pair(tmp_path):
    doc = _script_doc([{"kind": "occlusion", "time_s": 1.0,
                        "user_id": "user00"},
                       {"kind": "occlusion", "time_s": 1.01,
                        "user_id": "user00"}])
    script = _write_script(tmp_path / "bad.json", doc)
    r = _run("synth", script, tmp_path / "out")
    assert r.exit_code == 2
    assert "1.000" in r.output and "1.010" in r.output


def test_synth_deterministic(workspace, tmp_path):
    script = _write_script(tmp_path / "s.json",
                           _script_doc(_occlusions("user00", 2)))
    for d in ("a", "b"):
        assert _run("synth", script, tmp_path / d, "--seed", 7).exit_code == 0
    assert ((tmp_path / "a" / "stream.wav").read_bytes()
            == (tmp_path / "b" / "stream.wav").read_bytes())
    assert ((tmp_path / "a" / "labels.json").read_bytes()
            == (tmp_path / "b" / "labels.json").read_bytes())


# ---------------------------------------------------------------------------
# detect

def test_detect_emits_occlusions_suppresses_distractors(workspace, tmp_path):
    events = _occlusions("user00", 4) + [
        {"kind": "walking", "time_s": 2.6},
        {"kind": "gulping", "time_s": 3.0}]
    script = _write_script(tmp_path / "mix.json",
                           _script_doc(events, duration_s=5.0))
    assert _run("synth", script, tmp_path / "mix", "--seed", 2).exit_code == 0
    r = _run("detect", tmp_path / "mix" / "stream.wav")
    assert r.exit_code == 0
    rows = json.loads(r.output)
    assert len(rows) == 4
    assert all(row["class"] == "occlusion_candidate" for row in rows)
    r2 = _run("detect", tmp_path / "mix" / "stream.wav", "--all-classes")
    assert len(json.loads(r2.output)) > 4


def test_detect_silent_wav_empty_list(tmp_path):
    import scipy.io.wavfile as wavfile
    path = tmp_path / "silent.wav"
    wavfile.write(path, SAMPLE_RATE,
                  np.zeros((SAMPLE_RATE, 2), dtype=np.int16))
    r = _run("detect", path)
    assert r.exit_code == 0
    assert json.loads(r.output) == []


def test_detect_non_48k_wav_exit_2(tmp_path):
    import scipy.io.wavfile as wavfile
    path = tmp_path / "wrong_rate.wav"
    wavfile.write(path, 44100, np.zeros((44100, 2), dtype=np.int16))
    r = _run("detect", path)
    assert r.exit_code == 2
    assert "48" in r.output


def test_detect_deterministic(workspace):
    r1 = _run("detect", workspace["enroll0"])
    r2 = _run("detect", workspace["enroll0"])
    assert r1.output == r2.output


# ---------------------------------------------------------------------------
# enroll

def test_enroll_wrote_store_layout(workspace):
    store = workspace["store"]
    manifest = json.loads((store / "manifest.json").read_text())
    assert manifest["users"] == ["user00", "user01"]
    assert (store / "params.npz").exists()
    assert (store / "templates" / "user00.json").exists()
    assert not list(store.glob("**/*.tmp"))


def test_enroll_too_few_occlusions_exit_3(workspace, tmp_path):
    script = _write_script(tmp_path / "few.json",
                           _script_doc(_occlusions("user00", 3)))
    assert _run("synth", script, tmp_path / "few", "--seed", 3).exit_code == 0
    r = _run("--config", workspace["cfg"], "enroll", "user00",
             tmp_path / "few" / "stream.wav", tmp_path / "store2",
             "--seed", 1, "--now", 0)
    assert r.exit_code == 3
    assert "5" in r.output and "3" in r.output


def test_enroll_deterministic(workspace, tmp_path):
    outs = []
    for d in ("sa", "sb"):
        r = _run("--config", workspace["cfg"], "enroll", "user00",
                 workspace["enroll0"], tmp_path / d, "--seed", 5, "--now", 0)
        assert r.exit_code == 0, r.output
        outs.append(r.output)
    assert outs[0] == outs[1]
    for rel in ("manifest.json", "params.npz", "negpool.npz",
                "templates/user00.json", "inputs/user00.npz"):
        assert ((tmp_path / "sa" / rel).read_bytes()
                == (tmp_path / "sb" / rel).read_bytes()), rel


def test_reenroll_replaces_template(workspace, tmp_path):
    store = tmp_path / "re"
    for now in (10, 20):
        r = _run("--config", workspace["cfg"], "enroll", "user00",
                 workspace["enroll0"], store, "--seed", 5, "--now", now)
        assert r.exit_code == 0, r.output
    doc = json.loads((store / "templates" / "user00.json").read_text())
    assert doc["enrolled_at"] == 20
    assert json.loads((store / "manifest.json").read_text())["users"] == [
        "user00"]


# ---------------------------------------------------------------------------
# login

def test_login_genuine_accept_exit_0(workspace):
    r = _run("--config", workspace["cfg"], "login", workspace["login0"],
             workspace["store"], "--now", 200)
    assert r.exit_code == 0, r.output
    d = json.loads(r.output)
    assert d["accepted"] is True
    assert d["matched_user"] == "user00"
    assert set(d["scores"]) == {"embed_dist", "ds_left", "ds_right", "dr"}


def test_login_impostor_reject_exit_1(workspace):
    r = _run("--config", workspace["cfg"], "login", workspace["impostor"],
             workspace["store"], "--now", 210)
    assert r.exit_code == 1
    d = json.loads(r.output)
    assert d["accepted"] is False and d["matched_user"] is None


def test_login_lockout_after_4_impostor_failures(workspace, tmp_path):
    # work on a copy so other tests see a clean store
    import shutil
    store = tmp_path / "store"
    shutil.copytree(workspace["store"], store)
    for i in range(4):
        r = _run("--config", workspace["cfg"], "login",
                 workspace["impostor"], store, "--now", 300 + i)
        assert r.exit_code == 1
    # the attacked (nearest) account is now locked for its true owner
    locked = [u for u in ("user00", "user01")
              if json.loads((store / "templates" / f"{u}.json").read_text()
                            )["lockout"]["locked_until"] is not None]
    assert len(locked) == 1
    wav = workspace["login0" if locked[0] == "user00" else "login1"]
    r = _run("--config", workspace["cfg"], "login", wav, store, "--now", 310)
    assert r.exit_code == 1
    assert json.loads(r.output)["reason"] == "locked"
    # lock expires after auth.lock_duration_s (60 s)
    r = _run("--config", workspace["cfg"], "login", wav, store, "--now", 400)
    assert r.exit_code == 0, r.output


def test_login_no_occlusion_exit_2(workspace, tmp_path):
    import scipy.io.wavfile as wavfile
    path = tmp_path / "silent.wav"
    wavfile.write(path, SAMPLE_RATE,
                  np.zeros((SAMPLE_RATE, 2), dtype=np.int16))
    r = _run("--config", workspace["cfg"], "login", path,
             workspace["store"], "--now", 0)
    assert r.exit_code == 2


def test_login_deterministic(workspace, tmp_path):
    import shutil
    outs = []
    for d in ("la", "lb"):
        store = tmp_path / d
        shutil.copytree(workspace["store"], store)
        r = _run("--config", workspace["cfg"], "login", workspace["login0"],
                 store, "--now", 200)
        outs.append((r.output,
                     (store / "templates" / "user00.json").read_bytes()))
    assert outs[0] == outs[1]


# ---------------------------------------------------------------------------
# eval

def test_eval_csv_rates(workspace, tmp_path):
    ds = tmp_path / "dataset"
    for name in ("login0", "login1", "impostor"):
        d = ds / name
        d.mkdir(parents=True)
        src = workspace[name].parent
        (d / "stream.wav").write_bytes((src / "stream.wav").read_bytes())
        (d / "labels.json").write_bytes((src / "labels.json").read_bytes())
    r = _run("--config", workspace["cfg"], "eval", ds, workspace["store"])
    assert r.exit_code == 0, r.output
    lines = r.output.strip().splitlines()
    assert lines[0] == "user,attempts,accepts,rejects,frr,far"
    rows = {l.split(",")[0]: l.split(",") for l in lines[1:]}
    assert rows["user00"][4] == "0.000000"   # frr
    assert rows["user01"][4] == "0.000000"
    assert rows["intr00"][5] == "0.000000"   # far
    r2 = _run("--config", workspace["cfg"], "eval", ds, workspace["store"])
    assert r2.output == r.output


def test_eval_empty_dataset_exit_2(workspace, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    r = _run("--config", workspace["cfg"], "eval", empty, workspace["store"])
    assert r.exit_code == 2


# ---------------------------------------------------------------------------
# config plumbing

def test_unknown_config_key_exit_2(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("detector.tt1 = 5\n")
    r = _run("--config", bad, "detect", "--help")
    assert r.exit_code == 2
    assert "unknown config key" in r.output


def test_override_precedence_flag_beats_file(tmp_path):
    import scipy.io.wavfile as wavfile
    cfgfile = tmp_path / "c.cfg"
    cfgfile.write_text("detector.t1 = 5.0\n")
    path = tmp_path / "s.wav"
    wavfile.write(path, SAMPLE_RATE,
                  np.zeros((SAMPLE_RATE // 2, 2), dtype=np.int16))
    # invalid override (t2 >= t1) proves the flag value is the one in force
    r = _run("--config", cfgfile, "-o", "detector.t1=0.5", "detect", path)
    assert r.exit_code == 2
    ok = _run("--config", cfgfile, "-o", "detector.t1=50.0", "detect", path)
    assert ok.exit_code == 0


def test_malformed_override_exit_2():
    r = _run("-o", "detector.t1", "detect", "x.wav")
    assert r.exit_code == 2
