"""Command-line surface: synthesis, detection, enrollment, login, evaluation.

Exit codes: 0 success, 1 authentication rejected, 2 invalid input or
config, 3 insufficient enrollment data.  Every command is deterministic
given (inputs, config, seed); wall-clock time only enters through the
explicit ``--now`` flag.
"""

from __future__ import annotations

import csv
import io
import json
import os
import sys
import tempfile
import time
from pathlib import Path

import click
import numpy as np

from . import bench, network, pipeline, synth, templates as tpl
from .config import ConfigError, load_config
from .frontend import SAMPLE_RATE, StereoCapture
from .io_wav import WavFormatError, read_stereo, write_stereo
from .motion import EventClass

EXIT_OK = 0
EXIT_REJECTED = 1
EXIT_INVALID = 2
EXIT_TOO_FEW_EVENTS = 3

_INPUT_ERRORS = (ConfigError, WavFormatError, synth.SynthError,
                 tpl.TemplateError, network.NetworkError,
                 json.JSONDecodeError, OSError, ValueError)


def _fail(msg: str, code: int = EXIT_INVALID) -> None:
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _parse_overrides(pairs: tuple[str, ...]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            _fail(f"option override must look like key=value, got {pair!r}")
        key, val = pair.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def _capture(wav_path: str) -> StereoCapture:
    left, right = read_stereo(wav_path)
    return StereoCapture(left=left, right=right)


# ---------------------------------------------------------------------------
# template store directory: manifest + network params + per-user documents

class Store:
    """On-disk authentication state.

    Layout: ``manifest.json`` (user list and file pointers), ``params.npz``
    (embedding network weights), ``negpool.npz`` (pre-training sample pool
    reused as triplet negatives), ``inputs/<user>.npz`` (retained enrollment
    network inputs, needed to re-embed templates after later fine-tuning),
    and ``templates/<user>.json``.  All writes are write-temp-then-rename.
    """

    MANIFEST_VERSION = 1

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.templates = tpl.TemplateStore(self.root / "templates")
        (self.root / "inputs").mkdir(parents=True, exist_ok=True)

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    @property
    def params_path(self) -> Path:
        return self.root / "params.npz"

    @property
    def pool_path(self) -> Path:
        return self.root / "negpool.npz"

    def _write_atomic(self, path: Path, data: bytes) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def write_manifest(self) -> None:
        doc = {"version": self.MANIFEST_VERSION,
               "users": self.templates.users(),
               "params_file": self.params_path.name,
               "pool_file": self.pool_path.name}
        self._write_atomic(self.manifest_path,
                           json.dumps(doc, sort_keys=True, indent=1).encode())

    def initialized(self) -> bool:
        return self.manifest_path.exists()

    def check_manifest(self) -> dict:
        doc = json.loads(self.manifest_path.read_text())
        if doc.get("version") != self.MANIFEST_VERSION:
            raise tpl.TemplateError(
                f"unsupported store version {doc.get('version')}")
        return doc

    def save_params(self, params: network.NetworkParams) -> None:
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        os.close(fd)
        try:
            network.save_params(params, tmp)
            os.replace(tmp, self.params_path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def load_params(self) -> network.NetworkParams:
        return network.load_params(self.params_path)

    @staticmethod
    def _pack_inputs(inputs: list) -> bytes:
        imgs = np.stack([img for img, _ in inputs])
        tees = np.stack([tee for _, tee in inputs])
        buf = io.BytesIO()
        np.savez(buf, images=imgs, teeth=tees)
        return buf.getvalue()

    @staticmethod
    def _unpack_inputs(path: Path) -> list:
        with np.load(path) as z:
            imgs, tees = z["images"], z["teeth"]
        return [(imgs[i], tees[i]) for i in range(len(imgs))]

    def save_pool(self, pool: list) -> None:
        self._write_atomic(self.pool_path, self._pack_inputs(pool))

    def load_pool(self) -> list:
        return self._unpack_inputs(self.pool_path)

    def _inputs_path(self, user_id: str) -> Path:
        safe = "".join(c if c.isalnum() or c in "-_" else "_" for c in user_id)
        return self.root / "inputs" / f"{safe}.npz"

    def save_inputs(self, user_id: str, inputs: list) -> None:
        self._write_atomic(self._inputs_path(user_id),
                           self._pack_inputs(inputs))

    def load_inputs(self, user_id: str) -> list:
        return self._unpack_inputs(self._inputs_path(user_id))


def _avg_embedding(inputs: list, params: network.NetworkParams) -> np.ndarray:
    embs = np.stack([network.forward(params, img, tee.ravel())
                     for img, tee in inputs])
    avg = embs.mean(axis=0)
    norm = np.linalg.norm(avg)
    if norm < 1e-12:
        return np.full(embs.shape[1], 1.0 / np.sqrt(embs.shape[1]))
    return avg / norm


def _thresholds_from(cfg) -> tpl.AuthThresholds:
    return tpl.AuthThresholds(tau_embed=cfg.auth_tau_embed,
                              tau_ds=cfg.auth_tau_ds,
                              tau_dr=cfg.auth_tau_dr)


# ---------------------------------------------------------------------------
# command group

@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True,
              dir_okay=False), default=None,
              help="Plain-text key-value config file.")
@click.option("-o", "--opt", "overrides", multiple=True, metavar="KEY=VALUE",
              help="Config override; wins over the file and defaults.")
@click.pass_context
def main(ctx, config_path, overrides):
    """Bone-conducted dental-occlusion authentication toolkit."""
    try:
        ctx.obj = load_config(config_path, _parse_overrides(overrides))
    except ConfigError as exc:
        _fail(str(exc))


@main.command("synth")
@click.argument("script_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0, show_default=True)
@click.pass_obj
def cmd_synth(cfg, script_path, out_dir, seed):
    """Render a scripted binaural scene to OUT_DIR/stream.wav + labels.json.

    The script JSON holds duration_s, ambient_snr_db, an events list, and
    the user profiles (embedded documents and/or a random_profiles block).
    """
    try:
        doc = json.loads(Path(script_path).read_text())
        script = synth.script_from_json(doc)
        profiles = synth.profiles_from_script_json(doc)
        left, right, labels = synth.gen_stream(script, profiles, seed=seed)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_stereo(out / "stream.wav", left, right)
        (out / "labels.json").write_text(
            json.dumps(labels, sort_keys=True, indent=1) + "\n")
    except _INPUT_ERRORS as exc:
        _fail(str(exc))
    click.echo(f"wrote {out / 'stream.wav'} and {out / 'labels.json'}")


@main.command("detect")
@click.argument("wav_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--all-classes", is_flag=True,
              help="Emit every detected event, not just occlusion candidates.")
@click.pass_obj
def cmd_detect(cfg, wav_path, all_classes):
    """Detect and classify events in a 48 kHz stereo WAV; JSON on stdout."""
    try:
        detected = pipeline.detect_in_capture(_capture(wav_path), cfg)
    except _INPUT_ERRORS as exc:
        _fail(str(exc))
    rows = [{"class": d.event_class.value,
             "start_s": round(d.event.start_s, 6),
             "end_s": round(d.event.end_s, 6)}
            for d in detected
            if all_classes or d.event_class is EventClass.OCCLUSION_CANDIDATE]
    click.echo(json.dumps(rows, sort_keys=True, indent=1))


@main.command("enroll")
@click.argument("user_id")
@click.argument("wav_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("store_dir", type=click.Path(file_okay=False))
@click.option("--seed", type=int, default=0, show_default=True,
              help="Seed for augmentation and triplet sampling.")
@click.option("--now", type=float, default=None,
              help="Timestamp to record instead of wall-clock time.")
@click.pass_obj
def cmd_enroll(cfg, user_id, wav_path, store_dir, seed, now):
    """Enroll USER_ID from a capture containing their occlusion events.

    Requires at least auth.min_enroll occlusion candidates in the stream
    (exit 3 otherwise).  The embedding network is fine-tuned on the new
    user's augmented events, so existing templates are re-embedded in the
    updated space.
    """
    if now is None:
        now = time.time()
    try:
        bundles = pipeline.extract_bundles(_capture(wav_path), cfg)
    except _INPUT_ERRORS as exc:
        _fail(str(exc))
    if len(bundles) < cfg.auth_min_enroll:
        _fail(f"enrollment needs at least {cfg.auth_min_enroll} occlusion "
              f"events, found {len(bundles)}", EXIT_TOO_FEW_EVENTS)
    try:
        store = Store(store_dir)
        if store.initialized():
            store.check_manifest()
            params = store.load_params()
            pool = store.load_pool()
        else:
            params, _, pool = bench.pretrain_network(cfg)
            store.save_pool(pool)
        rng = np.random.default_rng(seed)
        others = [u for u in store.templates.users() if u != user_id]
        negatives = list(pool)
        for uid in others:
            negatives.extend(store.load_inputs(uid))
        new_inputs = bench.augmented_inputs(bundles, cfg, rng)
        triplets = bench.new_user_triplets(new_inputs, negatives, rng,
                                           cfg.net_triplet_cap)
        tc = network.train_config_from(cfg, fine_tune=True)
        params, _ = network.fine_tune_incremental(params, triplets, tc)

        store.save_inputs(user_id, bench.bundle_inputs(bundles))
        store.templates.save(tpl.build_template(
            user_id, bundles, params, min_enroll=cfg.auth_min_enroll,
            enrolled_at=now))
        # fine-tuning moved the embedding space; re-embed everyone else's
        # template from their retained enrollment inputs
        for uid in others:
            t = store.templates.load(uid)
            t.avg_embedding = _avg_embedding(store.load_inputs(uid), params)
            store.templates.save(t)
        store.save_params(params)
        store.write_manifest()
    except _INPUT_ERRORS as exc:
        _fail(str(exc))
    click.echo(json.dumps({"user_id": user_id,
                           "events_used": len(bundles),
                           "enrolled_users": store.templates.users()},
                          sort_keys=True, indent=1))


def _authenticate_bundle(bundle, temps, params, cfg, now):
    """Decision plus the full four-score record of the nearest template."""
    scores = bench.collect_scores(bundle, temps, params)
    decision = tpl.authenticate(bundle, temps, _thresholds_from(cfg), params,
                                now=now)
    return decision, scores


@main.command("login")
@click.argument("wav_path", type=click.Path(exists=True, dir_okay=False))
@click.argument("store_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--now", type=float, default=None,
              help="Timestamp for lockout checks instead of wall-clock time.")
@click.pass_obj
def cmd_login(cfg, wav_path, store_dir, now):
    """Authenticate the first occlusion candidate in the capture.

    Prints a decision JSON with all four scores; exit 0 on accept, 1 on
    reject.  The nearest-template user's lockout state is updated.
    """
    if now is None:
        now = time.time()
    try:
        store = Store(store_dir)
        store.check_manifest()
        temps = store.templates.load_all()
        if not temps:
            raise tpl.TemplateError("store has no enrolled users")
        params = store.load_params()
        bundles = pipeline.extract_bundles(_capture(wav_path), cfg)
        if not bundles:
            raise tpl.TemplateError("no occlusion candidate in the capture")
        decision, scores = _authenticate_bundle(bundles[0], temps, params,
                                                cfg, now)
        nearest = scores["matched"]
        state = next(t for t in temps if t.user_id == nearest).lockout
        store.templates.update_lockout(
            nearest, tpl.update_lockout(state, decision, now=now,
                                        lock_after=cfg.auth_lock_after,
                                        lock_duration_s=cfg.auth_lock_duration_s))
    except _INPUT_ERRORS as exc:
        _fail(str(exc))
    click.echo(json.dumps(
        {"accepted": decision.accepted,
         "matched_user": decision.matched_user,
         "reason": decision.reason.value,
         "scores": {"embed_dist": scores["embed_dist"],
                    "ds_left": scores["ds_left"],
                    "ds_right": scores["ds_right"],
                    "dr": scores["dr"]}},
        sort_keys=True, indent=1))
    sys.exit(EXIT_OK if decision.accepted else EXIT_REJECTED)


def _labeled_streams(dataset_dir: Path):
    """(wav, labels) pairs: <stem>.json next to the WAV, else labels.json."""
    for wav in sorted(dataset_dir.rglob("*.wav")):
        for cand in (wav.with_suffix(".json"), wav.parent / "labels.json"):
            if cand.exists():
                yield wav, cand
                break


def _match_label(ev, occlusion_labels):
    """Index of the occlusion label overlapping a detected event, or None."""
    for i, lab in enumerate(occlusion_labels):
        if ev.start_s < lab["end_s"] and ev.end_s > lab["start_s"]:
            return i
    return None


@main.command("eval")
@click.argument("dataset_dir", type=click.Path(exists=True, file_okay=False))
@click.argument("store_dir", type=click.Path(exists=True, file_okay=False))
@click.option("--now", type=float, default=0.0, show_default=True,
              help="Timestamp for lockout checks.")
@click.pass_obj
def cmd_eval(cfg, dataset_dir, store_dir, now):
    """Batch-evaluate labeled streams against a store; CSV on stdout.

    Every labeled occlusion is an attempt by its labeled user: genuine if
    that user is enrolled (misses and wrong-identity accepts count as
    rejects), impostor otherwise.  Per-user rows report frr for enrolled
    users and far for impostors.  Stored lockout state is neither honored
    nor modified: this measures the matcher, not access control.
    """
    try:
        store = Store(store_dir)
        store.check_manifest()
        temps = store.templates.load_all()
        for t in temps:
            t.lockout = tpl.LockoutState()
        if not temps:
            raise tpl.TemplateError("store has no enrolled users")
        params = store.load_params()
        enrolled = {t.user_id for t in temps}

        stats: dict[str, dict] = {}
        for wav, labels_path in _labeled_streams(Path(dataset_dir)):
            labels = [lab for lab in json.loads(labels_path.read_text())
                      if lab["kind"] == "occlusion"]
            capture = _capture(wav)
            events = pipeline.occlusion_candidates(capture, cfg)
            decided = [None] * len(labels)
            for ev in events:
                i = _match_label(ev, labels)
                if i is None or decided[i] is not None:
                    continue
                try:
                    bundle = pipeline.bundle_from_event_samples(
                        ev.left, ev.right, cfg, denoise=False)
                except Exception:
                    continue
                decided[i], _ = _authenticate_bundle(bundle, temps, params,
                                                     cfg, now)
            for lab, decision in zip(labels, decided):
                uid = lab["user_id"]
                row = stats.setdefault(uid, {"attempts": 0, "accepts": 0})
                row["attempts"] += 1
                if decision is not None and decision.accepted and (
                        uid not in enrolled or decision.matched_user == uid):
                    row["accepts"] += 1

        if not stats:
            raise tpl.TemplateError("dataset contains no labeled occlusions")
    except _INPUT_ERRORS as exc:
        _fail(str(exc))

    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["user", "attempts", "accepts", "rejects", "frr", "far"])
    for uid in sorted(stats):
        att = stats[uid]["attempts"]
        acc = stats[uid]["accepts"]
        rej = att - acc
        if uid in enrolled:
            frr, far = f"{rej / att:.6f}", ""
        else:
            frr, far = "", f"{acc / att:.6f}"
        writer.writerow([uid, att, acc, rej, frr, far])
    click.echo(out.getvalue(), nl=False)


if __name__ == "__main__":
    main()
