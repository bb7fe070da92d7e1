"""User templates, the two-stage login decision, lockout, and the on-disk
template store.

A template holds the user's mean embedding (re-normalized), mean resampled
zero-crossing spacing curves for both ears, and the mean band-lag vector.
Login first finds the nearest template by embedding distance, then requires
at least two of the three structural checks (left spacings, right spacings,
band lags) to pass their thresholds.
"""

from __future__ import annotations

import json
import os
import tempfile
import time as _time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import network
from .features import FeatureBundle

STORE_VERSION = 1
ZS_TEMPLATE_LEN = 64


class TemplateError(ValueError):
    pass


class AuthReason(Enum):
    ACCEPTED = "accepted"
    NO_EMBED_MATCH = "no_embed_match"
    STRUCTURAL_MISMATCH = "structural_mismatch"
    LOCKED = "locked"


@dataclass
class LockoutState:
    consecutive_failures: int = 0
    locked_until: float | None = None

    def is_locked(self, now: float) -> bool:
        return self.locked_until is not None and now < self.locked_until

    def to_dict(self) -> dict:
        return {"consecutive_failures": self.consecutive_failures,
                "locked_until": self.locked_until}

    @classmethod
    def from_dict(cls, d: dict) -> "LockoutState":
        return cls(int(d.get("consecutive_failures", 0)),
                   d.get("locked_until"))


@dataclass
class UserTemplate:
    user_id: str
    avg_embedding: np.ndarray
    zs_left_avg: np.ndarray       # 64-point resampled spacing curve (seconds)
    zs_right_avg: np.ndarray
    rb_avg: np.ndarray            # 5 band lags (seconds)
    enrolled_at: float = 0.0
    device_id: str = ""
    lockout: LockoutState = field(default_factory=LockoutState)

    def __post_init__(self):
        self.avg_embedding = np.asarray(self.avg_embedding, dtype=np.float64)
        self.zs_left_avg = np.asarray(self.zs_left_avg, dtype=np.float64)
        self.zs_right_avg = np.asarray(self.zs_right_avg, dtype=np.float64)
        self.rb_avg = np.asarray(self.rb_avg, dtype=np.float64)
        if abs(np.linalg.norm(self.avg_embedding) - 1.0) > 1e-6:
            raise TemplateError("template embedding must be unit norm")
        if self.rb_avg.shape != (5,):
            raise TemplateError("rb_avg must have 5 band lags")
        if np.any(self.zs_left_avg <= 0) or np.any(self.zs_right_avg <= 0):
            raise TemplateError("zero-crossing spacing curves must be positive")

    def to_dict(self) -> dict:
        return {"version": STORE_VERSION,
                "user_id": self.user_id,
                "avg_embedding": self.avg_embedding.tolist(),
                "zs_left_avg": self.zs_left_avg.tolist(),
                "zs_right_avg": self.zs_right_avg.tolist(),
                "rb_avg": self.rb_avg.tolist(),
                "enrolled_at": self.enrolled_at,
                "device_id": self.device_id,
                "lockout": self.lockout.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "UserTemplate":
        if d.get("version") != STORE_VERSION:
            raise TemplateError(f"unsupported template version {d.get('version')}")
        return cls(user_id=d["user_id"],
                   avg_embedding=np.array(d["avg_embedding"]),
                   zs_left_avg=np.array(d["zs_left_avg"]),
                   zs_right_avg=np.array(d["zs_right_avg"]),
                   rb_avg=np.array(d["rb_avg"]),
                   enrolled_at=float(d.get("enrolled_at", 0.0)),
                   device_id=d.get("device_id", ""),
                   lockout=LockoutState.from_dict(d.get("lockout", {})))


@dataclass
class AuthThresholds:
    tau_embed: float
    tau_ds: float
    tau_dr: float

    def __post_init__(self):
        if min(self.tau_embed, self.tau_ds, self.tau_dr) <= 0:
            raise TemplateError("auth thresholds must be positive")


@dataclass
class AuthDecision:
    accepted: bool
    matched_user: str | None
    scores: dict
    reason: AuthReason

    def __post_init__(self):
        if self.accepted and self.matched_user is None:
            raise TemplateError("accepted decision needs a matched user")


def resample_curve(seq: np.ndarray, length: int = ZS_TEMPLATE_LEN) -> np.ndarray:
    """Uniform re-parameterization of a variable-length sequence onto a
    fixed grid (linear interpolation over the normalized index)."""
    seq = np.asarray(seq, dtype=np.float64)
    if len(seq) == 0:
        raise TemplateError("cannot resample an empty sequence")
    if len(seq) == 1:
        return np.full(length, seq[0])
    src = np.linspace(0.0, 1.0, len(seq))
    dst = np.linspace(0.0, 1.0, length)
    return np.interp(dst, src, seq)


def _bundle_embedding(bundle: FeatureBundle, params: network.NetworkParams
                      ) -> np.ndarray:
    return network.forward(params, bundle.acoustic.image,
                           bundle.teeth.stacked().ravel())


def build_template(user_id: str, bundles: list[FeatureBundle],
                   params: network.NetworkParams, min_enroll: int = 5,
                   enrolled_at: float = 0.0, device_id: str = "") -> UserTemplate:
    """Average the enrollment features into a stored template."""
    if len(bundles) < min_enroll:
        raise TemplateError(
            f"enrollment needs at least {min_enroll} occlusion events, "
            f"got {len(bundles)}")
    embs = np.stack([_bundle_embedding(b, params) for b in bundles])
    avg = embs.mean(axis=0)
    norm = np.linalg.norm(avg)
    if norm < 1e-12:
        avg = np.full(embs.shape[1], 1.0 / np.sqrt(embs.shape[1]))
    else:
        avg = avg / norm
    zs_l = np.stack([resample_curve(b.bone.zs_left) for b in bundles]).mean(axis=0)
    zs_r = np.stack([resample_curve(b.bone.zs_right) for b in bundles]).mean(axis=0)
    rb = np.stack([b.location.rb for b in bundles]).mean(axis=0)
    return UserTemplate(user_id=user_id, avg_embedding=avg,
                        zs_left_avg=zs_l, zs_right_avg=zs_r, rb_avg=rb,
                        enrolled_at=enrolled_at, device_id=device_id)


def structural_scores(bundle: FeatureBundle, template: UserTemplate) -> dict:
    ds_l = float(np.mean(np.abs(resample_curve(bundle.bone.zs_left)
                                - template.zs_left_avg)))
    ds_r = float(np.mean(np.abs(resample_curve(bundle.bone.zs_right)
                                - template.zs_right_avg)))
    dr = float(np.mean(np.abs(bundle.location.rb - template.rb_avg)))
    return {"ds_left": ds_l, "ds_right": ds_r, "dr": dr}


def authenticate(bundle: FeatureBundle, templates: list[UserTemplate],
                 thresholds: AuthThresholds, params: network.NetworkParams,
                 now: float | None = None) -> AuthDecision:
    """Two-stage decision: nearest embedding, then two-of-three structure."""
    if not templates:
        raise TemplateError("empty template store")
    if now is None:
        now = _time.time()
    emb = _bundle_embedding(bundle, params)
    dists = [float(np.linalg.norm(emb - t.avg_embedding)) for t in templates]
    best = int(np.argmin(dists))
    scores = {"embed_dist": dists[best]}
    if dists[best] > thresholds.tau_embed:
        return AuthDecision(False, None, scores, AuthReason.NO_EMBED_MATCH)
    cand = templates[best]
    if cand.lockout.is_locked(now):
        return AuthDecision(False, None, scores, AuthReason.LOCKED)
    scores.update(structural_scores(bundle, cand))
    passes = sum([scores["ds_left"] < thresholds.tau_ds,
                  scores["ds_right"] < thresholds.tau_ds,
                  scores["dr"] < thresholds.tau_dr])
    if passes >= 2:
        return AuthDecision(True, cand.user_id, scores, AuthReason.ACCEPTED)
    return AuthDecision(False, None, scores, AuthReason.STRUCTURAL_MISMATCH)


def update_lockout(state: LockoutState, decision: AuthDecision,
                   now: float | None = None, lock_after: int = 4,
                   lock_duration_s: float = 60.0) -> LockoutState:
    """Consecutive-failure counting; success resets, the Nth failure locks.

    Attempts refused because the account is already locked leave the state
    untouched (being locked is not a new failure).
    """
    if now is None:
        now = _time.time()
    if decision.reason is AuthReason.LOCKED:
        return LockoutState(state.consecutive_failures, state.locked_until)
    if decision.accepted:
        return LockoutState(0, None)
    failures = state.consecutive_failures + 1
    locked_until = state.locked_until
    if failures >= lock_after:
        locked_until = now + lock_duration_s
    return LockoutState(failures, locked_until)


# ---------------------------------------------------------------------------
# threshold calibration

def _sweep_channel(genuine: np.ndarray, impostor: np.ndarray
                   ) -> tuple[float, float]:
    """Threshold minimizing (FRR + FAR)/2 for a lower-is-better score.

    Ties break toward the threshold with the lower FAR (i.e. the smaller
    candidate value).
    """
    cands = np.unique(np.concatenate([genuine, impostor]))
    # midpoints between consecutive scores, plus outer sentinels
    if len(cands) > 1:
        mids = 0.5 * (cands[1:] + cands[:-1])
    else:
        mids = np.array([])
    grid = np.concatenate([[cands[0] * 0.5 if cands[0] > 0 else cands[0] - 1.0],
                           mids, [cands[-1] * 1.5 + 1e-12]])
    best_t, best_err, best_far = None, None, None
    for t in grid:
        frr = float(np.mean(genuine >= t))
        far = float(np.mean(impostor < t))
        err = 0.5 * (frr + far)
        if best_err is None or err < best_err - 1e-15 or \
                (abs(err - best_err) <= 1e-15 and far < best_far):
            best_t, best_err, best_far = float(t), err, far
    return best_t, best_err


def _decide(s: dict, tau_embed: float, tau_ds: float, tau_dr: float) -> bool:
    if s["embed_dist"] > tau_embed:
        return False
    passes = (int(s["ds_left"] < tau_ds) + int(s["ds_right"] < tau_ds)
              + int(s["dr"] < tau_dr))
    return passes >= 2


def _candidate_grid(values: np.ndarray) -> np.ndarray:
    cands = np.unique(values)
    if len(cands) > 1:
        mids = 0.5 * (cands[1:] + cands[:-1])
    else:
        mids = np.array([])
    lo = cands[0] * 0.5 if cands[0] > 0 else cands[0] - 1.0
    return np.concatenate([[lo], mids, [cands[-1] * 1.5 + 1e-12]])


def calibrate_auth_thresholds(genuine_scores: list[dict],
                              impostor_scores: list[dict]) -> AuthThresholds:
    """Per-channel threshold sweeps minimizing (FRR + FAR)/2.

    Channels are initialized at their isolated equal-error points, then each
    is re-swept in turn against the full two-of-three decision rule (the
    band-lag channel is legitimately bimodal — impostors biting at the same
    occlusal location pass it — so its isolated error curve says little).
    Ties break toward lower FAR, then toward the smaller threshold.
    """
    if not genuine_scores or not impostor_scores:
        raise TemplateError("calibration needs both genuine and impostor scores")

    def col(scores, key):
        return np.array([s[key] for s in scores if key in s], dtype=np.float64)

    tau_embed, _ = _sweep_channel(col(genuine_scores, "embed_dist"),
                                  col(impostor_scores, "embed_dist"))
    ds_all_g = np.concatenate([col(genuine_scores, "ds_left"),
                               col(genuine_scores, "ds_right")])
    ds_all_i = np.concatenate([col(impostor_scores, "ds_left"),
                               col(impostor_scores, "ds_right")])
    tau_ds, _ = _sweep_channel(ds_all_g, ds_all_i)
    tau_dr, _ = _sweep_channel(col(genuine_scores, "dr"),
                               col(impostor_scores, "dr"))
    taus = {"embed": float(tau_embed), "ds": float(tau_ds), "dr": float(tau_dr)}

    grids = {
        "embed": _candidate_grid(np.concatenate([col(genuine_scores, "embed_dist"),
                                                 col(impostor_scores, "embed_dist")])),
        "ds": _candidate_grid(np.concatenate([ds_all_g, ds_all_i])),
        "dr": _candidate_grid(np.concatenate([col(genuine_scores, "dr"),
                                              col(impostor_scores, "dr")])),
    }

    def composite(te, ts, tr):
        frr = 1.0 - np.mean([_decide(s, te, ts, tr) for s in genuine_scores])
        far = float(np.mean([_decide(s, te, ts, tr) for s in impostor_scores]))
        return 0.5 * (frr + far), far

    for _ in range(2):
        for ch in ("ds", "dr", "embed"):
            best = None
            results = []
            for t in grids[ch]:
                trial = dict(taus)
                trial[ch] = float(t)
                err, far = composite(trial["embed"], trial["ds"], trial["dr"])
                results.append((err, far, float(t)))
                if best is None or (err, far) < best:
                    best = (err, far)
            # all candidates tied at the optimum form a plateau; pick an
            # interior point rather than the strict edge so small genuine
            # outliers on fresh data do not immediately fail the channel
            plateau = sorted(t for err, far, t in results
                             if (err, far) == best)
            taus[ch] = plateau[int(0.3 * (len(plateau) - 1))]

    return AuthThresholds(tau_embed=max(taus["embed"], 1e-12),
                          tau_ds=max(taus["ds"], 1e-12),
                          tau_dr=max(taus["dr"], 1e-12))


# ---------------------------------------------------------------------------
# on-disk store: one JSON document per user

class TemplateStore:
    """Directory of per-user JSON templates with atomic writes."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, user_id: str) -> Path:
        safe = "".join(c if c.isalnum() or c in "-_" else "_" for c in user_id)
        return self.root / f"{safe}.json"

    def save(self, template: UserTemplate) -> None:
        payload = json.dumps(template.to_dict(), sort_keys=True, indent=1)
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as fh:
                fh.write(payload)
            os.replace(tmp, self._path(template.user_id))
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def load(self, user_id: str) -> UserTemplate:
        path = self._path(user_id)
        if not path.exists():
            raise TemplateError(f"no template for user {user_id!r}")
        return UserTemplate.from_dict(json.loads(path.read_text()))

    def load_all(self) -> list[UserTemplate]:
        out = []
        for p in sorted(self.root.glob("*.json")):
            out.append(UserTemplate.from_dict(json.loads(p.read_text())))
        return out

    def users(self) -> list[str]:
        return sorted(t.user_id for t in self.load_all())

    def delete(self, user_id: str) -> None:
        path = self._path(user_id)
        if path.exists():
            path.unlink()

    def update_lockout(self, user_id: str, state: LockoutState) -> None:
        t = self.load(user_id)
        t.lockout = state
        self.save(t)
