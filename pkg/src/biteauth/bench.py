"""Synthetic end-to-end benchmarks: pre-training, enrollment, verification.

These drive the whole stack (generator -> features -> network -> templates)
and report FRR/FAR, both for the library's own regression suite and for the
`eval` CLI command.
"""

from __future__ import annotations

import numpy as np

from . import network, pipeline, synth, templates as tpl


def profile_bundles(profile: synth.SyntheticUserProfile, count: int, cfg,
                    rng: np.random.Generator):
    """Feature bundles for `count` fresh occlusion events of one user."""
    out = []
    for _ in range(count):
        dur = 1000.0 * synth.natural_duration_s(profile)
        dur = float(np.clip(dur * rng.uniform(0.999, 1.001), 10.0, 20.0))
        left, right = synth.gen_occlusion(profile, dur, rng)
        out.append(pipeline.bundle_from_event_samples(left, right, cfg))
    return out


def bundle_inputs(bundles) -> list:
    """(image, teeth-vector) network inputs for a list of bundles."""
    return [(b.acoustic.image, b.teeth.stacked()) for b in bundles]


def augmented_inputs(bundles, cfg, rng: np.random.Generator) -> list:
    """Original inputs plus augmented copies."""
    out = []
    for img, tee in bundle_inputs(bundles):
        out.append((img, tee))
        out.extend(network.augment(img, tee, cfg, rng))
    return out


def pretrain_network(cfg, profiles=None, events_per_user: int = 8,
                     seed: int | None = None
                     ) -> tuple[network.NetworkParams, list[float], list]:
    """Train the embedding network on the built-in fixed profile set.

    Also returns the training sample pool, which later enrollments reuse as
    triplet negatives.
    """
    if profiles is None:
        profiles = synth.pretrain_profiles()
    if seed is None:
        seed = cfg.net_seed
    rng = np.random.default_rng(seed)
    by_user = {}
    for p in profiles:
        bundles = profile_bundles(p, events_per_user, cfg, rng)
        by_user[p.user_id] = augmented_inputs(bundles, cfg, rng)
    triplets = network.mine_triplets(by_user, rng, cfg.net_triplet_cap)
    params = network.params_from_config(cfg)
    tc = network.train_config_from(cfg)
    params, history = network.train(params, triplets, tc)
    pool = [s for u in sorted(by_user) for s in by_user[u]]
    return params, history, pool


def new_user_triplets(new_inputs: list, negative_pool: list,
                      rng: np.random.Generator, cap: int) -> list:
    """Anchor/positive pairs from the new user, negatives sampled from the
    pool, capped and seeded-shuffled."""
    if not negative_pool:
        raise network.NetworkError("need negatives from other users")
    pairs = [(a, p) for a in range(len(new_inputs))
             for p in range(len(new_inputs)) if a != p]
    order = rng.permutation(len(pairs))[:cap]
    negs = rng.integers(0, len(negative_pool), len(order))
    return [(new_inputs[pairs[i][0]], new_inputs[pairs[i][1]],
             negative_pool[int(k)]) for i, k in zip(order, negs)]


def enroll_users(profiles, cfg, params: network.NetworkParams,
                 rng: np.random.Generator, events: int | None = None,
                 negative_pool: list | None = None):
    """Enroll each profile in turn: extract features, augment, fine-tune
    the network on the new user's triplets, then build every template in
    the final embedding space.

    Returns (templates, enrollment bundles, updated params).
    """
    if events is None:
        events = cfg.auth_min_enroll
    enroll_bundles = {}
    pool = list(negative_pool or [])
    tc = network.train_config_from(cfg, fine_tune=True)
    for p in profiles:
        bundles = profile_bundles(p, events, cfg, rng)
        enroll_bundles[p.user_id] = bundles
        new_inputs = augmented_inputs(bundles, cfg, rng)
        if pool:
            triplets = new_user_triplets(new_inputs, pool, rng,
                                         cfg.net_triplet_cap)
            params, _ = network.fine_tune_incremental(params, triplets, tc)
        pool.extend(bundle_inputs(bundles))
    temps = [tpl.build_template(uid, enroll_bundles[uid], params,
                                min_enroll=cfg.auth_min_enroll)
             for uid in sorted(enroll_bundles)]
    return temps, enroll_bundles, params


def collect_scores(bundle, temps, params) -> dict:
    """All four login scores of one event against its nearest template."""
    emb = network.forward(params, bundle.acoustic.image,
                          bundle.teeth.stacked().ravel())
    dists = [float(np.linalg.norm(emb - t.avg_embedding)) for t in temps]
    best = int(np.argmin(dists))
    scores = {"embed_dist": dists[best], "matched": temps[best].user_id}
    scores.update(tpl.structural_scores(bundle, temps[best]))
    return scores


def calibrate_on(profiles, impostor_profiles, temps, cfg, params,
                 rng: np.random.Generator, events_per_user: int = 12
                 ) -> tpl.AuthThresholds:
    """Thresholds from held-out genuine and impostor score pools."""
    genuine, impostor = [], []
    for p in profiles:
        for b in profile_bundles(p, events_per_user, cfg, rng):
            s = collect_scores(b, temps, params)
            if s["matched"] == p.user_id:
                genuine.append(s)
            else:
                impostor.append(s)   # mis-matched genuine counts against FAR side
    for p in impostor_profiles:
        for b in profile_bundles(p, events_per_user, cfg, rng):
            impostor.append(collect_scores(b, temps, params))
    return tpl.calibrate_auth_thresholds(genuine, impostor)


def verify_users(profiles, impostor_profiles, temps, thresholds, cfg, params,
                 rng: np.random.Generator, n_genuine: int = 20,
                 n_impostor: int = 20) -> dict:
    """Accept/reject tallies for fresh genuine and impostor events."""
    per_user = {}
    for p in profiles:
        acc = 0
        for b in profile_bundles(p, n_genuine, cfg, rng):
            d = tpl.authenticate(b, temps, thresholds, params, now=0.0)
            if d.accepted and d.matched_user == p.user_id:
                acc += 1
        per_user[p.user_id] = {"genuine_attempts": n_genuine,
                               "genuine_accepts": acc,
                               "frr": 1.0 - acc / n_genuine}
    far_hits = far_total = 0
    n_each = max(1, int(np.ceil(n_impostor * len(profiles)
                                / max(len(impostor_profiles), 1))))
    for p in impostor_profiles:
        for b in profile_bundles(p, n_each, cfg, rng):
            d = tpl.authenticate(b, temps, thresholds, params, now=0.0)
            far_total += 1
            far_hits += int(d.accepted)
    frr = float(np.mean([u["frr"] for u in per_user.values()]))
    far = far_hits / max(far_total, 1)
    return {"per_user": per_user, "frr": frr, "far": far,
            "impostor_attempts": far_total, "impostor_accepts": far_hits}


def run_e2e_benchmark(cfg, n_users: int = 10, seed: int = 11,
                      n_genuine: int = 20, n_impostor: int = 20) -> dict:
    """Pre-train, enroll n_users, calibrate thresholds, verify.

    Returns the metrics dict plus the trained state (params, templates,
    thresholds, profiles) for follow-on incremental tests.
    """
    rng = np.random.default_rng(seed)
    params, history, pool = pretrain_network(cfg)
    profiles = synth.random_profiles(n_users, seed=seed, prefix="bench")
    # attackers carry their own resonance structure: their grid sits between
    # the enrolled users' resonances.  Calibration sees a wider impostor pool
    # (both half-grid offsets) so the threshold sweep samples near-miss
    # resonance collisions instead of only easy rejects.
    impostors = (synth.random_profiles(n_users, seed=seed + 5000,
                                       prefix="intruder",
                                       base_offset_hz=100.0)
                 + synth.random_profiles(n_users, seed=seed + 7000,
                                         prefix="intruder_lo",
                                         base_offset_hz=-100.0))
    fresh_impostors = synth.random_profiles(n_users, seed=seed + 9000,
                                            prefix="attacker",
                                            base_offset_hz=100.0)
    temps, enroll_bundles, params = enroll_users(profiles, cfg, params, rng,
                                                 negative_pool=pool)
    thresholds = calibrate_on(profiles, impostors, temps, cfg, params, rng)
    metrics = verify_users(profiles, fresh_impostors, temps, thresholds, cfg,
                           params, rng, n_genuine, n_impostor)
    metrics["pretrain_loss"] = history
    return {"metrics": metrics, "params": params, "templates": temps,
            "thresholds": thresholds, "profiles": profiles,
            "enroll_bundles": enroll_bundles, "pool": pool, "rng": rng}


def add_user_incremental(state: dict, cfg, seed: int = 77) -> dict:
    """Fine-tune for an 11th user and re-measure everyone.

    Templates are rebuilt from the retained enrollment bundles because the
    embedding space moves with the network parameters.
    """
    rng = state["rng"]
    profiles = state["profiles"]
    # one fresh user below the enrolled resonance grid (still >= 200 Hz away)
    new_profile = synth.random_profiles(1, seed=seed, prefix="late",
                                        base_offset_hz=-200.0)[0]
    new_bundles = profile_bundles(new_profile, cfg.auth_min_enroll, cfg, rng)

    # new triplets only: anchors/positives from the new user, negatives
    # sampled from the existing users' enrollment data
    new_inputs = augmented_inputs(new_bundles, cfg, rng)
    # augmented negatives spread the repulsion gradient over each prior
    # user's neighbourhood instead of hammering five fixed points, which
    # keeps the existing clusters much more stable
    neg_inputs = []
    for uid in sorted(state["enroll_bundles"]):
        neg_inputs.extend(augmented_inputs(state["enroll_bundles"][uid],
                                           cfg, rng))
    triplets = new_user_triplets(new_inputs, neg_inputs, rng,
                                 cfg.net_triplet_cap)
    tc = network.train_config_from(cfg, fine_tune=True)
    params, history = network.fine_tune_incremental(state["params"], triplets, tc)

    all_profiles = list(profiles) + [new_profile]
    bundles = dict(state["enroll_bundles"])
    bundles[new_profile.user_id] = new_bundles
    temps = [tpl.build_template(uid, bundles[uid], params,
                                min_enroll=cfg.auth_min_enroll)
             for uid in sorted(bundles)]
    # re-run threshold calibration on the grown population: the new user's
    # genuine score distribution was never seen by the original sweep
    cal_impostors = (synth.random_profiles(len(profiles), seed=seed + 5000,
                                           prefix="intruder",
                                           base_offset_hz=100.0)
                     + synth.random_profiles(len(profiles), seed=seed + 7000,
                                             prefix="intruder_lo",
                                             base_offset_hz=-100.0))
    thresholds = calibrate_on(all_profiles, cal_impostors, temps, cfg, params,
                              rng)
    impostors = synth.random_profiles(4, seed=seed + 9000, prefix="attacker2",
                                      base_offset_hz=100.0)
    metrics = verify_users(all_profiles, impostors, temps, thresholds,
                           cfg, params, rng)
    metrics["finetune_loss"] = history
    return {"metrics": metrics, "params": params, "templates": temps,
            "thresholds": thresholds, "new_user": new_profile.user_id}
