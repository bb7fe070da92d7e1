"""Triplet embedding network, implemented directly on numpy.

Three 3x3 convolution layers (two of them followed by 2x2 max-pooling) feed
a fully connected layer; the four teeth-structure envelopes are concatenated
to the flattened convolutional output before the FC layer.  Embeddings are
L2-normalized 64-vectors trained with a hinge triplet loss.

Everything runs in float64 with analytic gradients (verified against finite
differences), plain SGD with momentum, and seeded shuffling, so training is
deterministic for a fixed seed.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

PARAMS_VERSION = 1

_PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
                "conv3_w", "conv3_b", "fc_w", "fc_b")


class NetworkError(ValueError):
    pass


@dataclass
class NetworkParams:
    """All learnable tensors plus the input geometry they assume."""
    conv1_w: np.ndarray     # (c1, in_ch, 3, 3)
    conv1_b: np.ndarray     # (c1,)
    conv2_w: np.ndarray     # (c2, c1, 3, 3)
    conv2_b: np.ndarray
    conv3_w: np.ndarray     # (c3, c2, 3, 3)
    conv3_b: np.ndarray
    fc_w: np.ndarray        # (embed_dim, flat + teeth_len)
    fc_b: np.ndarray        # (embed_dim,)
    input_hw: tuple[int, int] = (64, 64)
    teeth_len: int = 256

    def __post_init__(self):
        for name in _PARAM_NAMES:
            t = np.asarray(getattr(self, name), dtype=np.float64)
            if not np.all(np.isfinite(t)):
                raise NetworkError(f"non-finite values in {name}")
            setattr(self, name, t)
        h, w = self.input_hw
        if h % 4 or w % 4:
            raise NetworkError("input height/width must be divisible by 4")
        flat = self.conv3_w.shape[0] * (h // 4) * (w // 4)
        if self.fc_w.shape[1] != flat + self.teeth_len:
            raise NetworkError("fc weight width does not match conv output")

    @property
    def embed_dim(self) -> int:
        return int(self.fc_b.shape[0])

    def tensors(self) -> dict[str, np.ndarray]:
        return {n: getattr(self, n) for n in _PARAM_NAMES}

    def copy(self) -> "NetworkParams":
        return NetworkParams(**{n: getattr(self, n).copy() for n in _PARAM_NAMES},
                             input_hw=self.input_hw, teeth_len=self.teeth_len)


@dataclass
class TrainConfig:
    margin: float = 0.5
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 8
    batch_size: int = 16
    seed: int = 7
    fine_tune: bool = False

    def __post_init__(self):
        if self.margin <= 0:
            raise NetworkError("margin must be > 0")


def init_params(rng: np.random.Generator, in_ch: int = 2,
                channels: tuple[int, int, int] = (8, 16, 32),
                embed_dim: int = 64, input_hw: tuple[int, int] = (64, 64),
                teeth_len: int = 256) -> NetworkParams:
    """He-initialized parameters for the given geometry."""
    c1, c2, c3 = channels

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)

    flat = c3 * (input_hw[0] // 4) * (input_hw[1] // 4)
    return NetworkParams(
        conv1_w=he((c1, in_ch, 3, 3), in_ch * 9), conv1_b=np.zeros(c1),
        conv2_w=he((c2, c1, 3, 3), c1 * 9), conv2_b=np.zeros(c2),
        conv3_w=he((c3, c2, 3, 3), c2 * 9), conv3_b=np.zeros(c3),
        fc_w=he((embed_dim, flat + teeth_len), flat + teeth_len),
        fc_b=np.zeros(embed_dim),
        input_hw=input_hw, teeth_len=teeth_len)


def params_from_config(cfg) -> NetworkParams:
    rng = np.random.default_rng(cfg.net_seed)
    return init_params(rng, in_ch=2,
                       channels=(cfg.net_conv1, cfg.net_conv2, cfg.net_conv3),
                       embed_dim=cfg.net_embed_dim,
                       input_hw=(cfg.features_image_size, cfg.features_image_size),
                       teeth_len=4 * cfg.features_envelope_len)


def train_config_from(cfg, fine_tune: bool = False) -> TrainConfig:
    tc = TrainConfig(margin=cfg.net_margin, lr=cfg.net_lr,
                     momentum=cfg.net_momentum, epochs=cfg.net_epochs,
                     batch_size=cfg.net_batch_size, seed=cfg.net_seed,
                     fine_tune=fine_tune)
    if fine_tune:
        tc.lr *= cfg.net_finetune_lr_scale
        tc.epochs = max(1, cfg.net_epochs // cfg.net_finetune_epoch_div)
    return tc


# ---------------------------------------------------------------------------
# layer primitives (batched, NCHW)

def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, H, W) -> (B, H*W, C*9) patches of the 3x3 neighborhoods with
    zero ('same') padding."""
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    s = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(b, c, h, w, 3, 3), strides=(s[0], s[1], s[2], s[3], s[2], s[3]))
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * w, c * 9)


def _col2im(cols: np.ndarray, x_shape: tuple) -> np.ndarray:
    """Adjoint of _im2col: scatter (B, H*W, C*9) patch gradients back."""
    b, c, h, w = x_shape
    grads = cols.reshape(b, h, w, c, 3, 3)
    out = np.zeros((b, c, h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            out[:, :, di:di + h, dj:dj + w] += grads[:, :, :, :, di, dj].transpose(0, 3, 1, 2)
    return out[:, :, 1:h + 1, 1:w + 1]


def _conv_forward(x, w, b):
    cols = _im2col(x)                                   # (B, HW, C*9)
    wf = w.reshape(w.shape[0], -1)                      # (O, C*9)
    out = cols @ wf.T + b                               # (B, HW, O)
    bsz, _, ch, hh, ww = x.shape[0], None, x.shape[1], x.shape[2], x.shape[3]
    out = out.transpose(0, 2, 1).reshape(bsz, w.shape[0], hh, ww)
    return out, cols


def _conv_backward(dout, cols, w, x_shape):
    bsz, o = dout.shape[0], w.shape[0]
    df = dout.reshape(bsz, o, -1).transpose(0, 2, 1)    # (B, HW, O)
    wf = w.reshape(o, -1)
    dw = np.tensordot(df, cols, axes=([0, 1], [0, 1])).reshape(w.shape)
    db = dout.sum(axis=(0, 2, 3))
    dcols = df @ wf                                     # (B, HW, C*9)
    dx = _col2im(dcols, x_shape)
    return dx, dw, db


def _pool_forward(x):
    b, c, h, w = x.shape
    xr = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    xr = xr.reshape(b, c, h // 2, w // 2, 4)
    idx = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, idx, x_shape):
    b, c, h, w = x_shape
    dxr = np.zeros((b, c, h // 2, w // 2, 4))
    np.put_along_axis(dxr, idx[..., None], dout[..., None], axis=-1)
    dxr = dxr.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return dxr.reshape(b, c, h, w)


_ZERO_NORM_EPS = 1e-12


def _normalize_rows(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    out = np.empty_like(v)
    degenerate = norms[:, 0] < _ZERO_NORM_EPS
    safe = np.where(degenerate[:, None], 1.0, norms)
    out[:] = v / safe
    # zero-vector fallback: the all-equal unit vector keeps normalization total
    out[degenerate] = 1.0 / np.sqrt(v.shape[1])
    return out, norms[:, 0]


def forward_batch(params: NetworkParams, images: np.ndarray,
                  teeth: np.ndarray, want_cache: bool = False):
    """Embed a batch: images (B, 2, H, W), teeth (B, teeth_len) -> (B, D)."""
    images = np.asarray(images, dtype=np.float64)
    teeth = np.asarray(teeth, dtype=np.float64)
    if images.ndim != 4 or images.shape[2:] != params.input_hw:
        raise NetworkError(f"expected images (B, C, {params.input_hw[0]}, "
                           f"{params.input_hw[1]}), got {images.shape}")
    if images.shape[1] != params.conv1_w.shape[1]:
        raise NetworkError("channel count mismatch")
    if teeth.ndim != 2 or teeth.shape[1] != params.teeth_len:
        raise NetworkError("teeth vector length mismatch")

    z1, cols1 = _conv_forward(images, params.conv1_w, params.conv1_b)
    a1 = np.maximum(z1, 0.0)
    p1, idx1 = _pool_forward(a1)
    z2, cols2 = _conv_forward(p1, params.conv2_w, params.conv2_b)
    a2 = np.maximum(z2, 0.0)
    p2, idx2 = _pool_forward(a2)
    z3, cols3 = _conv_forward(p2, params.conv3_w, params.conv3_b)
    a3 = np.maximum(z3, 0.0)
    flat = a3.reshape(a3.shape[0], -1)
    joined = np.concatenate([flat, teeth], axis=1)
    v = joined @ params.fc_w.T + params.fc_b
    emb, norms = _normalize_rows(v)
    if not want_cache:
        return emb
    cache = dict(images=images, z1=z1, cols1=cols1, idx1=idx1, p1=p1,
                 z2=z2, cols2=cols2, idx2=idx2, p2=p2,
                 z3=z3, cols3=cols3, a3=a3, joined=joined, v=v,
                 norms=norms, emb=emb)
    return emb, cache


def forward(params: NetworkParams, image: np.ndarray, teeth: np.ndarray) -> np.ndarray:
    """Single-input convenience wrapper around forward_batch."""
    return forward_batch(params, image[None], np.ravel(teeth)[None])[0]


def _backward_batch(params: NetworkParams, cache: dict, demb: np.ndarray
                    ) -> dict[str, np.ndarray]:
    norms = cache["norms"]
    emb = cache["emb"]
    # through L2 normalization; degenerate rows took the constant fallback
    ok = norms >= _ZERO_NORM_EPS
    dv = np.zeros_like(demb)
    dv[ok] = (demb[ok] - emb[ok] * np.sum(emb[ok] * demb[ok], axis=1, keepdims=True)) \
        / norms[ok, None]

    grads = {}
    grads["fc_w"] = dv.T @ cache["joined"]
    grads["fc_b"] = dv.sum(axis=0)
    djoined = dv @ params.fc_w
    flat_len = cache["a3"].reshape(cache["a3"].shape[0], -1).shape[1]
    da3 = djoined[:, :flat_len].reshape(cache["a3"].shape)
    da3 = da3 * (cache["z3"] > 0)
    dp2, grads["conv3_w"], grads["conv3_b"] = _conv_backward(
        da3, cache["cols3"], params.conv3_w, cache["p2"].shape)
    da2 = _pool_backward(dp2, cache["idx2"], cache["z2"].shape)
    da2 = da2 * (cache["z2"] > 0)
    dp1, grads["conv2_w"], grads["conv2_b"] = _conv_backward(
        da2, cache["cols2"], params.conv2_w, cache["p1"].shape)
    da1 = _pool_backward(dp1, cache["idx1"], cache["z1"].shape)
    da1 = da1 * (cache["z1"] > 0)
    _, grads["conv1_w"], grads["conv1_b"] = _conv_backward(
        da1, cache["cols1"], params.conv1_w, cache["images"].shape)
    return grads


# ---------------------------------------------------------------------------
# triplet loss

def triplet_loss(fa: np.ndarray, fp: np.ndarray, fn: np.ndarray,
                 margin: float) -> float:
    """Hinge loss max(d(fa,fp) - d(fa,fn) + margin, 0), Euclidean d."""
    dap = float(np.linalg.norm(fa - fp))
    dan = float(np.linalg.norm(fa - fn))
    return max(dap - dan + margin, 0.0)


def _triplet_loss_batch(fa, fp, fn, margin):
    """Mean hinge loss over the batch plus gradients w.r.t. the embeddings."""
    dap = np.linalg.norm(fa - fp, axis=1)
    dan = np.linalg.norm(fa - fn, axis=1)
    losses = np.maximum(dap - dan + margin, 0.0)
    active = losses > 0.0
    b = fa.shape[0]
    dfa = np.zeros_like(fa)
    dfp = np.zeros_like(fp)
    dfn = np.zeros_like(fn)
    sap = np.where(dap > 1e-12, dap, 1.0)
    san = np.where(dan > 1e-12, dan, 1.0)
    uap = (fa - fp) / sap[:, None]
    uan = (fa - fn) / san[:, None]
    w = active.astype(np.float64)[:, None] / b
    dfa = w * (uap - uan)
    dfp = -w * uap
    dfn = w * uan
    return float(losses.mean()), dfa, dfp, dfn


def batch_loss_and_grads(params: NetworkParams, images: np.ndarray,
                         teeth: np.ndarray, margin: float
                         ) -> tuple[float, dict[str, np.ndarray]]:
    """Mean triplet loss and parameter gradients for one mini-batch.

    images is (3, B, 2, H, W) and teeth (3, B, T), ordered anchor /
    positive / negative; the three roles share one forward pass so weight
    sharing is literal.
    """
    b = images.shape[1]
    stacked_im = images.reshape((-1,) + images.shape[2:])
    stacked_te = teeth.reshape((-1, teeth.shape[2]))
    emb, cache = forward_batch(params, stacked_im, stacked_te, want_cache=True)
    fa, fp, fn = emb[:b], emb[b:2 * b], emb[2 * b:]
    loss, dfa, dfp, dfn = _triplet_loss_batch(fa, fp, fn, margin)
    demb = np.concatenate([dfa, dfp, dfn], axis=0)
    grads = _backward_batch(params, cache, demb)
    return loss, grads


# ---------------------------------------------------------------------------
# training

def _as_arrays(triplets) -> tuple[np.ndarray, np.ndarray]:
    """Triplets [((img, teeth), (img, teeth), (img, teeth)), ...] ->
    stacked (3, N, ...) arrays."""
    if not triplets:
        raise NetworkError("empty triplet set")
    ims = np.stack([[np.asarray(t[r][0], dtype=np.float64) for t in triplets]
                    for r in range(3)])
    tes = np.stack([[np.ravel(np.asarray(t[r][1], dtype=np.float64))
                     for t in triplets] for r in range(3)])
    return ims, tes


def train(params: NetworkParams, triplets, config: TrainConfig
          ) -> tuple[NetworkParams, list[float]]:
    """Mini-batch SGD with momentum on the mean triplet loss.

    Returns updated parameters and the per-epoch mean loss trace.  The
    input params object is not modified.
    """
    ims, tes = _as_arrays(triplets)
    n = ims.shape[1]
    params = params.copy()
    rng = np.random.default_rng(config.seed)
    velocity = {k: np.zeros_like(v) for k, v in params.tensors().items()}
    history = []
    for _ in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        nb = 0
        for s in range(0, n, config.batch_size):
            sel = order[s:s + config.batch_size]
            loss, grads = batch_loss_and_grads(
                params, ims[:, sel], tes[:, sel], config.margin)
            epoch_loss += loss
            nb += 1
            for k, g in grads.items():
                velocity[k] = config.momentum * velocity[k] - config.lr * g
                setattr(params, k, getattr(params, k) + velocity[k])
        history.append(epoch_loss / max(nb, 1))
    return params, history


def fine_tune_incremental(params: NetworkParams, new_triplets,
                          config: TrainConfig) -> tuple[NetworkParams, list[float]]:
    """Continue training on new-user triplets only, shorter and gentler
    (the caller builds `config` with the fine-tune scaling applied)."""
    if not new_triplets:
        raise NetworkError("empty triplet set")
    return train(params, new_triplets, config)


def mine_triplets(samples_by_user: dict[str, list], rng: np.random.Generator,
                  cap_per_user: int = 256) -> list:
    """All (anchor, positive, negative) combinations, seeded shuffle, capped
    per anchor user.  samples_by_user maps user id -> list of (img, teeth)."""
    users = sorted(samples_by_user)
    if len(users) < 2:
        raise NetworkError("triplet mining needs at least two users")
    triplets = []
    for u in users:
        own = samples_by_user[u]
        others = [s for v in users if v != u for s in samples_by_user[v]]
        combos = [(a, p, nid) for a in range(len(own))
                  for p in range(len(own)) if p != a
                  for nid in range(len(others))]
        idx = rng.permutation(len(combos))[:cap_per_user]
        for i in idx:
            a, p, nid = combos[i]
            triplets.append((own[a], own[p], others[nid]))
    order = rng.permutation(len(triplets))
    return [triplets[i] for i in order]


# ---------------------------------------------------------------------------
# augmentation

def _monotone_warp_grid(width: int, max_frac: float,
                        rng: np.random.Generator) -> np.ndarray:
    """Smooth monotone source positions for each destination column, with
    displacement bounded by max_frac * width."""
    if max_frac <= 0.0:
        return np.arange(width, dtype=np.float64)
    k = 5
    ctrl_x = np.linspace(0, width - 1, k)
    disp = rng.uniform(-max_frac * width, max_frac * width, k)
    disp[0] = disp[-1] = 0.0
    src = np.interp(np.arange(width), ctrl_x, ctrl_x + disp)
    # enforce monotonicity, then clamp back into range
    src = np.maximum.accumulate(src)
    return np.clip(src, 0.0, width - 1)


def _warp_time_axis(image: np.ndarray, src: np.ndarray) -> np.ndarray:
    cols = np.arange(image.shape[-1], dtype=np.float64)
    if np.array_equal(src, cols):
        return image.copy()
    out = np.empty_like(image)
    flat = image.reshape(-1, image.shape[-1])
    oflat = out.reshape(-1, image.shape[-1])
    for i in range(flat.shape[0]):
        oflat[i] = np.interp(src, cols, flat[i])
    return out


def augment(image: np.ndarray, teeth: np.ndarray, cfg,
            rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Augmented copies of one (image, teeth) sample.

    Each copy gets a smooth monotone time warp (teeth vectors share the
    same index remapping), one horizontal frequency mask, and one vertical
    time mask.  With zero-width masks and zero warp the copy equals the
    input exactly.
    """
    image = np.asarray(image, dtype=np.float64)
    teeth = np.asarray(teeth, dtype=np.float64)
    h, w = image.shape[-2], image.shape[-1]
    out = []
    for _ in range(cfg.augment_copies):
        src = _monotone_warp_grid(w, cfg.augment_max_warp_frac, rng)
        img = _warp_time_axis(image, src)
        if teeth.size % w == 0:
            # concatenated envelopes share the image's 64-point axis: warp
            # each one with the same remapping
            tee = _warp_time_axis(teeth.reshape(-1, w), src).reshape(teeth.shape)
        else:
            src_t = src * (teeth.shape[-1] - 1) / max(w - 1, 1)
            tee = _warp_time_axis(teeth, np.clip(src_t, 0, teeth.shape[-1] - 1))
        if cfg.augment_max_freq_mask > 0:
            fm = int(rng.integers(0, cfg.augment_max_freq_mask + 1))
            if fm:
                r0 = int(rng.integers(0, h - fm + 1))
                img[..., r0:r0 + fm, :] = 0.0
        if cfg.augment_max_time_mask > 0:
            tm = int(rng.integers(0, cfg.augment_max_time_mask + 1))
            if tm:
                c0 = int(rng.integers(0, w - tm + 1))
                img[..., :, c0:c0 + tm] = 0.0
        out.append((img, tee))
    return out


# ---------------------------------------------------------------------------
# persistence

def save_params(params: NetworkParams, path) -> None:
    """Versioned .npz blob with shape metadata."""
    meta = {"version": PARAMS_VERSION,
            "input_hw": list(params.input_hw),
            "teeth_len": params.teeth_len,
            "shapes": {k: list(v.shape) for k, v in params.tensors().items()}}
    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(),
                                     dtype=np.uint8),
             **params.tensors())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_params(path) -> NetworkParams:
    with np.load(path) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != PARAMS_VERSION:
            raise NetworkError(f"unsupported params version {meta.get('version')}")
        tensors = {k: z[k] for k in _PARAM_NAMES}
    for k, shape in meta["shapes"].items():
        if list(tensors[k].shape) != shape:
            raise NetworkError(f"shape mismatch for {k}")
    return NetworkParams(**tensors, input_hw=tuple(meta["input_hw"]),
                         teeth_len=int(meta["teeth_len"]))
