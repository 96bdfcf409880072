"""A small vision transformer over elastic tokens, in plain numpy.

Tokens are (pixels, positional encoding) pairs; the model embeds pixel
patches linearly, adds the four-corner encoding, prepends a class token and
runs pre-norm transformer blocks (LayerNorm -> multi-head self-attention ->
residual; LayerNorm -> GELU MLP -> residual). Forward and backward passes
are written out by hand so every parameter gradient can be checked against
finite differences. The token count is free: any n >= 1 works and the logit
shape does not depend on it.

Checkpoints are a versioned binary container: a fixed header (magic,
version, model configuration) followed by named tensors, each stored as
(name length, name, ndim, dims, little-endian float64 payload).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .augment import SoftLabel, TrainAugmentConfig, extract_from_oversampled, mixup_elastic, patchmix, training_sampler
from .encoding import EncodingConfig, encode_patchset
from .errors import ParseError
from .extract import TokenBatch, sample_patchset
from .geometry import make_grid
from .perturb import PerturbConfig, apply_pipeline

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters; dim must equal 4 * encoding length."""

    r: int = 8
    channels: int = 1
    dim: int = 64
    heads: int = 4
    depth: int = 4
    mlp_ratio: float = 2.0
    classes: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.dim % 8 != 0:
            raise ValueError(f"dim {self.dim} must be divisible by 8 (4 corners x even length)")
        if not (0.0 <= self.dropout < 1.0):
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def encoding(self) -> EncodingConfig:
        return EncodingConfig(l=self.dim // 4)

    @property
    def patch_dim(self) -> int:
        return self.r * self.r * self.channels

    @property
    def mlp_dim(self) -> int:
        return int(round(self.dim * self.mlp_ratio))


class ModelParams:
    """Named parameter tensors of the model."""

    def __init__(self, config: ModelConfig, tensors: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self):
        return list(self.tensors.keys())

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})


def init_params(config: ModelConfig, rng) -> ModelParams:
    """Gaussian(0, 0.02) weights, zero biases, unit LayerNorm gains."""
    rng = np.random.default_rng(rng)
    t: dict[str, np.ndarray] = {}

    def w(name, *shape):
        t[name] = rng.normal(0.0, 0.02, size=shape)

    def zeros(name, *shape):
        t[name] = np.zeros(shape, dtype=np.float64)

    def ones(name, *shape):
        t[name] = np.ones(shape, dtype=np.float64)

    d, mlp = config.dim, config.mlp_dim
    w("embed.w", config.patch_dim, d)
    zeros("embed.b", d)
    w("cls", d)
    for i in range(config.depth):
        p = f"block{i}."
        ones(p + "ln1.g", d)
        zeros(p + "ln1.b", d)
        w(p + "attn.qkv.w", d, 3 * d)
        zeros(p + "attn.qkv.b", 3 * d)
        w(p + "attn.out.w", d, d)
        zeros(p + "attn.out.b", d)
        ones(p + "ln2.g", d)
        zeros(p + "ln2.b", d)
        w(p + "mlp.in.w", d, mlp)
        zeros(p + "mlp.in.b", mlp)
        w(p + "mlp.out.w", mlp, d)
        zeros(p + "mlp.out.b", d)
    ones("final_ln.g", d)
    zeros("final_ln.b", d)
    w("head.w", d, config.classes)
    zeros("head.b", config.classes)
    return ModelParams(config, t)


def _gelu(u):
    inner = _SQRT_2_OVER_PI * (u + _GELU_C * u**3)
    return 0.5 * u * (1.0 + np.tanh(inner))


def _gelu_grad(u):
    inner = _SQRT_2_OVER_PI * (u + _GELU_C * u**3)
    t = np.tanh(inner)
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_C * u * u)


_LN_EPS = 1e-6


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)

def _layer_norm_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * g
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dg, db


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(
    params: ModelParams,
    pixels: np.ndarray,
    encodings: np.ndarray,
    train_mode: bool = False,
    rng=None,
):
    """Run the model on a batch.

    pixels: (B, n, r, r, C) or (B, n, patch_dim); encodings: (B, n, dim).
    Returns (logits (B, classes), cache) where the cache feeds `backward`.
    Dropout (attention weights and MLP hidden) is active only in train mode.
    """
    cfg = params.config
    t = params.tensors
    dtype = t["embed.w"].dtype
    if pixels.ndim == 5:
        pixels = pixels.reshape(pixels.shape[0], pixels.shape[1], -1)
    if pixels.shape[-1] != cfg.patch_dim:
        raise ValueError(f"token pixel dim {pixels.shape[-1]} != {cfg.patch_dim}")
    if encodings.shape[-1] != cfg.dim:
        raise ValueError(f"encoding dim {encodings.shape[-1]} != model dim {cfg.dim}")
    if pixels.shape[1] < 1:
        raise ValueError("need at least one token")
    pixels = pixels.astype(dtype, copy=False)
    encodings = encodings.astype(dtype, copy=False)
    B, n, _ = pixels.shape
    H, D = cfg.heads, cfg.dim
    dh = D // H
    scale = 1.0 / math.sqrt(dh)
    drop = cfg.dropout if train_mode else 0.0
    if drop > 0.0 and rng is None:
        raise ValueError("train-mode dropout needs an rng")
    rng = np.random.default_rng(rng) if drop > 0.0 else None

    x = np.empty((B, n + 1, D), dtype=dtype)
    x[:, 0, :] = t["cls"]
    x[:, 1:, :] = pixels @ t["embed.w"] + t["embed.b"] + encodings
    cache = {"pixels": pixels, "B": B, "n": n, "blocks": [], "drop": drop}

    for i in range(cfg.depth):
        p = f"block{i}."
        h1, ln1c = _layer_norm(x, t[p + "ln1.g"], t[p + "ln1.b"])
        qkv = h1 @ t[p + "attn.qkv.w"] + t[p + "attn.qkv.b"]
        qkv = qkv.reshape(B, n + 1, 3, H, dh).transpose(2, 0, 3, 1, 4)  # (3, B, H, T, dh)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        attn = _softmax(scores)
        if drop > 0.0:
            attn_mask = (rng.random(attn.shape) >= drop).astype(dtype) / (1.0 - drop)
            attn_d = attn * attn_mask
        else:
            attn_mask = None
            attn_d = attn
        ctx = attn_d @ v  # (B, H, T, dh)
        merged = ctx.transpose(0, 2, 1, 3).reshape(B, n + 1, D)
        out = merged @ t[p + "attn.out.w"] + t[p + "attn.out.b"]
        x_attn = x + out

        h2, ln2c = _layer_norm(x_attn, t[p + "ln2.g"], t[p + "ln2.b"])
        u = h2 @ t[p + "mlp.in.w"] + t[p + "mlp.in.b"]
        g = _gelu(u)
        if drop > 0.0:
            mlp_mask = (rng.random(g.shape) >= drop).astype(dtype) / (1.0 - drop)
            g_d = g * mlp_mask
        else:
            mlp_mask = None
            g_d = g
        x2 = x_attn + g_d @ t[p + "mlp.out.w"] + t[p + "mlp.out.b"]

        cache["blocks"].append(
            {
                "h1": h1, "ln1c": ln1c, "q": q, "k": k, "v": v,
                "attn": attn, "attn_mask": attn_mask, "merged": merged,
                "h2": h2, "ln2c": ln2c, "u": u, "g_d": g_d, "mlp_mask": mlp_mask,
            }
        )
        x = x2

    f, lnfc = _layer_norm(x, t["final_ln.g"], t["final_ln.b"])
    logits = f[:, 0, :] @ t["head.w"] + t["head.b"]
    cache["f0"] = f[:, 0, :]
    cache["lnfc"] = lnfc
    return logits, cache


def backward(params: ModelParams, cache, d_logits: np.ndarray) -> dict[str, np.ndarray]:
    """Analytic gradients of every parameter tensor for a cached forward."""
    cfg = params.config
    t = params.tensors
    dtype = t["embed.w"].dtype
    B, n = cache["B"], cache["n"]
    H, D = cfg.heads, cfg.dim
    dh = D // H
    scale = 1.0 / math.sqrt(dh)
    grads: dict[str, np.ndarray] = {}
    d_logits = d_logits.astype(dtype, copy=False)

    grads["head.w"] = cache["f0"].T @ d_logits
    grads["head.b"] = d_logits.sum(axis=0)
    df = np.zeros((B, n + 1, D), dtype=dtype)
    df[:, 0, :] = d_logits @ t["head.w"].T
    dx, dg, db = _layer_norm_backward(df, t["final_ln.g"], cache["lnfc"])
    grads["final_ln.g"] = dg
    grads["final_ln.b"] = db

    for i in reversed(range(cfg.depth)):
        p = f"block{i}."
        c = cache["blocks"][i]

        # MLP branch
        dv_out = dx  # gradient of x2 w.r.t. both residual input and branch
        grads[p + "mlp.out.w"] = c["g_d"].reshape(-1, cfg.mlp_dim).T @ dv_out.reshape(-1, D)
        grads[p + "mlp.out.b"] = dv_out.sum(axis=(0, 1))
        dg_d = dv_out @ t[p + "mlp.out.w"].T
        if c["mlp_mask"] is not None:
            dg_d = dg_d * c["mlp_mask"]
        du = dg_d * _gelu_grad(c["u"])
        grads[p + "mlp.in.w"] = c["h2"].reshape(-1, D).T @ du.reshape(-1, cfg.mlp_dim)
        grads[p + "mlp.in.b"] = du.sum(axis=(0, 1))
        dh2 = du @ t[p + "mlp.in.w"].T
        dx_attn, dg2, db2 = _layer_norm_backward(dh2, t[p + "ln2.g"], c["ln2c"])
        grads[p + "ln2.g"] = dg2
        grads[p + "ln2.b"] = db2
        dx_attn = dx_attn + dv_out  # residual

        # attention branch
        grads[p + "attn.out.w"] = c["merged"].reshape(-1, D).T @ dx_attn.reshape(-1, D)
        grads[p + "attn.out.b"] = dx_attn.sum(axis=(0, 1))
        dmerged = dx_attn @ t[p + "attn.out.w"].T
        dctx = dmerged.reshape(B, n + 1, H, dh).transpose(0, 2, 1, 3)
        attn_d = c["attn"] * c["attn_mask"] if c["attn_mask"] is not None else c["attn"]
        dattn_d = dctx @ c["v"].transpose(0, 1, 3, 2)
        dv = attn_d.transpose(0, 1, 3, 2) @ dctx
        dattn = dattn_d * c["attn_mask"] if c["attn_mask"] is not None else dattn_d
        a = c["attn"]
        dscores = a * (dattn - (dattn * a).sum(axis=-1, keepdims=True))
        dscores *= scale
        dq = dscores @ c["k"]
        dk = dscores.transpose(0, 1, 3, 2) @ c["q"]
        dqkv = np.stack([dq, dk, dv], axis=0)  # (3, B, H, T, dh)
        dqkv = dqkv.transpose(1, 3, 0, 2, 4).reshape(B, n + 1, 3 * D)
        grads[p + "attn.qkv.w"] = c["h1"].reshape(-1, D).T @ dqkv.reshape(-1, 3 * D)
        grads[p + "attn.qkv.b"] = dqkv.sum(axis=(0, 1))
        dh1 = dqkv @ t[p + "attn.qkv.w"].T
        dx_in, dg1, db1 = _layer_norm_backward(dh1, t[p + "ln1.g"], c["ln1c"])
        grads[p + "ln1.g"] = dg1
        grads[p + "ln1.b"] = db1
        dx = dx_in + dx_attn  # residual

    grads["cls"] = dx[:, 0, :].sum(axis=0)
    dtok = dx[:, 1:, :]
    grads["embed.w"] = cache["pixels"].reshape(-1, cfg.patch_dim).T @ dtok.reshape(-1, D)
    grads["embed.b"] = dtok.sum(axis=(0, 1))
    return grads


def loss_softmax_ce(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy against soft targets; gradient is softmax - label.

    `labels` is a (B, classes) weight array or a single SoftLabel; logits of
    shape (classes,) are treated as a batch of one.
    """
    squeeze = logits.ndim == 1
    if squeeze:
        logits = logits[None, :]
    if isinstance(labels, SoftLabel):
        labels = labels.weights[None, :]
    labels = np.asarray(labels, dtype=logits.dtype)
    if labels.ndim == 1:
        labels = labels[None, :]
    z = logits - logits.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsumexp
    loss = float(-(labels * logp).sum(axis=-1).mean())
    d = (np.exp(logp) - labels) / logits.shape[0]
    return loss, (d[0] if squeeze else d)


# ---------------------------------------------------------------------------
# Optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def _decays(name: str) -> bool:
    """Decoupled decay applies to weight matrices only."""
    return not (name.endswith(".b") or name.endswith(".g") or name == "cls")


def optimizer_step(params: ModelParams, grads: dict, state: AdamState, hyper: AdamHyper):
    """One AdamW update in place; returns (params, state)."""
    state.step += 1
    t = state.step
    b1, b2 = hyper.beta1, hyper.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.tensors.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if hyper.weight_decay and _decays(name):
            p -= hyper.lr * hyper.weight_decay * p
        p -= hyper.lr * (m / bc1) / (np.sqrt(v / bc2) + hyper.eps)
    return params, state


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    """Linear warmup followed by a half-cosine ramp to zero."""
    if warmup_steps and step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    frac = min(1.0, (step - warmup_steps) / span)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


# ---------------------------------------------------------------------------
# Training and evaluation


@dataclass(frozen=True)
class TrainConfig:
    """Training-regime settings; elastic_fraction picks the batch pipeline."""

    epochs: int = 10
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 0.05
    warmup_epochs: float = 1.0
    elastic_fraction: float = 0.0
    val_fraction: float = 1.0 / 6.0
    precision: str = "f32"
    seed: int = 0
    augment: TrainAugmentConfig = field(default_factory=TrainAugmentConfig)

    def __post_init__(self):
        if not (0.0 <= self.elastic_fraction <= 1.0):
            raise ValueError(f"elastic_fraction must lie in [0, 1], got {self.elastic_fraction}")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision}")


def _grid_pixel_batch(images: np.ndarray, r: int):
    """Crop all native-grid tokens of a stack of (C, H, W) images at once.

    Equivalent to bilinear sampling of the unit-scale grid (an exact crop).
    """
    B, C, Hpx, Wpx = images.shape
    gh, gw = Hpx // r, Wpx // r
    x = images.reshape(B, C, gh, r, gw, r)
    x = x.transpose(0, 2, 4, 3, 5, 1)  # (B, gh, gw, r, r, C)
    return x.reshape(B, gh * gw, r * r * C)


def _one_hot(labels, classes, dtype):
    out = np.zeros((len(labels), classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def train(
    config: ModelConfig,
    dataset,
    regime: TrainConfig,
    progress=None,
    start_epoch: int = 0,
    resume_tensors: dict | None = None,
):
    """Train on a dataset, mixing grid and elastic batches.

    Each batch is routed to the elastic pipeline with probability
    `regime.elastic_fraction` (randomized patches, PatchMix or elastic MixUp)
    and otherwise to plain grid sampling. Returns (params, history, extras)
    where history rows are (epoch, loss, train_acc, val_acc) and extras holds
    optimizer moments plus split metadata for checkpointing.

    Deterministic for a fixed seed: per-epoch generators derive from
    (seed, epoch), so resuming from (start_epoch, resume_tensors) reproduces
    the uninterrupted trajectory exactly.
    """
    from .data import split_indices

    dtype = np.float32 if regime.precision == "f32" else np.float64
    enc_cfg = config.encoding
    state = AdamState()
    if resume_tensors is None:
        params = init_params(
            config, np.random.default_rng(np.random.SeedSequence([regime.seed, 0xA110]))
        )
        work = params.astype(dtype)
    else:
        ref = init_params(config, np.random.default_rng(0))
        work = ModelParams(
            config, {k: resume_tensors[k].astype(dtype) for k in ref.names()}
        )
        state.step = int(resume_tensors["meta.opt_step"])
        for k in ref.names():
            state.m[k] = resume_tensors[f"opt.m.{k}"].astype(dtype)
            state.v[k] = resume_tensors[f"opt.v.{k}"].astype(dtype)
    hyper = AdamHyper(lr=regime.lr, weight_decay=regime.weight_decay)

    train_idx, val_idx = split_indices(len(dataset), regime.val_fraction, regime.seed)
    spec = dataset.native_spec
    grid = make_grid(spec, config.r)
    grid_enc = encode_patchset(grid, enc_cfg).astype(dtype)
    n_tokens = len(grid)
    steps_per_epoch = max(1, len(train_idx) // regime.batch_size)
    total_steps = regime.epochs * steps_per_epoch
    warmup_steps = int(regime.warmup_epochs * steps_per_epoch)
    oversample = dataset.oversample

    history = []
    step = start_epoch * steps_per_epoch
    for epoch in range(start_epoch, regime.epochs):
        rng = np.random.default_rng(np.random.SeedSequence([regime.seed, 1 + epoch]))
        order = rng.permutation(train_idx)
        losses = []
        hits = 0
        seen = 0
        for b in range(steps_per_epoch):
            batch_idx = order[b * regime.batch_size : (b + 1) * regime.batch_size]
            if len(batch_idx) == 0:
                continue
            elastic = rng.random() < regime.elastic_fraction
            if elastic:
                pixels, encs, labels = _elastic_batch(
                    dataset, batch_idx, config, enc_cfg, regime.augment, rng, dtype, oversample
                )
            else:
                imgs = np.stack([dataset.native(int(i)).pixels for i in batch_idx])
                pixels = _grid_pixel_batch(imgs, config.r).astype(dtype)
                encs = np.broadcast_to(grid_enc, (len(batch_idx), n_tokens, config.dim))
                labels = _one_hot([dataset.label(int(i)) for i in batch_idx], config.classes, dtype)
            logits, cache = forward(work, pixels, encs, train_mode=True, rng=rng)
            loss, d_logits = loss_softmax_ce(logits, labels)
            grads = backward(work, cache, d_logits)
            lr = cosine_lr(step, total_steps, regime.lr, warmup_steps)
            optimizer_step(work, grads, state, AdamHyper(
                lr=lr, beta1=hyper.beta1, beta2=hyper.beta2, eps=hyper.eps,
                weight_decay=hyper.weight_decay,
            ))
            step += 1
            losses.append(loss)
            hits += int((logits.argmax(axis=1) == labels.argmax(axis=1)).sum())
            seen += len(batch_idx)
        train_acc = hits / max(1, seen)
        val_acc = evaluate(ModelParams(config, work.tensors), dataset, indices=val_idx)
        history.append((epoch, float(np.mean(losses)) if losses else math.nan, train_acc, val_acc))
        if progress:
            progress(epoch, history[-1])

    final = ModelParams(config, {k: v.astype(np.float64) for k, v in work.tensors.items()})
    extras = {f"opt.m.{k}": v.astype(np.float64) for k, v in state.m.items()}
    extras.update({f"opt.v.{k}": v.astype(np.float64) for k, v in state.v.items()})
    extras["meta.opt_step"] = np.array(float(state.step))
    extras["meta.epoch"] = np.array(float(regime.epochs - 1))
    extras["meta.val_fraction"] = np.array(regime.val_fraction)
    extras["meta.split_seed"] = np.array(float(regime.seed))
    extras["meta.elastic_fraction"] = np.array(regime.elastic_fraction)
    return final, history, extras


def _elastic_batch(dataset, batch_idx, config, enc_cfg, aug, rng, dtype, oversample):
    """Build one elastic training batch: random patches plus token mixing."""
    use_patchmix = rng.random() < aug.patchmix_prob
    lam = float(rng.beta(aug.mixup_alpha, aug.mixup_alpha)) if not use_patchmix else 0.0
    spec = dataset.native_spec
    batches = []
    labels = []
    if use_patchmix:
        for i in batch_idx:
            P = training_sampler(spec, config.r, aug, rng)
            batches.append(extract_from_oversampled(dataset.oversampled(int(i)), P, enc_cfg, oversample))
            labels.append(SoftLabel.one_hot(dataset.label(int(i)), config.classes))
        fracs = [float(rng.beta(aug.mixup_alpha, aug.mixup_alpha)) for _ in batch_idx]
        mixed_pixels, mixed_encs, mixed_labels = [], [], []
        for j, i in enumerate(batch_idx):
            k = len(batch_idx) - 1 - j
            tb, lab = patchmix(batches[j], batches[k], labels[j], labels[k], fracs[j], rng)
            mixed_pixels.append(tb.pixels.reshape(len(tb), -1))
            mixed_encs.append(tb.encodings)
            mixed_labels.append(lab.weights)
    else:
        # one scale sequence per pair so MixUp preconditions hold
        n = (spec.width // config.r) * (spec.height // config.r)
        scale_seqs = {}
        for j, i in enumerate(batch_idx):
            k = len(batch_idx) - 1 - j
            pair = min(j, k)
            if pair not in scale_seqs:
                scale_seqs[pair] = rng.uniform(aug.scale_min, aug.scale_max, size=n)
            P = _sampler_with_scales(spec, config.r, scale_seqs[pair], rng)
            batches.append(extract_from_oversampled(dataset.oversampled(int(i)), P, enc_cfg, oversample))
            labels.append(SoftLabel.one_hot(dataset.label(int(i)), config.classes))
        mixed_pixels, mixed_encs, mixed_labels = [], [], []
        for j, i in enumerate(batch_idx):
            k = len(batch_idx) - 1 - j
            tb, lab = mixup_elastic(batches[j], batches[k], labels[j], labels[k], lam)
            mixed_pixels.append(tb.pixels.reshape(len(tb), -1))
            mixed_encs.append(tb.encodings)
            mixed_labels.append(lab.weights)
    return (
        np.stack(mixed_pixels).astype(dtype),
        np.stack(mixed_encs).astype(dtype),
        np.stack(mixed_labels).astype(dtype),
    )


def _sampler_with_scales(spec, r, scales, rng):
    """training_sampler with a fixed scale sequence (positions drawn here)."""
    from .geometry import Patch, PatchSet

    patches = []
    for s in scales:
        side = r * float(s)
        x = float(rng.uniform(0.0, max(0.0, spec.width - side)))
        y = float(rng.uniform(0.0, max(0.0, spec.height - side)))
        patches.append(Patch(x=x, y=y, s=float(s)))
    return PatchSet(image=spec, r=r, patches=tuple(patches))


def evaluate(
    params: ModelParams,
    dataset,
    indices=None,
    perturb: PerturbConfig | None = None,
    sampler: str = "grid",
    sampler_params: dict | None = None,
    seed_entropy: tuple = (0,),
    batch_size: int = 256,
    patchset_builder=None,
) -> float:
    """Top-1 accuracy under a sampler and optional perturbation pipeline.

    Each sample's perturbation uses its own generator seeded by
    (*seed_entropy, sample position), so results are independent of batching
    and comparable across sweeps. `patchset_builder(i, rng) -> PatchSet`
    overrides the sampler/perturbation path entirely when given.
    """
    from .sampling import central_sampling, edge_sampling

    cfg = params.config
    enc_cfg = cfg.encoding
    sampler_params = sampler_params or {}
    if indices is None:
        indices = np.arange(len(dataset))
    spec = dataset.native_spec
    base_grid = make_grid(spec, cfg.r)

    def build_set(i, pos):
        rng = np.random.default_rng(np.random.SeedSequence([*seed_entropy, int(pos)]))
        if patchset_builder is not None:
            return patchset_builder(int(i), rng)
        if sampler == "grid":
            P = base_grid
        elif sampler == "density":
            from .geometry import make_density_grid

            P = make_density_grid(spec, cfg.r, sampler_params["n"])
        elif sampler == "central":
            P = central_sampling(spec, cfg.r, sampler_params["target"])
        elif sampler == "edge":
            P = edge_sampling(dataset.native(int(i)), cfg.r, sampler_params["target"],
                              **{k: v for k, v in sampler_params.items() if k != "target"})
        else:
            raise ValueError(f"unknown sampler {sampler!r}")
        if perturb is not None:
            P = apply_pipeline(P, perturb, rng)
        return P

    hits = 0
    pos = 0
    for start in range(0, len(indices), batch_size):
        chunk = indices[start : start + batch_size]
        sets = [build_set(i, pos + j) for j, i in enumerate(chunk)]
        counts = {len(P) for P in sets}
        for n in counts:
            sel = [j for j, P in enumerate(sets) if len(P) == n]
            pixels = np.stack(
                [sample_patchset(dataset.native(int(chunk[j])), sets[j]).reshape(n, -1) for j in sel]
            )
            encs = np.stack([encode_patchset(sets[j], enc_cfg) for j in sel])
            logits, _ = forward(params, pixels, encs, train_mode=False)
            preds = logits.argmax(axis=1)
            for idx_in_sel, j in enumerate(sel):
                hits += int(preds[idx_in_sel] == dataset.label(int(chunk[j])))
        pos += len(chunk)
    return hits / max(1, len(indices))


# ---------------------------------------------------------------------------
# Checkpoints

_CKPT_MAGIC = b"EPCK"
_CKPT_VERSION = 1


def save_checkpoint(path, params: ModelParams, extra: dict[str, np.ndarray] | None = None):
    """Write the versioned binary checkpoint (all payloads little-endian f64)."""
    from .tensorio import write_tensors

    cfg = params.config
    tensors = dict(params.tensors)
    if extra:
        tensors.update(extra)
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", _CKPT_VERSION))
        f.write(
            struct.pack(
                "<6i2d", cfg.r, cfg.channels, cfg.dim, cfg.heads, cfg.depth, cfg.classes,
                cfg.mlp_ratio, cfg.dropout,
            )
        )
        write_tensors(f, tensors)


def load_checkpoint(path):
    """Read a checkpoint; returns (ModelConfig, {name: tensor})."""
    from .tensorio import read_tensors

    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _CKPT_MAGIC:
        raise ParseError(f"bad checkpoint magic {data[:4]!r}", offset=0)
    if len(data) < 8 + struct.calcsize("<6i2d"):
        raise ParseError("truncated checkpoint header", offset=len(data))
    (version,) = struct.unpack_from("<I", data, 4)
    if version != _CKPT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", offset=4)
    r, channels, dim, heads, depth, classes, mlp_ratio, dropout = struct.unpack_from("<6i2d", data, 8)
    cfg = ModelConfig(
        r=r, channels=channels, dim=dim, heads=heads, depth=depth, classes=classes,
        mlp_ratio=mlp_ratio, dropout=dropout,
    )
    tensors = read_tensors(data, 8 + struct.calcsize("<6i2d"))
    return cfg, tensors


def params_from_checkpoint(path) -> ModelParams:
    """Load model parameters, ignoring any extra (optimizer/meta) tensors."""
    cfg, tensors = load_checkpoint(path)
    ref = init_params(cfg, np.random.default_rng(0))
    missing = [k for k in ref.names() if k not in tensors]
    if missing:
        raise ParseError(f"checkpoint missing tensors: {missing[:3]}...", offset=None)
    return ModelParams(cfg, {k: tensors[k] for k in ref.names()})
