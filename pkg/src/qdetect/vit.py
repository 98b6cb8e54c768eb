"""Simplified vision transformer with hand-written backprop and a bit-exact
fixed-point inference path.

Float model
-----------
An image is split into non-overlapping P x P patches (row-major traversal,
row-major flattening inside each patch) and scaled to [0, 1] by the stored
input normalizer.  With a learnable class token and position embeddings::

    z0  = [x_class; patch_1 E; ...; patch_N E] + E_pos
    u   = MSA(z) + z                      (per block)
    z'  = ReLU(Linear(BN(u))) + u
    y   = Linear(BN(z_L[class token]))

MSA runs ``n_heads`` scaled-dot-product attention heads.  In the default
"split" head shape each head projects to d = D / n_heads features and the
head outputs are concatenated; the "literal" shape gives every head full
D x D projections and sums the head outputs.  Both feed the output
projection ``wo``.  Batch norm normalizes over the feature axis across all
batch-and-token rows: batch statistics while training, running statistics
(folded to a per-feature scale/offset) at inference.

Training is plain SGD on softmax cross-entropy with every gradient written
out by hand; no autodiff framework is involved.

Fixed-point model
-----------------
``quantize_vit`` rounds every parameter to the target format (default
ap_fixed<16,8>: 16-bit words, 8 fraction bits) and folds batch-norm running
statistics into per-feature scale/offset codes.  ``infer_fixed`` then runs
entirely on integer codes: exact int64 matrix accumulation with a single
terminal round per output element, saturating adds, a 256-entry exponential
lookup table for softmax (14 fraction bits, arguments in steps of 1/32), and
a rounded integer reciprocal for the probability normalization.  A dtype
guard rejects any floating-point contamination between the input quantizer
and the logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import binio
from .dataset import Dataset
from .errors import ConfigurationError, TrainingError
from .fixedpoint import (
    FixedFormat,
    add as fixed_add,
    ensure_integer_codes,
    fixed_matmul,
    mul as fixed_mul,
    quantize,
    rne_shift_right,
    saturate,
)
from .seeding import generator as _rng

QVIT_VERSION = 1

_STREAM_INIT = 0xD0
_STREAM_TRAIN = 0xD1

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1

EXP_TABLE_SIZE = 256
EXP_FRACTION_BITS = 14
EXP_STEP = 1.0 / 32.0  # lookup argument granularity (in real value)
_RECIP_BITS = 28


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class VitConfig:
    """Architecture and training hyperparameters.

    ``head_shape`` selects the attention geometry: "split" gives each of the
    ``n_heads`` heads d = latent_dim / n_heads features and concatenates the
    head outputs; "literal" gives each head full latent_dim x latent_dim
    projections and sums the head outputs instead.
    """

    image: tuple
    patch_size: int
    n_classes: int
    latent_dim: int = 16
    n_heads: int = 8
    n_layers: int = 1
    learning_rate: float = 0.05
    batch_size: int = 128
    epochs: int = 30
    seed: int = 0
    head_shape: str = "split"

    def __post_init__(self):
        object.__setattr__(self, "image", tuple(int(v) for v in self.image))
        h, w = self.image
        p = self.patch_size
        if p < 1 or h % p or w % p:
            raise ConfigurationError(
                f"image {h}x{w} is not divisible into {p}x{p} patches"
            )
        if self.head_shape not in ("split", "literal"):
            raise ConfigurationError(
                f"head_shape must be split|literal, got {self.head_shape!r}"
            )
        if self.head_shape == "split" and self.latent_dim % self.n_heads:
            raise ConfigurationError(
                f"latent_dim {self.latent_dim} not divisible by "
                f"{self.n_heads} heads"
            )
        if self.n_classes < 2:
            raise ConfigurationError("n_classes must be >= 2")
        if min(self.n_layers, self.n_heads, self.latent_dim, self.epochs,
               self.batch_size) < 1:
            raise ConfigurationError("counts must be >= 1")

    @property
    def n_patches(self) -> int:
        h, w = self.image
        return (h // self.patch_size) * (w // self.patch_size)

    @property
    def tokens(self) -> int:
        return self.n_patches + 1

    @property
    def head_dim(self) -> int:
        if self.head_shape == "literal":
            return self.latent_dim
        return self.latent_dim // self.n_heads


# ---------------------------------------------------------------------------
# model containers


@dataclass
class VitBlock:
    wq: np.ndarray  # (n_heads, D, head_dim)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray  # (D, D)
    gamma1: np.ndarray  # (D,)
    beta1: np.ndarray
    run_mu1: np.ndarray
    run_var1: np.ndarray
    w_lin: np.ndarray  # (D, D)
    b_lin: np.ndarray  # (D,)


@dataclass
class VitModel:
    config: VitConfig
    norm_max: float
    E: np.ndarray  # (P^2, D)
    E_pos: np.ndarray  # (tokens, D)
    x_class: np.ndarray  # (D,)
    blocks: list
    gamma_h: np.ndarray  # (D,)
    beta_h: np.ndarray
    run_mu_h: np.ndarray
    run_var_h: np.ndarray
    w_head: np.ndarray  # (D, n_classes)
    b_head: np.ndarray  # (n_classes,)


def parameters(model: VitModel) -> dict:
    """Trainable tensors by name (running statistics are not trainable)."""
    params = {"E": model.E, "E_pos": model.E_pos, "x_class": model.x_class}
    for l, blk in enumerate(model.blocks):
        params[f"block{l}.wq"] = blk.wq
        params[f"block{l}.wk"] = blk.wk
        params[f"block{l}.wv"] = blk.wv
        params[f"block{l}.wo"] = blk.wo
        params[f"block{l}.gamma1"] = blk.gamma1
        params[f"block{l}.beta1"] = blk.beta1
        params[f"block{l}.w_lin"] = blk.w_lin
        params[f"block{l}.b_lin"] = blk.b_lin
    params["gamma_h"] = model.gamma_h
    params["beta_h"] = model.beta_h
    params["w_head"] = model.w_head
    params["b_head"] = model.b_head
    return params


def initialize_vit(cfg: VitConfig, norm_max: float,
                   rng: np.random.Generator | None = None) -> VitModel:
    """Fresh model: uniform +-1/sqrt(fan_in) weights, zero biases/offsets,
    unit scales, zero running means, unit running variances."""
    rng = rng if rng is not None else _rng(cfg.seed, _STREAM_INIT)
    d = cfg.latent_dim
    dh = cfg.head_dim
    pp = cfg.patch_size * cfg.patch_size

    def u(fan, *shape):
        bound = 1.0 / math.sqrt(fan)
        return rng.uniform(-bound, bound, size=shape)

    blocks = []
    e = u(pp, pp, d)
    e_pos = u(d, cfg.tokens, d)
    x_class = u(d, d)
    for _ in range(cfg.n_layers):
        blocks.append(
            VitBlock(
                wq=u(d, cfg.n_heads, d, dh),
                wk=u(d, cfg.n_heads, d, dh),
                wv=u(d, cfg.n_heads, d, dh),
                wo=u(d, d, d),
                gamma1=np.ones(d),
                beta1=np.zeros(d),
                run_mu1=np.zeros(d),
                run_var1=np.ones(d),
                w_lin=u(d, d, d),
                b_lin=np.zeros(d),
            )
        )
    return VitModel(
        config=cfg,
        norm_max=float(norm_max),
        E=e,
        E_pos=e_pos,
        x_class=x_class,
        blocks=blocks,
        gamma_h=np.ones(d),
        beta_h=np.zeros(d),
        run_mu_h=np.zeros(d),
        run_var_h=np.ones(d),
        w_head=u(d, d, cfg.n_classes),
        b_head=np.zeros(cfg.n_classes),
    )


# ---------------------------------------------------------------------------
# float forward pieces


def patchify(pixels, patch_size: int, norm_max: float = 1.0) -> np.ndarray:
    """(batch, N, P^2) patch matrix: row-major patch traversal, row-major
    flattening within a patch, values divided by ``norm_max``."""
    x = np.asarray(pixels, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    h, w = x.shape[1:]
    p = patch_size
    if p < 1 or h % p or w % p:
        raise ConfigurationError(
            f"image {h}x{w} is not divisible into {p}x{p} patches"
        )
    n = (h // p) * (w // p)
    patches = (
        x.reshape(len(x), h // p, p, w // p, p)
        .transpose(0, 1, 3, 2, 4)
        .reshape(len(x), n, p * p)
    )
    return patches / norm_max


def embed(patches: np.ndarray, model: VitModel) -> np.ndarray:
    """z0 = [x_class; patch E rows] + E_pos, shape (batch, tokens, D)."""
    emb = patches @ model.E
    cls = np.broadcast_to(model.x_class, (len(emb), 1, model.E.shape[1]))
    return np.concatenate([cls, emb], axis=1) + model.E_pos


def softmax_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise softmax along the last axis with max-subtraction."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def self_attention(z, wq, wk, wv) -> np.ndarray:
    """Scaled dot-product attention for one head: softmax(QK^T/sqrt(d))V."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 2
    if single:
        z = z[None]
    q = z @ wq
    k = z @ wk
    v = z @ wv
    scores = (q @ k.swapaxes(-1, -2)) / math.sqrt(wq.shape[-1])
    out = softmax_rows(scores) @ v
    return out[0] if single else out


def _attention_all_heads(z3, blk: VitBlock):
    """All heads at once; returns (combined (B,T,D), cache for backprop)."""
    q = np.einsum("btd,hde->bhte", z3, blk.wq)
    k = np.einsum("btd,hde->bhte", z3, blk.wk)
    v = np.einsum("btd,hde->bhte", z3, blk.wv)
    scores = np.einsum("bhte,bhue->bhtu", q, k) / math.sqrt(blk.wq.shape[-1])
    attn = softmax_rows(scores)
    heads = np.einsum("bhtu,bhue->bhte", attn, v)  # (B, H, T, e)
    b, h, t, e = heads.shape
    d = blk.wo.shape[0]
    if h * e == d:
        combined = heads.transpose(0, 2, 1, 3).reshape(b, t, d)
    else:
        combined = heads.sum(axis=1)
    cache = {"q": q, "k": k, "v": v, "attn": attn, "z": z3}
    return combined, cache


def msa(z, blk: VitBlock) -> np.ndarray:
    """Multi-head self-attention: combine head outputs, project with wo."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 2
    if single:
        z = z[None]
    combined, _ = _attention_all_heads(z, blk)
    out = combined @ blk.wo
    return out[0] if single else out


def batch_norm_train(x: np.ndarray, gamma, beta):
    """Batch-statistics normalization over axis 0; returns (y, cache)."""
    mu = x.mean(axis=0)
    var = x.var(axis=0)
    inv = 1.0 / np.sqrt(var + _BN_EPS)
    xhat = (x - mu) * inv
    return gamma * xhat + beta, {"mu": mu, "var": var, "inv": inv, "xhat": xhat}


def _bn_fold(gamma, beta, run_mu, run_var):
    scale = gamma / np.sqrt(run_var + _BN_EPS)
    return scale, beta - run_mu * scale


def batch_norm_infer(x: np.ndarray, gamma, beta, run_mu, run_var) -> np.ndarray:
    """Running-statistics normalization as a per-feature affine."""
    scale, offset = _bn_fold(gamma, beta, run_mu, run_var)
    return x * scale + offset


def _bn_backward(dy, gamma, cache):
    """Gradient through batch-statistics normalization."""
    xhat, inv = cache["xhat"], cache["inv"]
    dgamma = np.sum(dy * xhat, axis=0)
    dbeta = np.sum(dy, axis=0)
    dxhat = dy * gamma
    dx = inv * (
        dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0)
    )
    return dx, dgamma, dbeta


def transformer_block(z, blk: VitBlock, mode: str = "infer") -> np.ndarray:
    """z' = ReLU(Linear(BN(MSA(z) + z))) + (MSA(z) + z)."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 2
    if single:
        z = z[None]
    combined, _ = _attention_all_heads(z, blk)
    u = combined @ blk.wo + z
    flat = u.reshape(-1, u.shape[-1])
    if mode == "train":
        bnout, _ = batch_norm_train(flat, blk.gamma1, blk.beta1)
    else:
        bnout = batch_norm_infer(
            flat, blk.gamma1, blk.beta1, blk.run_mu1, blk.run_var1
        )
    lin = bnout @ blk.w_lin + blk.b_lin
    out = np.maximum(lin, 0.0).reshape(u.shape) + u
    return out[0] if single else out


def classify_head(z_class, model: VitModel, mode: str = "infer") -> np.ndarray:
    """Logits from the class-token row: Linear(BN(z_class))."""
    z_class = np.asarray(z_class, dtype=np.float64)
    if mode == "train":
        bnout, _ = batch_norm_train(z_class, model.gamma_h, model.beta_h)
    else:
        bnout = batch_norm_infer(
            z_class, model.gamma_h, model.beta_h,
            model.run_mu_h, model.run_var_h,
        )
    return bnout @ model.w_head + model.b_head


def forward_vit(model: VitModel, pixels, mode: str = "infer") -> np.ndarray:
    """Logits for a batch of images."""
    patches = patchify(pixels, model.config.patch_size, model.norm_max)
    z = embed(patches, model)
    for blk in model.blocks:
        z = transformer_block(z, blk, mode=mode)
    return classify_head(z[:, 0], model, mode=mode)


def predict_vit(model: VitModel, pixels) -> np.ndarray:
    """Argmax class per image."""
    return np.argmax(forward_vit(model, pixels), axis=1).astype(np.uint8)


# ---------------------------------------------------------------------------
# training (hand-written backprop)


def loss_and_grads_vit(model: VitModel, pixels, labels):
    """Mean cross-entropy, gradients for every trainable tensor, and the
    per-site batch statistics (for running-average updates).

    Pure: neither the parameters nor the running statistics are mutated.
    """
    cfg = model.config
    labels = np.asarray(labels, dtype=np.int64)
    patches = patchify(pixels, cfg.patch_size, model.norm_max)
    z = embed(patches, model)

    block_caches = []
    for blk in model.blocks:
        combined, attn_cache = _attention_all_heads(z, blk)
        m = combined @ blk.wo
        u = m + z
        flat = u.reshape(-1, u.shape[-1])
        bnout, bn_cache = batch_norm_train(flat, blk.gamma1, blk.beta1)
        lin = bnout @ blk.w_lin + blk.b_lin
        relu = np.maximum(lin, 0.0)
        z_next = relu.reshape(u.shape) + u
        block_caches.append(
            {
                "attn": attn_cache,
                "combined": combined,
                "u": u,
                "bnout": bnout,
                "bn": bn_cache,
                "lin": lin,
                "z_in": z,
            }
        )
        z = z_next

    z_class = z[:, 0]
    bnh, bnh_cache = batch_norm_train(z_class, model.gamma_h, model.beta_h)
    logits = bnh @ model.w_head + model.b_head

    shifted = logits - logits.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    probs = expv / expv.sum(axis=1, keepdims=True)
    batch = len(labels)
    loss = float(-np.mean(np.log(probs[np.arange(batch), labels] + 1e-300)))

    grads = {}
    dlogits = probs.copy()
    dlogits[np.arange(batch), labels] -= 1.0
    dlogits /= batch

    grads["w_head"] = bnh.T @ dlogits
    grads["b_head"] = dlogits.sum(axis=0)
    dbnh = dlogits @ model.w_head.T
    dz_class, grads["gamma_h"], grads["beta_h"] = _bn_backward(
        dbnh, model.gamma_h, bnh_cache
    )

    dz = np.zeros_like(z)
    dz[:, 0] = dz_class

    for l in range(len(model.blocks) - 1, -1, -1):
        blk = model.blocks[l]
        cache = block_caches[l]
        b, t, d = cache["u"].shape

        dz_next = dz
        drelu = dz_next.reshape(-1, d) * (cache["lin"] > 0.0)
        grads[f"block{l}.w_lin"] = cache["bnout"].T @ drelu
        grads[f"block{l}.b_lin"] = drelu.sum(axis=0)
        dbnout = drelu @ blk.w_lin.T
        du_flat, grads[f"block{l}.gamma1"], grads[f"block{l}.beta1"] = (
            _bn_backward(dbnout, blk.gamma1, cache["bn"])
        )
        du = du_flat.reshape(b, t, d) + dz_next

        dm = du
        comb_flat = cache["combined"].reshape(-1, d)
        grads[f"block{l}.wo"] = comb_flat.T @ dm.reshape(-1, d)
        dcombined = dm @ blk.wo.T

        ac = cache["attn"]
        n_heads, dh = blk.wq.shape[0], blk.wq.shape[2]
        if n_heads * dh == d:
            dheads = dcombined.reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3)
        else:
            dheads = np.broadcast_to(
                dcombined[:, None], (b, n_heads, t, dh)
            )
        dattn = np.einsum("bhte,bhue->bhtu", dheads, ac["v"])
        dv = np.einsum("bhtu,bhte->bhue", ac["attn"], dheads)
        dscores = ac["attn"] * (
            dattn - (dattn * ac["attn"]).sum(axis=-1, keepdims=True)
        )
        dscores = dscores / math.sqrt(dh)
        dq = np.einsum("bhtu,bhue->bhte", dscores, ac["k"])
        dk = np.einsum("bhtu,bhte->bhue", dscores, ac["q"])

        z_in = cache["z_in"]
        grads[f"block{l}.wq"] = np.einsum("btd,bhte->hde", z_in, dq)
        grads[f"block{l}.wk"] = np.einsum("btd,bhte->hde", z_in, dk)
        grads[f"block{l}.wv"] = np.einsum("btd,bhte->hde", z_in, dv)

        dz = (
            du
            + np.einsum("bhte,hde->btd", dq, blk.wq)
            + np.einsum("bhte,hde->btd", dk, blk.wk)
            + np.einsum("bhte,hde->btd", dv, blk.wv)
        )

    grads["E_pos"] = dz.sum(axis=0)
    grads["x_class"] = dz[:, 0].sum(axis=0)
    demb = dz[:, 1:]
    grads["E"] = np.einsum("bnp,bnd->pd", patches, demb)

    stats = {
        "blocks": [
            (c["bn"]["mu"], c["bn"]["var"]) for c in block_caches
        ],
        "head": (bnh_cache["mu"], bnh_cache["var"]),
    }
    return loss, grads, stats


def train_vit(cfg: VitConfig, data, labels=None, return_history: bool = False):
    """SGD training on (pixels, labels) arrays or a Dataset's train split."""
    if isinstance(data, Dataset):
        pixels, labels = data.train_pixels, data.train_labels
    else:
        pixels = data
    pixels = np.asarray(pixels, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if pixels.shape[1:] != cfg.image:
        raise ConfigurationError(
            f"images are {pixels.shape[1:]}, config expects {cfg.image}"
        )
    if labels.max() >= cfg.n_classes:
        raise ConfigurationError(
            f"label {labels.max()} out of range for {cfg.n_classes} classes"
        )

    norm_max = float(pixels.max())
    if norm_max <= 0:
        norm_max = 1.0
    model = initialize_vit(cfg, norm_max=norm_max)
    params = parameters(model)

    rng = _rng(cfg.seed, _STREAM_TRAIN)
    history = []
    n = len(labels)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            with np.errstate(over="ignore", invalid="ignore", under="ignore"):
                loss, grads, stats = loss_and_grads_vit(
                    model, pixels[idx], labels[idx]
                )
            if not np.isfinite(loss) or not all(
                np.all(np.isfinite(p)) for p in params.values()
            ):
                raise TrainingError(
                    f"training diverged at epoch {epoch}", epoch=epoch
                )
            with np.errstate(over="ignore", invalid="ignore", under="ignore"):
                for name, p in params.items():
                    p -= cfg.learning_rate * grads[name]
                for blk, (mu, var) in zip(model.blocks, stats["blocks"]):
                    blk.run_mu1 += _BN_MOMENTUM * (mu - blk.run_mu1)
                    blk.run_var1 += _BN_MOMENTUM * (var - blk.run_var1)
                mu_h, var_h = stats["head"]
                model.run_mu_h += _BN_MOMENTUM * (mu_h - model.run_mu_h)
                model.run_var_h += _BN_MOMENTUM * (var_h - model.run_var_h)
            epoch_loss += loss
            n_batches += 1
        history.append(epoch_loss / max(n_batches, 1))
    return (model, history) if return_history else model


# ---------------------------------------------------------------------------
# fixed-point model


@dataclass
class FixedVitBlock:
    wq: np.ndarray  # int64 codes
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    bn_scale: np.ndarray  # folded batch-norm affine, (D,)
    bn_offset: np.ndarray
    w_lin: np.ndarray
    b_lin: np.ndarray


@dataclass
class FixedVitModel:
    config: VitConfig
    fmt: FixedFormat
    norm_max: float
    E: np.ndarray
    E_pos: np.ndarray
    x_class: np.ndarray
    blocks: list
    bn_scale_h: np.ndarray
    bn_offset_h: np.ndarray
    w_head: np.ndarray
    b_head: np.ndarray
    saturated: int
    exp_table: np.ndarray
    inv_sqrt_code: int

    def tensors(self) -> dict:
        out = {"E": self.E, "E_pos": self.E_pos, "x_class": self.x_class}
        for l, blk in enumerate(self.blocks):
            for name in ("wq", "wk", "wv", "wo", "bn_scale", "bn_offset",
                         "w_lin", "b_lin"):
                out[f"block{l}.{name}"] = getattr(blk, name)
        out["bn_scale_h"] = self.bn_scale_h
        out["bn_offset_h"] = self.bn_offset_h
        out["w_head"] = self.w_head
        out["b_head"] = self.b_head
        return out


def build_exp_table(size: int = EXP_TABLE_SIZE,
                    fraction_bits: int = EXP_FRACTION_BITS) -> np.ndarray:
    """exp(-i/32) rounded to ``fraction_bits`` fraction bits, i = 0..size-1."""
    args = np.arange(size, dtype=np.float64) * EXP_STEP
    return np.rint(np.exp(-args) * (1 << fraction_bits)).astype(np.int64)


def quantize_vit(model: VitModel, fmt: FixedFormat = FixedFormat(16, 8)
                 ) -> FixedVitModel:
    """Round every parameter to ``fmt`` codes and fold batch-norm running
    statistics into per-feature scale/offset codes.

    Values outside the representable range saturate; ``saturated`` counts
    them so reports can flag lossy conversions.
    """
    if fmt.fraction_bits < 5:
        raise ConfigurationError(
            "fixed softmax needs at least 5 fraction bits for its exponent "
            f"argument, got {fmt.fraction_bits}"
        )
    n_sat = 0

    def q(x):
        nonlocal n_sat
        x = np.asarray(x, dtype=np.float64)
        n_sat += int(np.sum((x < fmt.min_value) | (x > fmt.max_value)))
        return quantize(x, fmt)

    blocks = []
    for blk in model.blocks:
        scale, offset = _bn_fold(
            blk.gamma1, blk.beta1, blk.run_mu1, blk.run_var1
        )
        blocks.append(
            FixedVitBlock(
                wq=q(blk.wq), wk=q(blk.wk), wv=q(blk.wv), wo=q(blk.wo),
                bn_scale=q(scale), bn_offset=q(offset),
                w_lin=q(blk.w_lin), b_lin=q(blk.b_lin),
            )
        )
    scale_h, offset_h = _bn_fold(
        model.gamma_h, model.beta_h, model.run_mu_h, model.run_var_h
    )
    return FixedVitModel(
        config=model.config,
        fmt=fmt,
        norm_max=model.norm_max,
        E=q(model.E),
        E_pos=q(model.E_pos),
        x_class=q(model.x_class),
        blocks=blocks,
        bn_scale_h=q(scale_h),
        bn_offset_h=q(offset_h),
        w_head=q(model.w_head),
        b_head=q(model.b_head),
        saturated=n_sat,
        exp_table=build_exp_table(),
        inv_sqrt_code=int(np.rint(fmt.scale / math.sqrt(model.config.head_dim))),
    )


def fixed_softmax(score_codes: np.ndarray, exp_table: np.ndarray,
                  fraction_bits: int = 8) -> np.ndarray:
    """Row-wise softmax over integer score codes.

    Exponentials come from the lookup table (indexed by the max-subtracted
    score in 1/32 steps); normalization multiplies by a rounded integer
    reciprocal of the row sum.  Output codes carry EXP_FRACTION_BITS fraction
    bits and each row sums to 1 within 2^-7.
    """
    ensure_integer_codes(score_codes, exp_table)
    codes = np.asarray(score_codes, dtype=np.int64)
    shift = fraction_bits - 5  # code LSBs below the 1/32 table granularity
    diff = codes.max(axis=-1, keepdims=True) - codes
    idx = np.minimum(diff >> shift, len(exp_table) - 1)
    t = exp_table[idx]
    s = t.sum(axis=-1, keepdims=True)
    # Round-half-even integer reciprocal: recip ~= 2^_RECIP_BITS / s.
    num = np.int64(1) << _RECIP_BITS
    q0 = num // s
    r = num - q0 * s
    bump = (2 * r > s) | ((2 * r == s) & ((q0 & 1) == 1))
    recip = q0 + bump.astype(np.int64)
    return rne_shift_right(t * recip, _RECIP_BITS - EXP_FRACTION_BITS)


def _patch_codes(codes: np.ndarray, patch_size: int) -> np.ndarray:
    b, h, w = codes.shape
    p = patch_size
    n = (h // p) * (w // p)
    return (
        codes.reshape(b, h // p, p, w // p, p)
        .transpose(0, 1, 3, 2, 4)
        .reshape(b, n, p * p)
    )


def infer_fixed(fm: FixedVitModel, pixels) -> np.ndarray:
    """Integer-only logits codes for a batch of images.

    Every operation between input quantization and the returned logits is
    integer arithmetic in ``fm.fmt``; a dtype guard enforces this.
    """
    for arr in fm.tensors().values():
        ensure_integer_codes(arr)
    ensure_integer_codes(fm.exp_table)
    fmt = fm.fmt
    frac = fmt.fraction_bits
    cfg = fm.config

    x = np.asarray(pixels, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    codes0 = quantize(x / fm.norm_max, fmt)
    patches = _patch_codes(codes0, cfg.patch_size)  # (B, N, P^2)

    b = len(patches)
    d = cfg.latent_dim
    emb = fixed_matmul(patches, fm.E, fmt)  # (B, N, D)
    cls = np.broadcast_to(fm.x_class, (b, 1, d))
    z = fixed_add(np.concatenate([cls, emb], axis=1), fm.E_pos, fmt)

    for blk in fm.blocks:
        n_heads = blk.wq.shape[0]
        head_outs = []
        for h in range(n_heads):
            q = fixed_matmul(z, blk.wq[h], fmt)  # (B, T, dh)
            k = fixed_matmul(z, blk.wk[h], fmt)
            v = fixed_matmul(z, blk.wv[h], fmt)
            raw = np.einsum("bte,bue->btu", q, k)  # 2*frac fraction bits
            scores = saturate(rne_shift_right(raw, frac), fmt)
            scores = fixed_mul(scores, fm.inv_sqrt_code, fmt)
            probs = fixed_softmax(scores, fm.exp_table, frac)
            acc = np.einsum("btu,bue->bte", probs, v)
            head_outs.append(
                saturate(rne_shift_right(acc, EXP_FRACTION_BITS), fmt)
            )
        if n_heads * blk.wq.shape[2] == d:
            combined = np.concatenate(head_outs, axis=-1)
        else:
            combined = saturate(np.sum(head_outs, axis=0), fmt)
        m = fixed_matmul(combined, blk.wo, fmt)
        u = fixed_add(m, z, fmt)
        bn = fixed_add(fixed_mul(u, blk.bn_scale, fmt), blk.bn_offset, fmt)
        lin = fixed_matmul(bn, blk.w_lin, fmt, bias=blk.b_lin)
        z = fixed_add(np.maximum(lin, 0), u, fmt)

    z_class = z[:, 0]
    bn = fixed_add(
        fixed_mul(z_class, fm.bn_scale_h, fmt), fm.bn_offset_h, fmt
    )
    logits = fixed_matmul(bn, fm.w_head, fmt, bias=fm.b_head)
    return np.asarray(logits, dtype=np.int64)


def predict_fixed(fm: FixedVitModel, pixels) -> np.ndarray:
    """Argmax class per image from the fixed-point evaluator."""
    return np.argmax(infer_fixed(fm, pixels), axis=1).astype(np.uint8)


# ---------------------------------------------------------------------------
# persistence

_KIND_FLOAT = 0
_KIND_FIXED = 1
_HEAD_SHAPES = {"split": 0, "literal": 1}
_HEAD_NAMES = {v: k for k, v in _HEAD_SHAPES.items()}


def _float_tensor_specs(cfg: VitConfig):
    d = cfg.latent_dim
    dh = cfg.head_dim
    pp = cfg.patch_size * cfg.patch_size
    specs = [
        ("E", (pp, d)), ("E_pos", (cfg.tokens, d)), ("x_class", (d,)),
    ]
    for l in range(cfg.n_layers):
        specs += [
            (f"block{l}.wq", (cfg.n_heads, d, dh)),
            (f"block{l}.wk", (cfg.n_heads, d, dh)),
            (f"block{l}.wv", (cfg.n_heads, d, dh)),
            (f"block{l}.wo", (d, d)),
            (f"block{l}.gamma1", (d,)),
            (f"block{l}.beta1", (d,)),
            (f"block{l}.run_mu1", (d,)),
            (f"block{l}.run_var1", (d,)),
            (f"block{l}.w_lin", (d, d)),
            (f"block{l}.b_lin", (d,)),
        ]
    specs += [
        ("gamma_h", (d,)), ("beta_h", (d,)),
        ("run_mu_h", (d,)), ("run_var_h", (d,)),
        ("w_head", (d, cfg.n_classes)), ("b_head", (cfg.n_classes,)),
    ]
    return specs


def _fixed_tensor_specs(cfg: VitConfig):
    d = cfg.latent_dim
    dh = cfg.head_dim
    pp = cfg.patch_size * cfg.patch_size
    specs = [
        ("E", (pp, d)), ("E_pos", (cfg.tokens, d)), ("x_class", (d,)),
    ]
    for l in range(cfg.n_layers):
        specs += [
            (f"block{l}.wq", (cfg.n_heads, d, dh)),
            (f"block{l}.wk", (cfg.n_heads, d, dh)),
            (f"block{l}.wv", (cfg.n_heads, d, dh)),
            (f"block{l}.wo", (d, d)),
            (f"block{l}.bn_scale", (d,)),
            (f"block{l}.bn_offset", (d,)),
            (f"block{l}.w_lin", (d, d)),
            (f"block{l}.b_lin", (d,)),
        ]
    specs += [
        ("bn_scale_h", (d,)), ("bn_offset_h", (d,)),
        ("w_head", (d, cfg.n_classes)), ("b_head", (cfg.n_classes,)),
    ]
    return specs


def _float_tensor_map(model: VitModel) -> dict:
    out = dict(parameters(model))
    for l, blk in enumerate(model.blocks):
        out[f"block{l}.run_mu1"] = blk.run_mu1
        out[f"block{l}.run_var1"] = blk.run_var1
    out["run_mu_h"] = model.run_mu_h
    out["run_var_h"] = model.run_var_h
    return out


def _validate_variances(model: VitModel) -> None:
    for blk in model.blocks:
        if np.any(blk.run_var1 <= 0):
            raise ConfigurationError("running variances must be positive")
    if np.any(model.run_var_h <= 0):
        raise ConfigurationError("running variances must be positive")


def _write_config(w: binio.Writer, cfg: VitConfig, norm_max: float) -> None:
    h, wid = cfg.image
    w.pack("HH", h, wid)
    w.pack("B", cfg.patch_size)
    w.pack("H", cfg.latent_dim)
    w.pack("B", cfg.n_heads)
    w.pack("B", cfg.n_layers)
    w.pack("H", cfg.n_classes)
    w.pack("d", cfg.learning_rate)
    w.pack("I", cfg.batch_size)
    w.pack("I", cfg.epochs)
    w.pack("Q", cfg.seed & (2**64 - 1))
    w.pack("B", _HEAD_SHAPES[cfg.head_shape])
    w.pack("d", norm_max)


def _read_config(r: binio.Reader):
    h, wid = r.unpack("HH")
    patch = r.unpack("B")
    d = r.unpack("H")
    n_heads = r.unpack("B")
    n_layers = r.unpack("B")
    n_classes = r.unpack("H")
    lr = r.unpack("d")
    batch = r.unpack("I")
    epochs = r.unpack("I")
    seed = r.unpack("Q")
    head_shape = _HEAD_NAMES[r.unpack("B")]
    norm_max = r.unpack("d")
    cfg = VitConfig(
        image=(h, wid), patch_size=patch, n_classes=n_classes,
        latent_dim=d, n_heads=n_heads, n_layers=n_layers,
        learning_rate=lr, batch_size=batch, epochs=epochs, seed=seed,
        head_shape=head_shape,
    )
    return cfg, norm_max


def save_vit_model(model, path) -> None:
    """Persist a float VitModel or FixedVitModel (dispatch on type)."""
    w = binio.Writer()
    w.raw(binio.MAGIC_QVIT)
    w.pack("H", QVIT_VERSION)
    if isinstance(model, FixedVitModel):
        w.pack("B", _KIND_FIXED)
        _write_config(w, model.config, model.norm_max)
        w.pack("BB", model.fmt.total_bits, model.fmt.fraction_bits)
        w.pack("I", model.saturated)
        tensors = model.tensors()
        for name, shape in _fixed_tensor_specs(model.config):
            arr = tensors[name]
            if arr.shape != shape:
                raise ConfigurationError(
                    f"tensor {name} has shape {arr.shape}, expected {shape}"
                )
            w.array(arr, np.int16)
    else:
        _validate_variances(model)
        w.pack("B", _KIND_FLOAT)
        _write_config(w, model.config, model.norm_max)
        tensors = _float_tensor_map(model)
        for name, shape in _float_tensor_specs(model.config):
            arr = tensors[name]
            if arr.shape != shape:
                raise ConfigurationError(
                    f"tensor {name} has shape {arr.shape}, expected {shape}"
                )
            w.array(arr, np.float64)
    binio.write_file(path, w.getvalue())


def load_vit_model(path):
    """Load a float VitModel or FixedVitModel from a QVIT file."""
    with binio.open_reader(path, binio.MAGIC_QVIT, QVIT_VERSION) as r:
        kind = r.unpack("B")
        cfg, norm_max = _read_config(r)
        if kind == _KIND_FIXED:
            total, fraction = r.unpack("BB")
            fmt = FixedFormat(total, fraction)
            saturated = r.unpack("I")
            tensors = {}
            for name, shape in _fixed_tensor_specs(cfg):
                flat = r.array(np.int16, int(np.prod(shape)))
                tensors[name] = flat.astype(np.int64).reshape(shape)
            blocks = [
                FixedVitBlock(
                    **{
                        f: tensors[f"block{l}.{f}"]
                        for f in ("wq", "wk", "wv", "wo", "bn_scale",
                                  "bn_offset", "w_lin", "b_lin")
                    }
                )
                for l in range(cfg.n_layers)
            ]
            return FixedVitModel(
                config=cfg, fmt=fmt, norm_max=norm_max,
                E=tensors["E"], E_pos=tensors["E_pos"],
                x_class=tensors["x_class"], blocks=blocks,
                bn_scale_h=tensors["bn_scale_h"],
                bn_offset_h=tensors["bn_offset_h"],
                w_head=tensors["w_head"], b_head=tensors["b_head"],
                saturated=saturated,
                exp_table=build_exp_table(),
                inv_sqrt_code=int(np.rint(fmt.scale / math.sqrt(cfg.head_dim))),
            )
        tensors = {}
        for name, shape in _float_tensor_specs(cfg):
            flat = r.array(np.float64, int(np.prod(shape)))
            tensors[name] = flat.reshape(shape)
    blocks = [
        VitBlock(
            **{
                f: tensors[f"block{l}.{f}"]
                for f in ("wq", "wk", "wv", "wo", "gamma1", "beta1",
                          "run_mu1", "run_var1", "w_lin", "b_lin")
            }
        )
        for l in range(cfg.n_layers)
    ]
    model = VitModel(
        config=cfg, norm_max=norm_max,
        E=tensors["E"], E_pos=tensors["E_pos"], x_class=tensors["x_class"],
        blocks=blocks,
        gamma_h=tensors["gamma_h"], beta_h=tensors["beta_h"],
        run_mu_h=tensors["run_mu_h"], run_var_h=tensors["run_var_h"],
        w_head=tensors["w_head"], b_head=tensors["b_head"],
    )
    _validate_variances(model)
    return model
