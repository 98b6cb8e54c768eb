"""Sparse, activation-quantized polynomial MLP and its truth-table form.

Each neuron owns A independent sub-neurons.  A sub-neuron sees F inputs
selected (seeded-randomly) from the previous layer, expands them into every
monomial of total degree <= D, takes a full-precision dot product with its
coefficient vector, and applies a scalar scale/offset (batch normalization
folded after training).  Sub-neuron outputs are quantized to beta+1 bits over
a symmetric per-layer range, summed, squashed by a bounded activation
(clip to [0, 1]) and re-quantized to beta bits — except in the final layer,
where the quantized sub-neuron outputs are summed directly into the logits.

Because every value crossing a neuron boundary is a small integer code, each
sub-neuron collapses into a 2^(beta*F)-entry truth table and each A-way adder
(plus activation) into a 2^(A*(beta+1))-entry table.  Compilation enumerates
all codes through the reference arithmetic, so table evaluation is bit-exact
against ``forward`` by construction; ``verify_equivalence`` re-checks that
exhaustively.

Training uses straight-through estimators for both quantizers (identity
gradient inside the clip range, zero outside), full-precision coefficients
with per-sub-neuron batch normalization (batch statistics during training,
running statistics folded into the stored scale/offset afterwards), softmax
cross-entropy, and AdamW (decay on coefficients only).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import binio
from .dataset import Dataset
from .errors import ConfigurationError, EquivalenceError, TrainingError
from .seeding import generator as _rng

QMLP_VERSION = 1
QLUT_VERSION = 1

_STREAM_CONN = 0xC0
_STREAM_INIT = 0xC1
_STREAM_TRAIN = 0xC2

_EVAL_CHUNK = 1024

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class PolyMlpConfig:
    """Architecture and training hyperparameters.

    ``hidden_widths`` excludes the output layer; the output layer has
    ``n_classes`` neurons unless ``head_width`` pins a wider literal head
    (argmax is then taken over the first ``n_classes`` logits).
    """

    hidden_widths: tuple = (256, 100, 100, 100)
    n_classes: int = 2
    fan_in: int = 4
    activation_bits: int = 2
    poly_degree: int = 2
    subneurons: int = 2
    seed: int = 0
    learning_rate: float = 0.008
    epochs: int = 40
    batch_size: int = 128
    weight_decay: float = 0.01
    head_width: int | None = None
    input_calibration: tuple = ("minmax",)
    sub_range_hidden: float = 1.0
    sub_range_final: float = 4.0
    optimizer_tag: str = "adamw"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if min(self.fan_in, self.activation_bits, self.poly_degree,
               self.subneurons) < 1:
            raise ConfigurationError(
                "fan_in, activation_bits, poly_degree, subneurons must be >= 1"
            )
        if self.n_classes < 1:
            raise ConfigurationError("n_classes must be >= 1")
        if self.head_width is not None and self.head_width < self.n_classes:
            raise ConfigurationError("head_width must be >= n_classes")
        if self.sub_range_hidden <= 0 or self.sub_range_final <= 0:
            raise ConfigurationError("sub-neuron quantizer ranges must be > 0")
        mode = self.input_calibration[0]
        if mode not in ("minmax", "quantile"):
            raise ConfigurationError(
                f"input_calibration mode must be minmax|quantile, got {mode!r}"
            )
        if mode == "quantile" and len(self.input_calibration) != 3:
            raise ConfigurationError("quantile calibration needs (lo, hi) fractions")

    @property
    def all_widths(self) -> tuple:
        return self.hidden_widths + (self.head_width or self.n_classes,)

    @property
    def n_monomials(self) -> int:
        return math.comb(self.fan_in + self.poly_degree, self.poly_degree)


# ---------------------------------------------------------------------------
# monomial expansion


def _exponent_combos(fan_in: int, degree: int) -> tuple:
    """Variable-index multisets ordered by ascending degree, then lex."""
    return tuple(
        combo
        for d in range(degree + 1)
        for combo in itertools.combinations_with_replacement(range(fan_in), d)
    )


def monomial_exponents(fan_in: int, degree: int) -> np.ndarray:
    """Exponent matrix (n_monomials, fan_in) in documented order."""
    combos = _exponent_combos(fan_in, degree)
    exps = np.zeros((len(combos), fan_in), dtype=np.int64)
    for m, combo in enumerate(combos):
        for var in combo:
            exps[m, var] += 1
    return exps


def expand_monomials(x: np.ndarray, degree: int) -> np.ndarray:
    """All monomials of total degree <= ``degree``, leading constant 1 first.

    For two inputs and degree 2 the order is [1, x1, x2, x1^2, x1*x2, x2^2].
    Works on any batched shape (..., fan_in) -> (..., n_monomials).
    """
    x = np.asarray(x, dtype=np.float64)
    fan_in = x.shape[-1]
    combos = _exponent_combos(fan_in, degree)
    out = np.empty(x.shape[:-1] + (len(combos),), dtype=np.float64)
    for m, combo in enumerate(combos):
        acc = np.ones(x.shape[:-1], dtype=np.float64)
        for var in combo:
            acc = acc * x[..., var]
        out[..., m] = acc
    return out


# ---------------------------------------------------------------------------
# quantizers


@dataclass(frozen=True)
class InputQuantizer:
    """Affine map from the calibrated pixel range [lo, hi] to beta-bit codes."""

    lo: float
    hi: float
    bits: int

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    def encode(self, pixels) -> np.ndarray:
        x = np.asarray(pixels, dtype=np.float64)
        codes = np.rint((x - self.lo) / (self.hi - self.lo) * self.levels)
        return np.clip(codes, 0, self.levels).astype(np.int64)

    def decode(self, codes) -> np.ndarray:
        """Codes to normalized values on the [0, 1] grid."""
        return np.asarray(codes, dtype=np.float64) / self.levels


def calibrate_input_quantizer(pixels, bits: int, calibration: tuple) -> InputQuantizer:
    flat = np.asarray(pixels, dtype=np.float64).reshape(-1)
    if calibration[0] == "minmax":
        lo, hi = float(flat.min()), float(flat.max())
    else:
        lo = float(np.quantile(flat, calibration[1]))
        hi = float(np.quantile(flat, calibration[2]))
    if hi <= lo:
        hi = lo + 1.0
    return InputQuantizer(lo=lo, hi=hi, bits=bits)


def _sub_quantize(p, r: float, bits_plus1_levels: int):
    """Quantize to the symmetric [-r, r] grid; returns (codes, values)."""
    codes = np.rint((p + r) / (2.0 * r) * bits_plus1_levels)
    codes = np.clip(codes, 0, bits_plus1_levels).astype(np.int64)
    values = -r + codes * (2.0 * r / bits_plus1_levels)
    return codes, values


# ---------------------------------------------------------------------------
# model


@dataclass
class PolyMlpModel:
    """Trained model: wiring, coefficients, per-sub-neuron affine, ranges.

    ``bn_scale``/``bn_offset`` hold the normalization affine applied to each
    sub-neuron's polynomial output before quantization (batch norm folded to
    plain scalars once training finishes; identity for a fresh model).
    """

    config: PolyMlpConfig
    input_width: int
    connectivity: tuple  # per layer: (width, A, F) int32
    coeffs: list  # per layer: (width, A, n_monomials) float64
    bn_scale: list  # per layer: (width, A) float64
    bn_offset: list  # per layer: (width, A) float64
    sub_ranges: tuple  # per layer: symmetric quantizer half-range
    input_quantizer: InputQuantizer
    final_loss: float = float("nan")

    @property
    def n_layers(self) -> int:
        return len(self.coeffs)


def select_connectivity(cfg: PolyMlpConfig, input_width: int) -> tuple:
    """Seeded random distinct-input selection per (layer, neuron, sub-neuron)."""
    conn = []
    prev = input_width
    for layer, width in enumerate(cfg.all_widths):
        if cfg.fan_in > prev:
            raise ConfigurationError(
                f"layer {layer}: fan_in {cfg.fan_in} exceeds input width {prev}"
            )
        arr = np.empty((width, cfg.subneurons, cfg.fan_in), dtype=np.int32)
        for n in range(width):
            for a in range(cfg.subneurons):
                rng = _rng(cfg.seed, _STREAM_CONN, layer, n, a)
                arr[n, a] = rng.choice(prev, size=cfg.fan_in, replace=False)
        conn.append(arr)
        prev = width
    return tuple(conn)


def initialize_model(cfg: PolyMlpConfig, input_width: int,
                     init_rng: np.random.Generator | None = None) -> PolyMlpModel:
    """Fresh model with seeded wiring and small random coefficients.

    Hidden constant terms start at 0.25 so the pre-activation sums sit inside
    the active region of the clipped activation.
    """
    rng = init_rng if init_rng is not None else _rng(cfg.seed, _STREAM_INIT)
    conn = select_connectivity(cfg, input_width)
    n_mono = cfg.n_monomials
    coeffs = []
    n_layers = len(cfg.all_widths)
    for layer, width in enumerate(cfg.all_widths):
        scale = 0.5 / math.sqrt(n_mono)
        c = rng.uniform(-scale, scale, size=(width, cfg.subneurons, n_mono))
        if layer < n_layers - 1:
            c[..., 0] += 0.25
        coeffs.append(c)
    sub_ranges = tuple(
        cfg.sub_range_final if layer == n_layers - 1 else cfg.sub_range_hidden
        for layer in range(n_layers)
    )
    quantizer = InputQuantizer(lo=0.0, hi=float((1 << 16) - 1), bits=cfg.activation_bits)
    return PolyMlpModel(
        config=cfg,
        input_width=input_width,
        connectivity=conn,
        coeffs=coeffs,
        bn_scale=[np.ones((w, cfg.subneurons)) for w in cfg.all_widths],
        bn_offset=[np.zeros((w, cfg.subneurons)) for w in cfg.all_widths],
        sub_ranges=sub_ranges,
        input_quantizer=quantizer,
    )


# ---------------------------------------------------------------------------
# forward / backward


def _flatten_pixels(model: PolyMlpModel, pixels) -> np.ndarray:
    x = np.asarray(pixels, dtype=np.float64)
    if x.ndim == 3:
        x = x.reshape(len(x), -1)
    elif x.ndim == 2 and x.shape[1] != model.input_width and x.size and \
            x.shape[0] * x.shape[1] == model.input_width:
        x = x.reshape(1, -1)
    if x.shape[-1] != model.input_width:
        raise ConfigurationError(
            f"expected {model.input_width} pixels per image, got {x.shape[-1]}"
        )
    return x


def _layer_forward(model: PolyMlpModel, layer: int, x: np.ndarray,
                   passthrough: bool, want_cache: bool, bn: dict | None = None):
    """One layer.  ``bn`` switches the per-sub-neuron affine to batch-stat
    normalization with the given trainable gamma/bias (training mode);
    otherwise the model's folded scale/offset apply (inference mode)."""
    cfg = model.config
    final = layer == model.n_layers - 1
    in_levels = (1 << cfg.activation_bits) - 1
    sub_levels = (1 << (cfg.activation_bits + 1)) - 1
    r = model.sub_ranges[layer]

    sel = x[:, model.connectivity[layer]]  # (B, n, A, F)
    mono = expand_monomials(sel, cfg.poly_degree)  # (B, n, A, M)
    p = np.einsum("bnam,nam->bna", mono, model.coeffs[layer])

    bn_cache = None
    if bn is not None:
        mu = p.mean(axis=0)
        var = p.var(axis=0)
        inv = 1.0 / np.sqrt(var + _BN_EPS)
        xhat = (p - mu) * inv
        z = bn["gamma"][layer] * xhat + bn["bias"][layer]
        bn_cache = {"xhat": xhat, "inv": inv, "mu": mu, "var": var}
    else:
        z = p * model.bn_scale[layer] + model.bn_offset[layer]

    if passthrough:
        q = z
        codes = None
        sub_mask = None
    else:
        codes, q = _sub_quantize(z, r, sub_levels)
        sub_mask = (z >= -r) & (z <= r)

    s = q.sum(axis=2)  # (B, n)
    if final:
        if codes is None:
            out = s
        else:
            # Sum in code space (exact integers) with a single terminal
            # affine, so tied logits are bit-equal and argmax tie-breaking
            # matches the table network's exact-sum adder.
            out = -cfg.subneurons * r + codes.sum(axis=2) * (2.0 * r / sub_levels)
        act_mask = None
    else:
        act = np.clip(s, 0.0, 1.0)
        act_mask = (s >= 0.0) & (s <= 1.0)
        out = act if passthrough else np.rint(act * in_levels) / in_levels

    cache = None
    if want_cache:
        cache = {"sel": sel, "mono": mono, "sub_mask": sub_mask,
                 "act_mask": act_mask, "final": final, "bn": bn_cache}
    return out, cache


def _forward_all(model: PolyMlpModel, x0: np.ndarray, passthrough: bool,
                 want_cache: bool):
    caches = []
    x = x0
    for layer in range(model.n_layers):
        x, cache = _layer_forward(model, layer, x, passthrough, want_cache)
        caches.append(cache)
    return x, caches


def forward(model: PolyMlpModel, pixels, passthrough: bool = False) -> np.ndarray:
    """Logits for a batch of images (pixels are quantized internally)."""
    flat = _flatten_pixels(model, pixels)
    x0 = model.input_quantizer.decode(model.input_quantizer.encode(flat))
    outs = []
    for lo in range(0, len(x0), _EVAL_CHUNK):
        chunk = x0[lo : lo + _EVAL_CHUNK]
        logits, _ = _forward_all(model, chunk, passthrough, want_cache=False)
        outs.append(logits)
    return np.concatenate(outs, axis=0)


def predict(model: PolyMlpModel, pixels) -> np.ndarray:
    """Argmax class per image (restricted to the first n_classes logits)."""
    logits = forward(model, pixels)
    return np.argmax(logits[:, : model.config.n_classes], axis=1).astype(np.uint8)


def _scatter_matrices(model: PolyMlpModel) -> list:
    """CSR matrices routing per-selection gradients back to the source layer."""
    mats = []
    prev = model.input_width
    for conn in model.connectivity:
        flat = conn.reshape(-1).astype(np.int64)
        rows = np.arange(flat.size)
        mats.append(
            sparse.csr_matrix(
                (np.ones(flat.size), (rows, flat)), shape=(flat.size, prev)
            )
        )
        prev = conn.shape[0]
    return mats


def _poly_input_grad(model: PolyMlpModel, layer: int, dp: np.ndarray,
                     mono: np.ndarray) -> np.ndarray:
    """Gradient of the polynomial w.r.t. its selected inputs."""
    cfg = model.config
    combos = _exponent_combos(cfg.fan_in, cfg.poly_degree)
    index = {combo: i for i, combo in enumerate(combos)}
    exps = monomial_exponents(cfg.fan_in, cfg.poly_degree)
    dsel = np.zeros(dp.shape + (cfg.fan_in,), dtype=np.float64)
    w = model.coeffs[layer]
    for m, combo in enumerate(combos):
        for f in range(cfg.fan_in):
            e = exps[m, f]
            if e == 0:
                continue
            reduced = list(combo)
            reduced.remove(f)
            red_idx = index[tuple(reduced)]
            # d(mono_m)/d(x_f) = e * mono_reduced
            dsel[..., f] += dp * w[None, :, :, m] * (e * mono[..., red_idx])
    return dsel


def loss_and_grads(model: PolyMlpModel, pixels, labels,
                   passthrough: bool = False,
                   scatters: list | None = None,
                   bn_state: dict | None = None):
    """Mean cross-entropy and coefficient gradients (straight-through).

    With ``bn_state`` (dict of per-layer ``gamma``/``bias`` arrays) the
    sub-neuron affine runs in batch-statistics mode and the return value
    grows to ``(loss, grads, bn_grads, batch_stats)`` where ``bn_grads``
    mirrors ``bn_state`` and ``batch_stats`` lists per-layer mean/variance
    for running-average updates.  Without it the model's folded scale/offset
    act as fixed constants and the return is ``(loss, grads)``.
    """
    flat = _flatten_pixels(model, pixels)
    labels = np.asarray(labels, dtype=np.int64)
    x0 = model.input_quantizer.decode(model.input_quantizer.encode(flat))

    xs = [x0]
    caches = []
    x = x0
    for layer in range(model.n_layers):
        x, cache = _layer_forward(
            model, layer, x, passthrough, want_cache=True, bn=bn_state
        )
        caches.append(cache)
        xs.append(x)
    logits = xs[-1]

    shifted = logits - logits.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    probs = expv / expv.sum(axis=1, keepdims=True)
    batch = len(labels)
    loss = float(-np.mean(np.log(probs[np.arange(batch), labels] + 1e-300)))

    if scatters is None:
        scatters = _scatter_matrices(model)

    donehot = probs.copy()
    donehot[np.arange(batch), labels] -= 1.0
    dout = donehot / batch

    grads = [None] * model.n_layers
    bn_grads = None
    if bn_state is not None:
        bn_grads = {
            "gamma": [None] * model.n_layers,
            "bias": [None] * model.n_layers,
        }
    for layer in range(model.n_layers - 1, -1, -1):
        cache = caches[layer]
        if cache["final"]:
            ds = dout
        else:
            ds = dout * cache["act_mask"]
        dq = np.broadcast_to(ds[:, :, None], cache["mono"].shape[:3])
        if passthrough or cache["sub_mask"] is None:
            dz = np.array(dq, dtype=np.float64)
        else:
            dz = dq * cache["sub_mask"]
        bnc = cache["bn"]
        if bnc is not None:
            xhat = bnc["xhat"]
            bn_grads["gamma"][layer] = np.sum(dz * xhat, axis=0)
            bn_grads["bias"][layer] = np.sum(dz, axis=0)
            dxhat = dz * bn_state["gamma"][layer]
            dp = bnc["inv"] * (
                dxhat
                - dxhat.mean(axis=0)
                - xhat * (dxhat * xhat).mean(axis=0)
            )
        else:
            dp = dz * model.bn_scale[layer]
        grads[layer] = np.einsum("bna,bnam->nam", dp, cache["mono"])
        if layer > 0:
            dsel = _poly_input_grad(model, layer, dp, cache["mono"])
            flat_dsel = dsel.reshape(len(dsel), -1)
            dout = (scatters[layer].T @ flat_dsel.T).T
    if bn_state is None:
        return loss, grads
    batch_stats = [
        {"mu": caches[layer]["bn"]["mu"], "var": caches[layer]["bn"]["var"]}
        for layer in range(model.n_layers)
    ]
    return loss, grads, bn_grads, batch_stats


def train(cfg: PolyMlpConfig, data, labels=None, return_history: bool = False):
    """Train on (pixels, labels) arrays or directly on a Dataset's train split."""
    if isinstance(data, Dataset):
        pixels, labels = data.train_pixels, data.train_labels
    else:
        pixels = data
    pixels = np.asarray(pixels, dtype=np.float64)
    if pixels.ndim == 3:
        pixels = pixels.reshape(len(pixels), -1)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.max() >= cfg.n_classes:
        raise ConfigurationError(
            f"label {labels.max()} out of range for {cfg.n_classes} classes"
        )

    model = initialize_model(cfg, input_width=pixels.shape[1])
    model.input_quantizer = calibrate_input_quantizer(
        pixels, cfg.activation_bits, cfg.input_calibration
    )
    scatters = _scatter_matrices(model)

    bn_state = {
        "gamma": [np.ones((w, cfg.subneurons)) for w in cfg.all_widths],
        "bias": [np.zeros((w, cfg.subneurons)) for w in cfg.all_widths],
    }
    run_mu = [np.zeros((w, cfg.subneurons)) for w in cfg.all_widths]
    run_var = [np.ones((w, cfg.subneurons)) for w in cfg.all_widths]

    beta1, beta2, eps = 0.9, 0.999, 1e-8
    # Parameter groups: (array, AdamW moments, weight-decay flag).  Decay
    # applies to polynomial coefficients only, never to normalization params.
    groups = []
    for layer in range(model.n_layers):
        groups.append((model.coeffs[layer], True))
        groups.append((bn_state["gamma"][layer], False))
        groups.append((bn_state["bias"][layer], False))
    m_state = [np.zeros_like(p) for p, _ in groups]
    v_state = [np.zeros_like(p) for p, _ in groups]
    step = 0

    rng = _rng(cfg.seed, _STREAM_TRAIN)
    history = []
    n = len(labels)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads, bn_grads, stats = loss_and_grads(
                    model, pixels[idx], labels[idx],
                    scatters=scatters, bn_state=bn_state,
                )
            if not np.isfinite(loss) or not all(
                np.all(np.isfinite(c)) for c in model.coeffs
            ):
                raise TrainingError(f"training diverged at epoch {epoch}", epoch=epoch)
            step += 1
            bc1 = 1.0 - beta1**step
            bc2 = 1.0 - beta2**step
            flat_grads = []
            for layer in range(model.n_layers):
                flat_grads.append(grads[layer])
                flat_grads.append(bn_grads["gamma"][layer])
                flat_grads.append(bn_grads["bias"][layer])
            with np.errstate(over="ignore", invalid="ignore"):
                for gi, ((param, decay), g) in enumerate(zip(groups, flat_grads)):
                    m_state[gi] = beta1 * m_state[gi] + (1 - beta1) * g
                    v_state[gi] = beta2 * v_state[gi] + (1 - beta2) * g * g
                    update = (m_state[gi] / bc1) / (np.sqrt(v_state[gi] / bc2) + eps)
                    if decay:
                        update = update + cfg.weight_decay * param
                    param -= cfg.learning_rate * update
                for layer in range(model.n_layers):
                    run_mu[layer] += _BN_MOMENTUM * (stats[layer]["mu"] - run_mu[layer])
                    run_var[layer] += _BN_MOMENTUM * (stats[layer]["var"] - run_var[layer])
            epoch_loss += loss
            n_batches += 1
        history.append(epoch_loss / max(n_batches, 1))
    for layer in range(model.n_layers):
        scale = bn_state["gamma"][layer] / np.sqrt(run_var[layer] + _BN_EPS)
        model.bn_scale[layer] = scale
        model.bn_offset[layer] = bn_state["bias"][layer] - run_mu[layer] * scale
    model.final_loss = history[-1] if history else float("nan")
    return (model, history) if return_history else model


# ---------------------------------------------------------------------------
# truth-table compilation


@dataclass
class LutLayer:
    connectivity: np.ndarray  # (n, A, F) int32
    sub_tables: np.ndarray  # (n, A, 2^(beta F)) uint8, beta+1-bit codes
    adder_tables: np.ndarray  # (n, 2^(A(beta+1))) uint8
    is_final: bool
    sub_range: float


@dataclass
class LutNetwork:
    """Pure table-lookup form of a PolyMlpModel."""

    input_width: int
    beta: int
    fan_in: int
    subneurons: int
    poly_degree: int
    n_classes: int
    head_width: int
    input_quantizer: InputQuantizer
    layers: list = field(default_factory=list)

    @property
    def entries_per_neuron(self) -> int:
        a, beta, f = self.subneurons, self.beta, self.fan_in
        return a * (1 << (beta * f)) + (1 << (a * (beta + 1)))

    @property
    def lookups_per_image(self) -> int:
        return sum(l.sub_tables.shape[0] * (self.subneurons + 1) for l in self.layers)

    @property
    def total_entries(self) -> int:
        return sum(l.sub_tables.size + l.adder_tables.size for l in self.layers)


def _code_grid(n_symbols: int, length: int) -> np.ndarray:
    """All length-tuples over {0..n_symbols-1}, first position most significant."""
    n = n_symbols**length
    idx = np.arange(n)
    grid = np.empty((n, length), dtype=np.int64)
    for k in range(length):
        grid[:, k] = (idx // n_symbols ** (length - 1 - k)) % n_symbols
    return grid


def _pack_codes(codes: np.ndarray, n_symbols: int) -> np.ndarray:
    """Inverse of _code_grid along the last axis."""
    length = codes.shape[-1]
    radix = n_symbols ** np.arange(length - 1, -1, -1, dtype=np.int64)
    return np.asarray(codes, dtype=np.int64) @ radix


def _layer_tables(model: PolyMlpModel, layer: int):
    """Reference-arithmetic truth tables for one layer (sub and adder)."""
    cfg = model.config
    beta = cfg.activation_bits
    in_levels = (1 << beta) - 1
    sub_levels = (1 << (beta + 1)) - 1
    r = model.sub_ranges[layer]
    final = layer == model.n_layers - 1

    grid = _code_grid(1 << beta, cfg.fan_in)  # (2^(beta F), F)
    values = grid / in_levels
    mono = expand_monomials(values, cfg.poly_degree)  # (codes, M)
    p = np.einsum("cm,nam->nac", mono, model.coeffs[layer])
    p = p * model.bn_scale[layer][:, :, None] + model.bn_offset[layer][:, :, None]
    sub_codes, _ = _sub_quantize(p, r, sub_levels)
    sub_tables = sub_codes.astype(np.uint8)

    adder_grid = _code_grid(1 << (beta + 1), cfg.subneurons)  # (2^(A(beta+1)), A)
    summed_values = (-r + adder_grid * (2.0 * r / sub_levels)).sum(axis=1)
    if final:
        adder_row = adder_grid.sum(axis=1).astype(np.uint8)  # exact sum codes
    else:
        act = np.clip(summed_values, 0.0, 1.0)
        adder_row = np.rint(act * in_levels).astype(np.uint8)
    width = model.coeffs[layer].shape[0]
    adder_tables = np.tile(adder_row, (width, 1))
    return sub_tables, adder_tables


def compile_truth_tables(model: PolyMlpModel) -> LutNetwork:
    """Enumerate every sub-neuron and adder table through the exact arithmetic."""
    cfg = model.config
    net = LutNetwork(
        input_width=model.input_width,
        beta=cfg.activation_bits,
        fan_in=cfg.fan_in,
        subneurons=cfg.subneurons,
        poly_degree=cfg.poly_degree,
        n_classes=cfg.n_classes,
        head_width=cfg.head_width or cfg.n_classes,
        input_quantizer=model.input_quantizer,
    )
    for layer in range(model.n_layers):
        sub_tables, adder_tables = _layer_tables(model, layer)
        net.layers.append(
            LutLayer(
                connectivity=model.connectivity[layer].copy(),
                sub_tables=sub_tables,
                adder_tables=adder_tables,
                is_final=layer == model.n_layers - 1,
                sub_range=float(model.sub_ranges[layer]),
            )
        )
    return net


def eval_lut_logits(net: LutNetwork, pixels, input_codes=None) -> np.ndarray:
    """Final-layer sum codes per image via pure table lookups and wiring.

    The returned integers relate to the reference logits by the affine map
    logit = -A*r + code * 2r/(2^(beta+1)-1), which preserves argmax order.
    """
    if input_codes is None:
        x = np.asarray(pixels, dtype=np.float64)
        if x.ndim == 3:
            x = x.reshape(len(x), -1)
        codes = net.input_quantizer.encode(x)
    else:
        codes = np.asarray(input_codes, dtype=np.int64)

    outs = []
    n_in_symbols = 1 << net.beta
    n_sub_symbols = 1 << (net.beta + 1)
    for lo in range(0, len(codes), _EVAL_CHUNK):
        c = codes[lo : lo + _EVAL_CHUNK]
        for layer in net.layers:
            n, A, _ = layer.connectivity.shape
            sel = c[:, layer.connectivity]  # (B, n, A, F)
            idx = _pack_codes(sel, n_in_symbols)  # (B, n, A)
            sub = layer.sub_tables[
                np.arange(n)[:, None], np.arange(A)[None, :], idx
            ].astype(np.int64)
            adder_idx = _pack_codes(sub, n_sub_symbols)  # (B, n)
            c = layer.adder_tables[np.arange(n)[None, :], adder_idx].astype(np.int64)
        outs.append(c)
    return np.concatenate(outs, axis=0)


def eval_lut(net: LutNetwork, pixels, input_codes=None) -> np.ndarray:
    """Argmax class per image from the table network."""
    sums = eval_lut_logits(net, pixels, input_codes=input_codes)
    return np.argmax(sums[:, : net.n_classes], axis=1).astype(np.uint8)


@dataclass
class EquivalenceReport:
    ok: bool
    mismatches: list
    n_codes_checked: int
    argmax_checked: int = 0
    argmax_agreed: int = 0

    def summary(self) -> str:
        if self.ok:
            extra = (
                f", end-to-end argmax {self.argmax_agreed}/{self.argmax_checked}"
                if self.argmax_checked else ""
            )
            return f"equivalent: {self.n_codes_checked} table entries verified{extra}"
        if self.mismatches:
            kind, layer, *rest = self.mismatches[0]
            return (
                f"MISMATCH: first at {kind} table, layer {layer}, "
                f"coordinates {tuple(rest)} ({len(self.mismatches)} total)"
            )
        return (
            f"MISMATCH: tables equivalent but end-to-end argmax agreed on "
            f"only {self.argmax_agreed}/{self.argmax_checked} samples"
        )


def verify_equivalence(model: PolyMlpModel, net: LutNetwork,
                       n_samples: int = 0,
                       sample_rng: np.random.Generator | None = None,
                       raise_on_mismatch: bool = False) -> EquivalenceReport:
    """Exhaustively compare every table entry against the reference arithmetic.

    Optionally also runs ``n_samples`` random full images end to end and
    counts argmax agreement between ``forward`` and ``eval_lut``.
    """
    mismatches = []
    n_checked = 0
    for layer in range(model.n_layers):
        ref_sub, ref_adder = _layer_tables(model, layer)
        got = net.layers[layer]
        n_checked += ref_sub.size + ref_adder.size
        for n, a, code in zip(*np.nonzero(got.sub_tables != ref_sub)):
            mismatches.append(("sub", layer, int(n), int(a), int(code)))
        for n, code in zip(*np.nonzero(got.adder_tables != ref_adder)):
            mismatches.append(("adder", layer, int(n), int(code)))

    argmax_checked = argmax_agreed = 0
    if n_samples > 0:
        rng = sample_rng if sample_rng is not None else _rng(0, 0xE0)
        q = net.input_quantizer
        pix = rng.uniform(q.lo, q.hi, size=(n_samples, model.input_width))
        ref = predict(model, pix)
        got_pred = eval_lut(net, pix)
        argmax_checked = n_samples
        argmax_agreed = int(np.sum(ref == got_pred))

    ok = not mismatches and argmax_agreed == argmax_checked
    report = EquivalenceReport(
        ok=ok,
        mismatches=mismatches,
        n_codes_checked=n_checked,
        argmax_checked=argmax_checked,
        argmax_agreed=argmax_agreed,
    )
    if raise_on_mismatch and not ok:
        first = mismatches[0] if mismatches else ("argmax",)
        raise EquivalenceError(report.summary(), coordinates=first)
    return report


# ---------------------------------------------------------------------------
# persistence

_CAL_MODES = {"minmax": 0, "quantile": 1}
_CAL_NAMES = {v: k for k, v in _CAL_MODES.items()}


def save_mlp_model(model: PolyMlpModel, path) -> None:
    cfg = model.config
    w = binio.Writer()
    w.raw(binio.MAGIC_QMLP)
    w.pack("H", QMLP_VERSION)
    w.pack("H", model.input_width)
    w.pack("B", model.n_layers)
    w.pack("B", cfg.fan_in)
    w.pack("B", cfg.activation_bits)
    w.pack("B", cfg.poly_degree)
    w.pack("B", cfg.subneurons)
    w.pack("H", cfg.n_classes)
    w.pack("H", cfg.head_width or 0)
    w.pack("Q", cfg.seed & (2**64 - 1))
    w.pack("d", cfg.learning_rate)
    w.pack("I", cfg.epochs)
    w.pack("I", cfg.batch_size)
    w.pack("d", cfg.weight_decay)
    cal = cfg.input_calibration
    w.pack("B", _CAL_MODES[cal[0]])
    w.pack("dd", *(cal[1:3] if cal[0] == "quantile" else (0.0, 1.0)))
    w.pack("dd", model.input_quantizer.lo, model.input_quantizer.hi)
    w.pack("d", model.final_loss)
    for layer in range(model.n_layers):
        width = model.coeffs[layer].shape[0]
        w.pack("H", width)
        w.pack("d", model.sub_ranges[layer])
        w.array(model.connectivity[layer], np.int32)
        w.array(model.coeffs[layer], np.float64)
        w.array(model.bn_scale[layer], np.float64)
        w.array(model.bn_offset[layer], np.float64)
    binio.write_file(path, w.getvalue())


def load_mlp_model(path) -> PolyMlpModel:
    with binio.open_reader(path, binio.MAGIC_QMLP, QMLP_VERSION) as r:
        input_width = r.unpack("H")
        n_layers = r.unpack("B")
        fan_in = r.unpack("B")
        beta = r.unpack("B")
        degree = r.unpack("B")
        subneurons = r.unpack("B")
        n_classes = r.unpack("H")
        head_width = r.unpack("H") or None
        seed = r.unpack("Q")
        lr = r.unpack("d")
        epochs = r.unpack("I")
        batch = r.unpack("I")
        wd = r.unpack("d")
        cal_mode = _CAL_NAMES[r.unpack("B")]
        cal_lo, cal_hi = r.unpack("dd")
        q_lo, q_hi = r.unpack("dd")
        final_loss = r.unpack("d")
        widths, sub_ranges, conn, coeffs = [], [], [], []
        bn_scale, bn_offset = [], []
        n_mono = math.comb(fan_in + degree, degree)
        for _ in range(n_layers):
            width = r.unpack("H")
            widths.append(width)
            sub_ranges.append(r.unpack("d"))
            conn.append(
                r.array(np.int32, width * subneurons * fan_in).reshape(
                    width, subneurons, fan_in
                )
            )
            coeffs.append(
                r.array(np.float64, width * subneurons * n_mono).reshape(
                    width, subneurons, n_mono
                )
            )
            bn_scale.append(
                r.array(np.float64, width * subneurons).reshape(width, subneurons)
            )
            bn_offset.append(
                r.array(np.float64, width * subneurons).reshape(width, subneurons)
            )
    calibration = ("minmax",) if cal_mode == "minmax" else ("quantile", cal_lo, cal_hi)
    cfg = PolyMlpConfig(
        hidden_widths=tuple(widths[:-1]),
        n_classes=n_classes,
        fan_in=fan_in,
        activation_bits=beta,
        poly_degree=degree,
        subneurons=subneurons,
        seed=seed,
        learning_rate=lr,
        epochs=epochs,
        batch_size=batch,
        weight_decay=wd,
        head_width=head_width,
        input_calibration=calibration,
        sub_range_hidden=sub_ranges[0] if n_layers > 1 else 1.0,
        sub_range_final=sub_ranges[-1],
    )
    return PolyMlpModel(
        config=cfg,
        input_width=input_width,
        connectivity=tuple(conn),
        coeffs=coeffs,
        bn_scale=bn_scale,
        bn_offset=bn_offset,
        sub_ranges=tuple(sub_ranges),
        input_quantizer=InputQuantizer(lo=q_lo, hi=q_hi, bits=beta),
        final_loss=final_loss,
    )


def save_lut_network(net: LutNetwork, path) -> None:
    w = binio.Writer()
    w.raw(binio.MAGIC_QLUT)
    w.pack("H", QLUT_VERSION)
    w.pack("H", net.input_width)
    w.pack("B", len(net.layers))
    w.pack("B", net.fan_in)
    w.pack("B", net.beta)
    w.pack("B", net.subneurons)
    w.pack("B", net.poly_degree)
    w.pack("H", net.n_classes)
    w.pack("H", net.head_width)
    w.pack("dd", net.input_quantizer.lo, net.input_quantizer.hi)
    for layer in net.layers:
        w.pack("H", layer.sub_tables.shape[0])
        w.pack("B", int(layer.is_final))
        w.pack("d", layer.sub_range)
        w.array(layer.connectivity, np.int32)
        w.array(layer.sub_tables, np.uint8)
        w.array(layer.adder_tables, np.uint8)
    binio.write_file(path, w.getvalue())


def load_lut_network(path) -> LutNetwork:
    with binio.open_reader(path, binio.MAGIC_QLUT, QLUT_VERSION) as r:
        input_width = r.unpack("H")
        n_layers = r.unpack("B")
        fan_in = r.unpack("B")
        beta = r.unpack("B")
        subneurons = r.unpack("B")
        degree = r.unpack("B")
        n_classes = r.unpack("H")
        head_width = r.unpack("H")
        q_lo, q_hi = r.unpack("dd")
        net = LutNetwork(
            input_width=input_width,
            beta=beta,
            fan_in=fan_in,
            subneurons=subneurons,
            poly_degree=degree,
            n_classes=n_classes,
            head_width=head_width,
            input_quantizer=InputQuantizer(lo=q_lo, hi=q_hi, bits=beta),
        )
        n_sub_codes = 1 << (beta * fan_in)
        n_adder_codes = 1 << (subneurons * (beta + 1))
        for _ in range(n_layers):
            width = r.unpack("H")
            is_final = bool(r.unpack("B"))
            sub_range = r.unpack("d")
            conn = r.array(np.int32, width * subneurons * fan_in).reshape(
                width, subneurons, fan_in
            )
            sub_tables = r.array(np.uint8, width * subneurons * n_sub_codes).reshape(
                width, subneurons, n_sub_codes
            )
            adder = r.array(np.uint8, width * n_adder_codes).reshape(
                width, n_adder_codes
            )
            net.layers.append(
                LutLayer(
                    connectivity=conn,
                    sub_tables=sub_tables,
                    adder_tables=adder,
                    is_final=is_final,
                    sub_range=sub_range,
                )
            )
    return net


def lut_netlist(net: LutNetwork) -> str:
    """Human-readable dump: one block per table with its input wiring."""
    lines = [
        "qdetect-lut-netlist v1",
        f"inputs {net.input_width} beta {net.beta} fan_in {net.fan_in} "
        f"subneurons {net.subneurons} classes {net.n_classes}",
    ]
    for li, layer in enumerate(net.layers):
        n, A, _ = layer.connectivity.shape
        kind = "logit-sum" if layer.is_final else "activation"
        lines.append(
            f"layer {li} neurons {n} adder {kind} sub_range {layer.sub_range!r}"
        )
        for ni in range(n):
            for ai in range(A):
                wires = " ".join(str(v) for v in layer.connectivity[ni, ai])
                table = layer.sub_tables[ni, ai].tobytes().hex()
                lines.append(f"  neuron {ni} sub {ai} inputs {wires} table {table}")
            lines.append(
                f"  neuron {ni} adder table {layer.adder_tables[ni].tobytes().hex()}"
            )
    return "\n".join(lines) + "\n"
