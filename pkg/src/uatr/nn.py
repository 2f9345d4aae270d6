"""Transformer encoder and classifier head with exact reverse-mode gradients.

Pre-norm self-attention blocks with GELU feed-forward sublayers, sinusoidal
positions computed by formula (so any sequence length works), mean pooling
over time, and a single linear+softmax head.  Forward passes record a tape
of intermediates; ``model_backward`` replays it to produce a gradient store
congruent with the parameter store.

Everything operates on batches shaped (B, T, dim).  The single-example
entry points wrap B=1.  Arithmetic runs in the parameter dtype: float32 in
production, float64 for the finite-difference gradient checks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from scipy.special import erf

from .dsp import FeatureSequence
from .errors import ConfigError, EmptyEvaluationError, ShapeError, StaleTapeError

LN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    input_dim: int
    model_dim: int = 128
    layers: int = 4
    heads: int = 4
    ffn_dim: int = 512
    dropout_rate: float = 0.1
    max_positions: int = 2048
    num_categories: int = 4

    def __post_init__(self):
        if min(self.input_dim, self.model_dim, self.heads, self.ffn_dim,
               self.max_positions, self.num_categories) < 1 or self.layers < 0:
            raise ConfigError("all encoder dimensions must be >= 1")
        if self.model_dim % self.heads:
            raise ConfigError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: dict) -> "EncoderConfig":
        return cls(**payload)


class ParamStore:
    """Named tensor collection; also used for gradients (GradStore)."""

    def __init__(self, tensors: dict[str, np.ndarray]):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.tensors[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ParamStore":
        return ParamStore({k: v.astype(dtype) for k, v in self.tensors.items()})

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def check_congruent(self, other: "ParamStore") -> None:
        if self.names() != other.names():
            raise ShapeError("tensor stores hold different names")
        for name in self.tensors:
            if self.tensors[name].shape != other.tensors[name].shape:
                raise ShapeError(f"shape mismatch for tensor {name!r}")


GradStore = ParamStore


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes, in checkpoint order."""
    d, dd, ffn, c = config.model_dim, config.input_dim, config.ffn_dim, config.num_categories
    shapes: dict[str, tuple[int, ...]] = {
        "input_proj.weight": (d, dd),
        "input_proj.bias": (d,),
    }
    for i in range(config.layers):
        p = f"layer{i}"
        shapes[f"{p}.norm1.gain"] = (d,)
        shapes[f"{p}.norm1.bias"] = (d,)
        shapes[f"{p}.attn.q.weight"] = (d, d)
        shapes[f"{p}.attn.k.weight"] = (d, d)
        shapes[f"{p}.attn.v.weight"] = (d, d)
        shapes[f"{p}.attn.out.weight"] = (d, d)
        shapes[f"{p}.norm2.gain"] = (d,)
        shapes[f"{p}.norm2.bias"] = (d,)
        shapes[f"{p}.ffn.w1.weight"] = (ffn, d)
        shapes[f"{p}.ffn.w1.bias"] = (ffn,)
        shapes[f"{p}.ffn.w2.weight"] = (d, ffn)
        shapes[f"{p}.ffn.w2.bias"] = (d,)
    shapes["final_norm.gain"] = (d,)
    shapes["final_norm.bias"] = (d,)
    shapes["head.weight"] = (c, d)
    shapes["head.bias"] = (c,)
    return shapes


def init_params(config: EncoderConfig, seed: int) -> ParamStore:
    """Glorot-uniform weights, zero biases, unit layer-norm gains.

    The head weight starts at zero so an untrained model emits the uniform
    distribution (first-batch loss exactly ln C).
    """
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            t = np.ones(shape, dtype=np.float64)
        elif name.endswith(".bias") or name == "head.weight":
            t = np.zeros(shape, dtype=np.float64)
        else:
            fan_out, fan_in = shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            t = rng.uniform(-limit, limit, size=shape)
        tensors[name] = t.astype(np.float32)
    return ParamStore(tensors)


@lru_cache(maxsize=8)
def _positional_table(t: int, d: int, dtype_name: str) -> np.ndarray:
    pos = np.arange(t, dtype=np.float64)[:, None]
    i = np.arange(d // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / d)
    table = np.empty((t, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : (d - d // 2)])
    out = table.astype(dtype_name)
    out.setflags(write=False)
    return out


def sinusoidal_positions(t: int, d: int, dtype=np.float32) -> np.ndarray:
    return _positional_table(t, d, np.dtype(dtype).name)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along an axis."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray,
               eps: float = LN_EPS):
    """Standardize over the last axis; returns (y, cache for backward)."""
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (x - mean) * inv_std
    return xhat * gain + bias, (xhat, inv_std)


def _layer_norm_backward(dy, cache, gain):
    xhat, inv_std = cache
    dgain = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dbias = np.sum(dy, axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gain
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgain, dbias


def gelu(x: np.ndarray):
    """Exact GELU x * Phi(x); returns (y, Phi(x)) for reuse in backward."""
    cdf = 0.5 * (1.0 + erf(x / np.asarray(math.sqrt(2.0), dtype=x.dtype)))
    cdf = cdf.astype(x.dtype, copy=False)
    return x * cdf, cdf


def _gelu_backward(dy, x, cdf):
    pdf = np.exp(-0.5 * x * x) * np.asarray(1.0 / math.sqrt(2.0 * math.pi),
                                            dtype=x.dtype)
    return dy * (cdf + x * pdf)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dh)


def multi_head_attention(x: np.ndarray, wq, wk, wv, wo, heads: int):
    """Full (unmasked) self-attention over (B, T, d); returns (y, cache)."""
    q = _split_heads(x @ wq.T, heads)
    k = _split_heads(x @ wk.T, heads)
    v = _split_heads(x @ wv.T, heads)
    scale = np.asarray(1.0 / math.sqrt(q.shape[-1]), dtype=x.dtype)
    scores = (q @ k.swapaxes(-1, -2)) * scale
    attn = softmax(scores, axis=-1)
    ctx = _merge_heads(attn @ v)
    y = ctx @ wo.T
    return y, (x, q, k, v, attn, ctx, scale)


def _attention_backward(dy, cache, wq, wk, wv, wo, heads: int):
    x, q, k, v, attn, ctx, scale = cache
    d = x.shape[-1]
    dwo = dy.reshape(-1, d).T @ ctx.reshape(-1, d)
    dctx = _split_heads(dy @ wo, heads)
    dattn = dctx @ v.swapaxes(-1, -2)
    dv = attn.swapaxes(-1, -2) @ dctx
    dscores = (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * attn
    dscores *= scale
    dq = dscores @ k
    dk = dscores.swapaxes(-1, -2) @ q
    dq_m, dk_m, dv_m = (_merge_heads(a) for a in (dq, dk, dv))
    flat_x = x.reshape(-1, d)
    dwq = dq_m.reshape(-1, d).T @ flat_x
    dwk = dk_m.reshape(-1, d).T @ flat_x
    dwv = dv_m.reshape(-1, d).T @ flat_x
    dx = dq_m @ wq + dk_m @ wk + dv_m @ wv
    return dx, dwq, dwk, dwv, dwo


def mean_pool(h: np.ndarray) -> np.ndarray:
    """Mean over the time axis of (T, d) or (B, T, d)."""
    if h.shape[-2] == 0:
        raise EmptyEvaluationError("cannot mean-pool an empty sequence")
    return h.mean(axis=-2)


def classify(pooled: np.ndarray, params: ParamStore) -> np.ndarray:
    """softmax(W pooled + b) for a (d,) or (B, d) input."""
    return softmax(pooled @ params["head.weight"].T + params["head.bias"])


def _dropout_mask(rng, shape, rate, dtype):
    keep = (rng.random(shape) >= rate)
    return keep.astype(dtype) / np.asarray(1.0 - rate, dtype=dtype)


def dropout(x: np.ndarray, rate: float, rng=None):
    """Inverted dropout; returns (y, mask). rng=None means eval mode."""
    if rng is None or rate <= 0.0:
        return x, None
    mask = _dropout_mask(rng, x.shape, rate, x.dtype)
    return x * mask, mask


class Tape:
    """Intermediates recorded by a train-mode (or eval-mode) forward pass."""

    def __init__(self, params, config, x, pos_out, layer_caches, final_cache,
                 hidden, pooled, probs):
        self.params = params
        self.config = config
        self.x = x
        self.pos_out = pos_out
        self.layer_caches = layer_caches
        self.final_cache = final_cache
        self.hidden = hidden
        self.pooled = pooled
        self.probs = probs
        self.consumed = False


def batch_forward(x: np.ndarray, params: ParamStore, config: EncoderConfig,
                  mode: str = "eval", seed: int = 0):
    """Forward over a (B, T, input_dim) batch; returns (probs (B, C), tape)."""
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim != 3 or x.shape[2] != config.input_dim:
        raise ShapeError(
            f"expected (B, T, {config.input_dim}) input, got {x.shape}")
    if x.shape[1] < 1:
        raise ShapeError("sequence length must be >= 1")
    dtype = params.dtype
    x = x.astype(dtype, copy=False)
    b, t, _ = x.shape
    rng = (np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
           if mode == "train" and config.dropout_rate > 0 else None)

    h = x @ params["input_proj.weight"].T + params["input_proj.bias"]
    h = h + sinusoidal_positions(t, config.model_dim, dtype)[None]
    pos_out = h

    layer_caches = []
    for i in range(config.layers):
        p = f"layer{i}"
        n1, ln1_cache = layer_norm(h, params[f"{p}.norm1.gain"],
                                   params[f"{p}.norm1.bias"])
        attn_out, attn_cache = multi_head_attention(
            n1, params[f"{p}.attn.q.weight"], params[f"{p}.attn.k.weight"],
            params[f"{p}.attn.v.weight"], params[f"{p}.attn.out.weight"],
            config.heads)
        attn_drop, attn_mask = dropout(attn_out, config.dropout_rate, rng)
        h_mid = h + attn_drop

        n2, ln2_cache = layer_norm(h_mid, params[f"{p}.norm2.gain"],
                                   params[f"{p}.norm2.bias"])
        pre_act = n2 @ params[f"{p}.ffn.w1.weight"].T + params[f"{p}.ffn.w1.bias"]
        act, act_cdf = gelu(pre_act)
        ffn_out = act @ params[f"{p}.ffn.w2.weight"].T + params[f"{p}.ffn.w2.bias"]
        ffn_drop, ffn_mask = dropout(ffn_out, config.dropout_rate, rng)
        h_next = h_mid + ffn_drop

        layer_caches.append({
            "h_in": h, "n1": n1, "ln1": ln1_cache, "attn": attn_cache,
            "attn_mask": attn_mask, "h_mid": h_mid, "n2": n2,
            "ln2": ln2_cache, "pre_act": pre_act, "act": act,
            "act_cdf": act_cdf, "ffn_mask": ffn_mask,
        })
        h = h_next

    hidden, final_cache = layer_norm(h, params["final_norm.gain"],
                                     params["final_norm.bias"])
    pooled = mean_pool(hidden)
    probs = classify(pooled, params)
    tape = Tape(params, config, x, pos_out, layer_caches, final_cache,
                hidden, pooled, probs)
    return probs, tape


def batch_backward(tape: Tape, labels: np.ndarray) -> GradStore:
    """Gradients of the mean cross-entropy over the batch, for every tensor."""
    if tape.consumed:
        raise StaleTapeError("backward tape already consumed")
    tape.consumed = True
    params, config = tape.params, tape.config
    dtype = params.dtype
    b, t, d = tape.x.shape[0], tape.x.shape[1], config.model_dim
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError(f"expected {b} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= config.num_categories:
        raise IndexError("label out of range")

    grads: dict[str, np.ndarray] = {}

    dlogits = tape.probs.astype(dtype).copy()
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= np.asarray(b, dtype=dtype)

    grads["head.weight"] = dlogits.T @ tape.pooled
    grads["head.bias"] = dlogits.sum(axis=0)
    dpooled = dlogits @ params["head.weight"]

    dhidden = np.broadcast_to(
        dpooled[:, None, :] / np.asarray(t, dtype=dtype), (b, t, d)).astype(dtype)
    dh, dg, dbi = _layer_norm_backward(dhidden, tape.final_cache,
                                       params["final_norm.gain"])
    grads["final_norm.gain"] = dg
    grads["final_norm.bias"] = dbi

    for i in reversed(range(config.layers)):
        p = f"layer{i}"
        c = tape.layer_caches[i]

        dffn_out = dh if c["ffn_mask"] is None else dh * c["ffn_mask"]
        grads[f"{p}.ffn.w2.weight"] = (
            dffn_out.reshape(-1, d).T @ c["act"].reshape(-1, config.ffn_dim))
        grads[f"{p}.ffn.w2.bias"] = dffn_out.sum(axis=(0, 1))
        dact = dffn_out @ params[f"{p}.ffn.w2.weight"]
        dpre = _gelu_backward(dact, c["pre_act"], c["act_cdf"])
        grads[f"{p}.ffn.w1.weight"] = (
            dpre.reshape(-1, config.ffn_dim).T @ c["n2"].reshape(-1, d))
        grads[f"{p}.ffn.w1.bias"] = dpre.sum(axis=(0, 1))
        dn2 = dpre @ params[f"{p}.ffn.w1.weight"]
        dmid_branch, dg2, db2 = _layer_norm_backward(
            dn2, c["ln2"], params[f"{p}.norm2.gain"])
        grads[f"{p}.norm2.gain"] = dg2
        grads[f"{p}.norm2.bias"] = db2
        dh_mid = dh + dmid_branch

        dattn_out = dh_mid if c["attn_mask"] is None else dh_mid * c["attn_mask"]
        dn1, dwq, dwk, dwv, dwo = _attention_backward(
            dattn_out, c["attn"], params[f"{p}.attn.q.weight"],
            params[f"{p}.attn.k.weight"], params[f"{p}.attn.v.weight"],
            params[f"{p}.attn.out.weight"], config.heads)
        grads[f"{p}.attn.q.weight"] = dwq
        grads[f"{p}.attn.k.weight"] = dwk
        grads[f"{p}.attn.v.weight"] = dwv
        grads[f"{p}.attn.out.weight"] = dwo
        dh_in, dg1, db1 = _layer_norm_backward(
            dn1, c["ln1"], params[f"{p}.norm1.gain"])
        grads[f"{p}.norm1.gain"] = dg1
        grads[f"{p}.norm1.bias"] = db1
        dh = dh_mid + dh_in

    grads["input_proj.weight"] = (
        dh.reshape(-1, d).T @ tape.x.reshape(-1, config.input_dim))
    grads["input_proj.bias"] = dh.sum(axis=(0, 1))

    ordered = {name: grads[name].astype(dtype, copy=False)
               for name in param_shapes(config)}
    return GradStore(ordered)


def model_forward(feat: FeatureSequence, params: ParamStore,
                  config: EncoderConfig, mode: str = "eval", seed: int = 0):
    """Single-clip forward; returns (probability vector (C,), tape)."""
    probs, tape = batch_forward(feat.frames[None], params, config, mode, seed)
    return probs[0], tape


def model_backward(tape: Tape, label: int) -> GradStore:
    """Gradients of cross-entropy at the given label for a B=1 tape."""
    return batch_backward(tape, np.asarray([label]))


def encoder_forward(feat: FeatureSequence, params: ParamStore,
                    config: EncoderConfig, mode: str = "eval", seed: int = 0):
    """Hidden states (T, d) after the final layer norm, plus the tape."""
    _, tape = batch_forward(feat.frames[None], params, config, mode, seed)
    return tape.hidden[0], tape
