"""The acoustic model and its context arithmetic.

Encoder: a front end of stride-2 causal subsampling layers followed by a
stack of memory-block layers. Each memory layer projects a pointwise hidden
transform down to the trunk width and mixes a window of those projections:

    h_t = relu(W_h x_t + b_h)
    p_t = W_p h_t
    y_t = x_t + p_t + sum_i a_i * p_{t-i} + sum_j gate(t, j) * c_j * p_{t+j}

Out-of-range projections (sequence edges, masked segment boundaries, frames
not yet received by a streaming session) are zero vectors -- the same
convention everywhere, which is what makes truncating a sequence, masking
its right taps, and recomputing a window in the streaming engine all agree
bit for bit.

Decoder side: a unidirectional LSTM prediction network consumed token by
token, and an additive tanh joint producing ``vocab + 1`` logits with blank
at index 0.

The per-layer ``[left, right]`` tap counts, scaled by the subsampling below
each layer, determine how far into the future the encoder looks; that total
is the model's minimum achievable latency and is computed exactly by
``right_context_frames``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from dynlat.errors import ConfigError, DimensionError, VocabError
from dynlat.numerics import (
    DTYPE,
    Parameter,
    SeededRng,
    linear,
    linear_backward,
    matmul,
    relu,
    relu_backward,
    sigmoid,
    tanh,
)

# Sentinel consumed by the prediction net before any real token; it embeds
# to the zero vector.
START = -1


@dataclass(frozen=True)
class LayerContext:
    """Per-layer tap counts at that layer's own frame rate."""

    left_taps: int
    right_taps: int
    stride: int = 1

    def validate(self) -> None:
        if self.left_taps < 0 or self.right_taps < 0:
            raise ConfigError(f"tap counts must be non-negative: {self}")
        if self.stride < 1:
            raise ConfigError(f"stride must be positive: {self}")


@dataclass(frozen=True)
class EncoderConfig:
    feature_dim: int
    subsamplers: Tuple[LayerContext, ...]
    memory_layers: Tuple[LayerContext, ...]
    hidden_dim: int
    projection_dim: int

    def __post_init__(self):
        object.__setattr__(self, "subsamplers", tuple(self.subsamplers))
        object.__setattr__(self, "memory_layers", tuple(self.memory_layers))

    def validate(self) -> None:
        if not self.memory_layers:
            raise ConfigError("encoder needs at least one memory layer")
        for lc in self.subsamplers + self.memory_layers:
            lc.validate()
        for lc in self.subsamplers:
            # causal front end: all lookahead lives in the memory layers
            if lc.right_taps != 0:
                raise ConfigError("subsampling layers must be causal (right_taps == 0)")
        for lc in self.memory_layers:
            if lc.stride != 1:
                raise ConfigError("memory layers run at the subsampled rate (stride == 1)")

    @property
    def stride_product(self) -> int:
        out = 1
        for lc in self.subsamplers:
            out *= lc.stride
        return out

    def layers(self) -> Tuple[LayerContext, ...]:
        return self.subsamplers + self.memory_layers

    def to_dict(self) -> dict:
        return {
            "feature_dim": self.feature_dim,
            "subsamplers": [[lc.left_taps, lc.right_taps, lc.stride] for lc in self.subsamplers],
            "memory_layers": [[lc.left_taps, lc.right_taps, lc.stride] for lc in self.memory_layers],
            "hidden_dim": self.hidden_dim,
            "projection_dim": self.projection_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(
            feature_dim=d["feature_dim"],
            subsamplers=tuple(LayerContext(*lc) for lc in d["subsamplers"]),
            memory_layers=tuple(LayerContext(*lc) for lc in d["memory_layers"]),
            hidden_dim=d["hidden_dim"],
            projection_dim=d["projection_dim"],
        )


@dataclass(frozen=True)
class PredictionNetConfig:
    vocab_size: int  # real tokens, excluding blank
    embed_dim: int
    layers: int
    units: int

    def validate(self) -> None:
        if self.vocab_size < 1:
            raise ConfigError("vocab_size must be >= 1")
        if self.layers < 1:
            raise ConfigError("prediction net needs at least one layer")

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "embed_dim": self.embed_dim,
            "layers": self.layers,
            "units": self.units,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PredictionNetConfig":
        return cls(**d)


def right_context_frames(cfg: EncoderConfig) -> int:
    """Total lookahead in input frames implied by the per-layer right taps.

    Each layer's taps count frames at its own rate, so they are scaled by
    the product of all strides strictly below that layer.
    """
    total = 0
    below = 1
    for lc in cfg.layers():
        total += lc.right_taps * below
        below *= lc.stride
    return total


def left_context_frames(cfg: EncoderConfig) -> int:
    """Input frames of history the encoder reads; sizes streaming caches."""
    total = 0
    below = 1
    for lc in cfg.layers():
        total += lc.left_taps * below
        below *= lc.stride
    return total


def subsampled_length(cfg: EncoderConfig, n_frames: int) -> int:
    out = n_frames
    for lc in cfg.subsamplers:
        out = -(-out // lc.stride)
    return out


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


@dataclass
class Model:
    """Encoder + prediction net + joint, with one flat parameter dict."""

    encoder: EncoderConfig
    predictor: PredictionNetConfig
    params: Dict[str, Parameter] = field(default_factory=dict)

    def parameters(self) -> Dict[str, Parameter]:
        return self.params

    @property
    def vocab_size(self) -> int:
        return self.predictor.vocab_size


def init_model(enc: EncoderConfig, pred: PredictionNetConfig, rng: SeededRng) -> Model:
    """Draw all weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    enc.validate()
    pred.validate()
    params: Dict[str, Parameter] = {}

    def u(name: str, shape, fan_in: int):
        bound = 1.0 / math.sqrt(max(fan_in, 1))
        params[name] = Parameter(rng.uniform(-bound, bound, size=shape))

    d = enc.projection_dim
    in_dim = enc.feature_dim
    for l, lc in enumerate(enc.subsamplers):
        window = (lc.left_taps + 1) * in_dim
        u(f"sub{l}.w", (d, window), window)
        u(f"sub{l}.b", (d,), window)
        in_dim = d
    if in_dim != d:
        raise ConfigError(
            "without a subsampling layer, feature_dim must equal projection_dim "
            f"(got {enc.feature_dim} vs {d})"
        )
    for l, lc in enumerate(enc.memory_layers):
        u(f"mem{l}.wh", (enc.hidden_dim, d), d)
        u(f"mem{l}.bh", (enc.hidden_dim,), d)
        u(f"mem{l}.wp", (d, enc.hidden_dim), enc.hidden_dim)
        u(f"mem{l}.a", (lc.left_taps, d), max(lc.left_taps, 1))
        u(f"mem{l}.c", (lc.right_taps, d), max(lc.right_taps, 1))

    u("pred.emb", (pred.vocab_size, pred.embed_dim), pred.embed_dim)
    x_dim = pred.embed_dim
    for l in range(pred.layers):
        u(f"pred{l}.wx", (4 * pred.units, x_dim), x_dim)
        u(f"pred{l}.wh", (4 * pred.units, pred.units), pred.units)
        u(f"pred{l}.b", (4 * pred.units,), pred.units)
        x_dim = pred.units

    joint_dim = enc.projection_dim
    u("joint.we", (joint_dim, d), d)
    u("joint.wp", (joint_dim, pred.units), pred.units)
    u("joint.b", (joint_dim,), joint_dim)
    u("joint.wo", (pred.vocab_size + 1, joint_dim), joint_dim)
    u("joint.bo", (pred.vocab_size + 1,), joint_dim)

    return Model(encoder=enc, predictor=pred, params=params)


def desk_config() -> Tuple[EncoderConfig, PredictionNetConfig]:
    """Small default that trains in minutes: 12 input frames of lookahead."""
    enc = EncoderConfig(
        feature_dim=8,
        subsamplers=(LayerContext(2, 0, 2),),
        memory_layers=(LayerContext(4, 2), LayerContext(4, 2), LayerContext(4, 2)),
        hidden_dim=32,
        projection_dim=32,
    )
    pred = PredictionNetConfig(vocab_size=16, embed_dim=16, layers=1, units=32)
    return enc, pred


def wide_lookahead_config() -> Tuple[EncoderConfig, PredictionNetConfig]:
    """Lookahead of 48 input frames -- six 8-frame chunks.

    Cross-frame evidence integration runs through the right taps only
    (left taps are zero), so a model trained at full context genuinely
    depends on future frames. Streamed with few revisions it sees far less
    right context than it trained with, which is what makes revision-depth
    sweeps show a real latency/accuracy trade-off.
    """
    enc = EncoderConfig(
        feature_dim=8,
        subsamplers=(LayerContext(2, 0, 2),),
        memory_layers=(LayerContext(0, 8), LayerContext(0, 8), LayerContext(0, 8)),
        hidden_dim=32,
        projection_dim=32,
    )
    pred = PredictionNetConfig(vocab_size=16, embed_dim=16, layers=1, units=32)
    return enc, pred


# ---------------------------------------------------------------------------
# Subsampling layers (causal, strided affine + relu)
# ---------------------------------------------------------------------------


def _gather_windows(x: np.ndarray, left_taps: int, stride: int, s_lo: int, s_hi: int) -> np.ndarray:
    """Stack causal windows [s*stride - left_taps, s*stride] for s in [s_lo, s_hi)."""
    n, d = x.shape
    padded = np.concatenate([np.zeros((left_taps, d), dtype=x.dtype), x], axis=0)
    # padded index of original frame i is i + left_taps
    rows = np.arange(s_lo, s_hi) * stride  # window end per output index
    cols = np.arange(left_taps + 1)
    idx = rows[:, None] + cols[None, :]
    return padded[idx].reshape(s_hi - s_lo, (left_taps + 1) * d), idx


def subsample_rows(
    x: np.ndarray, ctx: LayerContext, w: np.ndarray, b: np.ndarray, s_lo: int, s_hi: int
) -> np.ndarray:
    """Output rows [s_lo, s_hi) of the subsampler given input frames from 0.

    Causal: row s reads input frames (s*stride - left_taps .. s*stride],
    zero-padded before the sequence start. ``x`` must extend at least to
    frame (s_hi-1)*stride.
    """
    if x.shape[0] < (s_hi - 1) * ctx.stride + 1:
        raise DimensionError("input does not cover the requested output rows")
    xg, _ = _gather_windows(x, ctx.left_taps, ctx.stride, s_lo, s_hi)
    return relu(linear(xg, w, b))


def subsample_forward(x: np.ndarray, ctx: LayerContext, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Full-sequence subsampler: (T, d) -> (ceil(T/stride), d')."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"expected a non-empty (T, d) input, got shape {x.shape}")
    out_len = -(-x.shape[0] // ctx.stride)
    return subsample_rows(x, ctx, w, b, 0, out_len)


def _subsample_forward_cached(x, ctx, w, b):
    out_len = -(-x.shape[0] // ctx.stride)
    xg, idx = _gather_windows(x, ctx.left_taps, ctx.stride, 0, out_len)
    z = linear(xg, w, b)
    return relu(z), (x.shape, xg, idx, z)


def _subsample_backward(grad_y, cache, w):
    (in_shape, xg, idx, z) = cache
    dz = relu_backward(grad_y, z)
    dw, db, dxg = linear_backward(dz, xg, w)
    left = idx.shape[1] - 1
    dpad = np.zeros((in_shape[0] + left, in_shape[1]), dtype=grad_y.dtype)
    np.add.at(dpad, idx.reshape(-1), dxg.reshape(-1, idx.shape[1], in_shape[1]).reshape(-1, in_shape[1]))
    return dw, db, dpad[left:]


# ---------------------------------------------------------------------------
# Memory-block layers
# ---------------------------------------------------------------------------


def _mix_taps(x, p, ctx, a, c, left_p, seg_end, t_lo):
    """Residual + projection + gated tap sums, in a fixed accumulation order."""
    n, d = x.shape
    acc = x + p
    if ctx.left_taps:
        if left_p is None:
            left_p = np.zeros((ctx.left_taps, d), dtype=x.dtype)
        p_ext = np.concatenate([left_p, p], axis=0)
        for i in range(1, ctx.left_taps + 1):
            acc = acc + a[i - 1] * p_ext[ctx.left_taps - i : ctx.left_taps - i + n]
    for j in range(1, ctx.right_taps + 1):
        shifted = np.zeros_like(p)
        if j < n:
            shifted[: n - j] = p[j:]
        if seg_end is not None:
            gate = (t_lo + np.arange(n) + j) < seg_end
            shifted = shifted * gate[:, None]
        acc = acc + c[j - 1] * shifted
    return acc


def memory_layer_forward(
    x: np.ndarray,
    ctx: LayerContext,
    wh: np.ndarray,
    bh: np.ndarray,
    wp: np.ndarray,
    a: np.ndarray,
    c: np.ndarray,
    left_p: Optional[np.ndarray] = None,
    seg_end: Optional[np.ndarray] = None,
    t_lo: int = 0,
) -> Tuple[np.ndarray, np.ndarray]:
    """One memory layer over frames [t_lo, t_lo + len(x)).

    ``left_p`` supplies the ``ctx.left_taps`` projection vectors immediately
    left of the range (zeros by default, matching a sequence start). Right
    taps read freshly computed projections within the range and zeros beyond
    its end. ``seg_end`` (absolute frame indices, one per row) additionally
    gates off right taps that would cross a segment boundary.

    Returns ``(y, p)``: outputs plus the projections the caller may need to
    cache as left context for a later window.
    """
    n, d = x.shape
    if a.shape[0] != ctx.left_taps or c.shape[0] != ctx.right_taps:
        raise DimensionError("tap coefficient arrays do not match the layer context")
    if seg_end is not None and len(seg_end) != n:
        raise DimensionError("seg_end must provide one boundary per frame")
    h = relu(linear(x, wh, bh))
    p = matmul(h, wp.T)
    return _mix_taps(x, p, ctx, a, c, left_p, seg_end, t_lo), p


def _memory_backward(grad_y, x, ctx, wh, bh, wp, a, c, h, p, z_mask, seg_end, t_lo):
    """Backward for a full-range memory layer (t_lo only offsets seg_end)."""
    n, d = x.shape
    dx = grad_y.copy()
    dp = grad_y.copy()
    da = np.zeros_like(a)
    dc = np.zeros_like(c)
    for i in range(1, ctx.left_taps + 1):
        # y_t consumed a_i * p_{t-i}; valid rows t >= i
        if i < n:
            da[i - 1] = (grad_y[i:] * p[: n - i]).sum(axis=0)
            dp[: n - i] += a[i - 1] * grad_y[i:]
    for j in range(1, ctx.right_taps + 1):
        if j < n:
            g = grad_y[: n - j]
            if seg_end is not None:
                gate = ((t_lo + np.arange(n - j) + j) < seg_end[: n - j])[:, None]
                g = g * gate
            dc[j - 1] = (g * p[j:]).sum(axis=0)
            dp[j:] += c[j - 1] * g
    dwp = matmul(dp.T, h)
    dh = matmul(dp, wp)
    dz = dh * z_mask
    dwh, dbh, dxz = linear_backward(dz, x, wh)
    dx += dxz
    return dx, {"wh": dwh, "bh": dbh, "wp": dwp, "a": da, "c": dc}


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


def _segment_ends(boundaries_sub: np.ndarray, t_lo: int, n: int) -> Optional[np.ndarray]:
    """Absolute segment-end index for each frame, or None when unbounded."""
    if boundaries_sub.size == 0:
        return None
    t_abs = t_lo + np.arange(n)
    idx = np.searchsorted(boundaries_sub, t_abs, side="right")
    # frames past the last boundary are limited only by the range end
    ends = np.full(n, np.iinfo(np.int64).max, dtype=np.int64)
    inside = idx < len(boundaries_sub)
    ends[inside] = boundaries_sub[idx[inside]]
    return ends


def crop_boundaries_subsampled(cfg: EncoderConfig, boundaries: Sequence[int]) -> np.ndarray:
    """Map input-frame crop boundaries through the subsampling front end."""
    stride = cfg.stride_product
    return np.asarray(sorted(int(b) // stride for b in boundaries), dtype=np.int64)


def encoder_forward(
    features: np.ndarray,
    cfg: EncoderConfig,
    params: Dict[str, Parameter],
    crop_boundaries: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Full-utterance encoder pass: (T, feat) -> (T', projection_dim).

    ``crop_boundaries`` (input-frame indices) sever right taps at every
    memory layer where they would cross a segment boundary; left context is
    untouched, so information still flows forward across segments.
    """
    x = np.asarray(features)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DimensionError(f"expected non-empty (T, feat) features, got shape {x.shape}")
    if x.shape[1] != cfg.feature_dim:
        raise DimensionError(f"feature dim {x.shape[1]} != configured {cfg.feature_dim}")
    for l, lc in enumerate(cfg.subsamplers):
        x = subsample_forward(x, lc, params[f"sub{l}.w"].value, params[f"sub{l}.b"].value)
    bounds = (
        crop_boundaries_subsampled(cfg, crop_boundaries)
        if crop_boundaries is not None
        else np.empty(0, dtype=np.int64)
    )
    seg_end = _segment_ends(bounds, 0, x.shape[0])
    for l, lc in enumerate(cfg.memory_layers):
        x, _ = memory_layer_forward(
            x,
            lc,
            params[f"mem{l}.wh"].value,
            params[f"mem{l}.bh"].value,
            params[f"mem{l}.wp"].value,
            params[f"mem{l}.a"].value,
            params[f"mem{l}.c"].value,
            seg_end=seg_end,
        )
    return x


def encoder_forward_cached(features, cfg, params, crop_boundaries=None):
    """Forward pass retaining every intermediate needed for backprop."""
    x = np.asarray(features)
    sub_caches = []
    for l, lc in enumerate(cfg.subsamplers):
        x, cache = _subsample_forward_cached(x, lc, params[f"sub{l}.w"].value, params[f"sub{l}.b"].value)
        sub_caches.append(cache)
    bounds = (
        crop_boundaries_subsampled(cfg, crop_boundaries)
        if crop_boundaries is not None
        else np.empty(0, dtype=np.int64)
    )
    seg_end = _segment_ends(bounds, 0, x.shape[0])
    mem_caches = []
    for l, lc in enumerate(cfg.memory_layers):
        wh = params[f"mem{l}.wh"].value
        bh = params[f"mem{l}.bh"].value
        wp = params[f"mem{l}.wp"].value
        z = linear(x, wh, bh)
        h = relu(z)
        p = matmul(h, wp.T)
        y = _mix_taps(x, p, lc, params[f"mem{l}.a"].value, params[f"mem{l}.c"].value, None, seg_end, 0)
        mem_caches.append((x, h, p, z > 0))
        x = y
    return x, (sub_caches, mem_caches, seg_end)


def encoder_backward(grad_y, cache, cfg, params):
    """Accumulate encoder parameter gradients; returns grad wrt features."""
    sub_caches, mem_caches, seg_end = cache
    g = grad_y
    for l in reversed(range(len(cfg.memory_layers))):
        x, h, p, z_mask = mem_caches[l]
        lc = cfg.memory_layers[l]
        g, grads = _memory_backward(
            g, x, lc,
            params[f"mem{l}.wh"].value, params[f"mem{l}.bh"].value, params[f"mem{l}.wp"].value,
            params[f"mem{l}.a"].value, params[f"mem{l}.c"].value,
            h, p, z_mask, seg_end, 0,
        )
        for key, val in grads.items():
            params[f"mem{l}.{key}"].grad += val
    for l in reversed(range(len(cfg.subsamplers))):
        dw, db, g = _subsample_backward(g, sub_caches[l], params[f"sub{l}.w"].value)
        params[f"sub{l}.w"].grad += dw
        params[f"sub{l}.b"].grad += db
    return g


# ---------------------------------------------------------------------------
# Prediction network (LSTM) and joint
# ---------------------------------------------------------------------------


class PredState:
    """Per-layer recurrent hidden and cell vectors of the prediction net."""

    __slots__ = ("h", "c")

    def __init__(self, h: np.ndarray, c: np.ndarray):
        self.h = h
        self.c = c

    @classmethod
    def zeros(cls, cfg: PredictionNetConfig, dtype=DTYPE) -> "PredState":
        return cls(
            np.zeros((cfg.layers, cfg.units), dtype=dtype),
            np.zeros((cfg.layers, cfg.units), dtype=dtype),
        )

    def copy(self) -> "PredState":
        return PredState(self.h.copy(), self.c.copy())

    @property
    def output(self) -> np.ndarray:
        """The prediction-net output vector is the top layer's hidden state."""
        return self.h[-1]

    def to_arrays(self) -> dict:
        return {"h": self.h, "c": self.c}

    @classmethod
    def from_arrays(cls, d: dict) -> "PredState":
        return cls(np.asarray(d["h"]), np.asarray(d["c"]))

    def allclose(self, other: "PredState") -> bool:
        return np.array_equal(self.h, other.h) and np.array_equal(self.c, other.c)


def _lstm_cell(x, h_prev, c_prev, wx, whh, b):
    gates = wx @ x + whh @ h_prev + b
    u = gates.shape[0] // 4
    i = sigmoid(gates[:u])
    f = sigmoid(gates[u : 2 * u])
    g = tanh(gates[2 * u : 3 * u])
    o = sigmoid(gates[3 * u :])
    c_new = f * c_prev + i * g
    h_new = o * tanh(c_new)
    return h_new, c_new, (x, h_prev, c_prev, i, f, g, o, c_new)


def pred_step(
    token: int, state: PredState, cfg: PredictionNetConfig, params: Dict[str, Parameter]
) -> Tuple[np.ndarray, PredState]:
    """Advance the prediction net by one token; START embeds to zeros."""
    if token != START and not (0 <= token < cfg.vocab_size):
        raise VocabError(f"token {token} outside vocabulary of size {cfg.vocab_size}")
    emb = params["pred.emb"].value
    x = np.zeros(emb.shape[1], dtype=emb.dtype) if token == START else emb[token]
    h = state.h.copy()
    c = state.c.copy()
    for l in range(cfg.layers):
        h[l], c[l], _ = _lstm_cell(
            x, state.h[l], state.c[l],
            params[f"pred{l}.wx"].value, params[f"pred{l}.wh"].value, params[f"pred{l}.b"].value,
        )
        x = h[l]
    new_state = PredState(h, c)
    return new_state.output, new_state


def initial_pred_state(cfg: PredictionNetConfig, params: Dict[str, Parameter]) -> PredState:
    """State after priming with START; its ``output`` feeds the first joint."""
    _, state = pred_step(START, PredState.zeros(cfg, dtype=params["pred.emb"].value.dtype), cfg, params)
    return state


def pred_forward_labels(labels, cfg, params):
    """Prediction-net outputs for every label prefix: (U+1, units) + cache."""
    dtype = params["pred.emb"].value.dtype
    state = PredState.zeros(cfg, dtype=dtype)
    outs = np.zeros((len(labels) + 1, cfg.units), dtype=dtype)
    caches = []
    for u, token in enumerate([START] + list(labels)):
        emb = params["pred.emb"].value
        x = np.zeros(emb.shape[1], dtype=dtype) if token == START else emb[token]
        h = state.h.copy()
        c = state.c.copy()
        step_cache = []
        for l in range(cfg.layers):
            h[l], c[l], cell = _lstm_cell(
                x, state.h[l], state.c[l],
                params[f"pred{l}.wx"].value, params[f"pred{l}.wh"].value, params[f"pred{l}.b"].value,
            )
            step_cache.append(cell)
            x = h[l]
        state = PredState(h, c)
        outs[u] = state.output
        caches.append((token, step_cache))
    return outs, caches


def pred_backward_labels(grad_outs, caches, cfg, params):
    """BPTT through the label-prefix pass; accumulates parameter grads."""
    dtype = grad_outs.dtype
    dh_next = np.zeros((cfg.layers, cfg.units), dtype=dtype)
    dc_next = np.zeros((cfg.layers, cfg.units), dtype=dtype)
    demb = params["pred.emb"].grad
    for u in reversed(range(len(caches))):
        token, step_cache = caches[u]
        dx = None
        for l in reversed(range(cfg.layers)):
            x, h_prev, c_prev, i, f, g, o, c_new = step_cache[l]
            dh = dh_next[l].copy()
            if l == cfg.layers - 1:
                dh += grad_outs[u]
            if dx is not None:
                dh += dx  # upper layer consumed this layer's h as input
            tc = tanh(c_new)
            do = dh * tc
            dtc = dh * o * (1.0 - tc * tc) + dc_next[l]
            df = dtc * c_prev
            di = dtc * g
            dg = dtc * i
            dc_next[l] = dtc * f
            dgates = np.concatenate([
                di * i * (1 - i),
                df * f * (1 - f),
                dg * (1 - g * g),
                do * o * (1 - o),
            ])
            wx = params[f"pred{l}.wx"].value
            whh = params[f"pred{l}.wh"].value
            params[f"pred{l}.wx"].grad += np.outer(dgates, x)
            params[f"pred{l}.wh"].grad += np.outer(dgates, h_prev)
            params[f"pred{l}.b"].grad += dgates
            dh_next[l] = whh.T @ dgates
            dx = wx.T @ dgates
        if token != START:
            demb[token] += dx


def joint(enc_t: np.ndarray, pred_u: np.ndarray, params: Dict[str, Parameter]) -> np.ndarray:
    """Logits over blank + vocab for one (encoder frame, prediction) pair."""
    we = params["joint.we"].value
    wp = params["joint.wp"].value
    if enc_t.shape[0] != we.shape[1] or pred_u.shape[0] != wp.shape[1]:
        raise DimensionError("joint input dims do not match parameters")
    hid = tanh(we @ enc_t + wp @ pred_u + params["joint.b"].value)
    return params["joint.wo"].value @ hid + params["joint.bo"].value


def joint_lattice(enc: np.ndarray, pred_outs: np.ndarray, params: Dict[str, Parameter]):
    """All (t, u) joint logits at once: (T', U+1, vocab+1) + cache."""
    we = params["joint.we"].value
    wp = params["joint.wp"].value
    wo = params["joint.wo"].value
    ae = matmul(enc, we.T)
    ap = matmul(pred_outs, wp.T)
    pre = (ae[:, None, :] + ap[None, :, :]) + params["joint.b"].value
    hid = tanh(pre)
    n_t, n_u, jd = hid.shape
    logits = matmul(hid.reshape(-1, jd), wo.T).reshape(n_t, n_u, -1) + params["joint.bo"].value
    return logits, (enc, pred_outs, hid)


def joint_lattice_backward(grad_logits, cache, params):
    """Backward through the batched joint; returns (grad_enc, grad_pred_outs)."""
    enc, pred_outs, hid = cache
    n_t, n_u, jd = hid.shape
    wo = params["joint.wo"].value
    g2 = grad_logits.reshape(-1, grad_logits.shape[-1])
    params["joint.wo"].grad += matmul(g2.T, hid.reshape(-1, jd))
    params["joint.bo"].grad += g2.sum(axis=0)
    dhid = matmul(g2, wo).reshape(n_t, n_u, jd)
    dpre = dhid * (1.0 - hid * hid)
    params["joint.b"].grad += dpre.sum(axis=(0, 1))
    dae = dpre.sum(axis=1)
    dap = dpre.sum(axis=0)
    we = params["joint.we"].value
    wp = params["joint.wp"].value
    params["joint.we"].grad += matmul(dae.T, enc)
    params["joint.wp"].grad += matmul(dap.T, pred_outs)
    return matmul(dae, we), matmul(dap, wp)
