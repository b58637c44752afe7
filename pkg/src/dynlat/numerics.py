"""Minimal dense float32 numerics with manual backward passes.

Everything above this module (encoder, prediction net, transducer loss) is
built from these primitives. Two properties matter more than speed:

* Fixed reduction order. ``matmul`` accumulates over the inner dimension in
  ascending index order, one rank-1 update at a time, so results are
  bit-identical to a naive triple loop and bit-identical run to run. Rowwise
  ops never mix rows, so computing a slice of a sequence gives bit-identical
  rows to computing the whole sequence -- the streaming engine's exactness
  tests rely on this.
* Dtype transparency. All ops preserve the dtype of their inputs. Runtime
  arrays are float32; ``gradient_check`` re-runs the computation in float64,
  where central finite differences are actually meaningful at 1e-4.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable, Dict, Iterable

import numpy as np

from dynlat.errors import DimensionError, NumericError

DTYPE = np.float32


def tensor(data, dtype=DTYPE) -> np.ndarray:
    """Build a dense array in the package's working dtype."""
    return np.asarray(data, dtype=dtype)


def zeros(shape, like: np.ndarray | None = None) -> np.ndarray:
    return np.zeros(shape, dtype=DTYPE if like is None else like.dtype)


class Parameter:
    """A trainable tensor paired with its gradient accumulator."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter(shape={tuple(self.value.shape)}, dtype={self.value.dtype})"


class SeededRng:
    """Deterministic random source: a seeded PCG64 counter generator.

    Identical seeds give identical streams on every platform. ``child``
    derives an independent, reproducible stream from a key path without
    consuming state from the parent.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def child(self, *keys) -> "SeededRng":
        # str hash is process-randomized; use a stable digest for the spawn key
        digest = lambda k: int.from_bytes(hashlib.sha256(str(k).encode()).digest()[:4], "little")
        seq = np.random.SeedSequence(self.seed, spawn_key=tuple(digest(k) for k in keys))
        return SeededRng(int(seq.generate_state(1, np.uint64)[0]))

    def uniform(self, low: float, high: float, size=None, dtype=DTYPE) -> np.ndarray:
        return self._gen.uniform(low, high, size=size).astype(dtype)

    def normal(self, scale: float, size=None, dtype=DTYPE) -> np.ndarray:
        return (self._gen.standard_normal(size=size) * scale).astype(dtype)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        return self._gen.choice(n, size=k, replace=False)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with a fixed accumulation order over the inner dim.

    Bit-identical to ``for i,j: for k in range(K): out[i,j] += a[i,k]*b[k,j]``.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.result_type(a, b))
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[k, None, :]
    return out


def linear(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Rowwise affine map: x (T, in) with w (out, in) -> (T, out)."""
    out = matmul(x, w.T)
    if b is not None:
        out = out + b
    return out


def linear_backward(grad_out: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Returns (grad_w, grad_b, grad_x) for ``linear``."""
    grad_w = matmul(grad_out.T, x)
    grad_b = grad_out.sum(axis=0)
    grad_x = matmul(grad_out, w)
    return grad_w, grad_b, grad_x


def logsumexp(v: np.ndarray) -> float:
    """Max-shifted log of summed exponentials of a 1-D vector."""
    v = np.asarray(v)
    if v.ndim != 1 or v.size == 0:
        raise DimensionError("logsumexp expects a non-empty 1-D vector")
    m = v.max()
    if not np.isfinite(m):
        # all -inf stays -inf; any +inf/nan propagates
        return float(m)
    return float(m + np.log(np.exp(v - m).sum()))


def lse2(a: float, b: float) -> float:
    """Two-operand log-sum-exp; tolerates -inf on either side."""
    if a == -math.inf:
        return b
    if b == -math.inf:
        return a
    hi, lo = (a, b) if a >= b else (b, a)
    return hi + math.log1p(math.exp(lo - hi))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_out: np.ndarray, x: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form avoids exp overflow for large |x|
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def sigmoid_backward(grad_out: np.ndarray, out: np.ndarray) -> np.ndarray:
    return grad_out * out * (1.0 - out)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(grad_out: np.ndarray, out: np.ndarray) -> np.ndarray:
    return grad_out * (1.0 - out * out)


def log_softmax(x: np.ndarray) -> np.ndarray:
    """Log-softmax over the last axis, rowwise stable."""
    x = np.asarray(x)
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax_backward(grad_out: np.ndarray, out: np.ndarray) -> np.ndarray:
    return grad_out - np.exp(out) * grad_out.sum(axis=-1, keepdims=True)


ParamDict = Dict[str, Parameter]


def clone_params(params: ParamDict, dtype=None) -> ParamDict:
    return {
        name: Parameter(p.value.astype(dtype) if dtype is not None else p.value.copy())
        for name, p in params.items()
    }


def zero_grads(params: Iterable[Parameter] | ParamDict) -> None:
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.zero_grad()


def gradient_check(
    f: Callable[[ParamDict], float],
    params: ParamDict,
    rng: SeededRng,
    n_samples: int = 50,
    eps: float = 1e-3,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``f`` evaluates a scalar loss from the given parameter dict and writes
    analytic gradients into each ``Parameter.grad``. The check runs on a
    float64 clone of ``params``: float32 evaluation noise would swamp the
    divided difference long before the 1e-4 tolerances used by the tests.
    Coordinates are sampled uniformly at random across all parameters.
    """
    work = clone_params(params, dtype=np.float64)
    zero_grads(work)
    loss = float(f(work))
    if not math.isfinite(loss):
        raise NumericError(f"objective is not finite: {loss}")
    analytic = {name: p.grad.copy() for name, p in work.items()}

    names = sorted(work.keys())
    sizes = np.array([work[n].value.size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])

    max_rel = 0.0
    for flat in rng.integers(0, total, size=n_samples):
        slot = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[slot]
        idx = np.unravel_index(int(flat - offsets[slot]), work[name].value.shape)
        saved = work[name].value[idx]

        work[name].value[idx] = saved + eps
        loss_hi = float(f(work))
        work[name].value[idx] = saved - eps
        loss_lo = float(f(work))
        work[name].value[idx] = saved
        if not (math.isfinite(loss_hi) and math.isfinite(loss_lo)):
            raise NumericError("objective is not finite under perturbation")

        fd = (loss_hi - loss_lo) / (2.0 * eps)
        an = float(analytic[name][idx])
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-8)
        max_rel = max(max_rel, rel)
    return max_rel
