"""Transducer loss, a brute-force alignment oracle, and greedy decoding.

The lattice is the full (T', U+1, vocab+1) grid of joint logits with blank
at index 0; token k of the vocabulary sits at logit index k+1. An alignment
interleaves the U labels (in order) with exactly T' blanks, one blank per
encoder frame, and always terminates with the blank that leaves the last
frame. The loss marginalizes over all such alignments in log space.

``greedy_decode_resume`` is the primitive the streaming engine rebuilds
windows from: resuming from the prediction-net state captured at any frame
boundary reproduces the whole-sequence decode exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Dict, List, Tuple

import numpy as np

from dynlat.errors import DimensionError, InfeasibleError, SizeError, VocabError
from dynlat.model import (
    Model,
    PredState,
    initial_pred_state,
    joint,
    joint_lattice,
    pred_forward_labels,
    pred_step,
)
from dynlat.numerics import log_softmax

BLANK = 0

# Non-blank emissions allowed per frame before a forced frame advance; keeps
# untrained random-weight models from looping.
MAX_EMIT_PER_FRAME = 10


@dataclass
class Hypothesis:
    """Decoded tokens plus the encoder frame each one was emitted at."""

    tokens: List[int] = field(default_factory=list)
    emit_frame: List[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.tokens)

    def extend(self, other: "Hypothesis") -> None:
        self.tokens.extend(other.tokens)
        self.emit_frame.extend(other.emit_frame)

    def copy(self) -> "Hypothesis":
        return Hypothesis(list(self.tokens), list(self.emit_frame))


def _check_lattice(lattice: np.ndarray, labels) -> Tuple[int, int]:
    lattice = np.asarray(lattice)
    if lattice.ndim != 3:
        raise DimensionError(f"lattice must be (T', U+1, vocab+1), got shape {lattice.shape}")
    n_frames, n_rows, n_out = lattice.shape
    if n_rows != len(labels) + 1:
        raise DimensionError(f"lattice has {n_rows} label rows for {len(labels)} labels")
    if n_frames < 1:
        if len(labels) > 0:
            raise InfeasibleError("cannot emit labels with zero encoder frames")
        raise DimensionError("lattice needs at least one encoder frame")
    for lab in labels:
        if not (0 <= lab < n_out - 1):
            raise VocabError(f"label {lab} outside vocabulary of size {n_out - 1}")
    return n_frames, len(labels)


def rnnt_loss(lattice: np.ndarray, labels) -> Tuple[float, np.ndarray]:
    """Negative log-likelihood of ``labels`` plus gradient wrt the logits.

    Forward/backward recursions run in log space (float64 internally) over
    the emission grid:

        alpha(t, u) = LSE(alpha(t-1, u) + blank(t-1, u),
                          alpha(t, u-1) + label(t, u-1))

    with the symmetric beta recursion supplying the gradient.
    """
    n_t, n_u = _check_lattice(lattice, labels)
    lp = log_softmax(np.asarray(lattice, dtype=np.float64))
    labels = list(labels)
    bl = lp[:, :, BLANK]  # (T', U+1)
    if n_u:
        lab = lp[np.arange(n_t)[:, None], np.arange(n_u)[None, :], np.array(labels)[None, :] + 1]
    else:
        lab = np.zeros((n_t, 0))

    neg = -np.inf
    alpha = np.full((n_t, n_u + 1), neg)
    for t in range(n_t):
        entered = alpha[t - 1] + bl[t - 1] if t > 0 else np.full(n_u + 1, neg)
        if t == 0:
            entered[0] = 0.0
        if n_u:
            # scan over u: alpha(t,u) = LSE(entered[u], alpha(t,u-1) + lab[t,u-1])
            cum = np.concatenate([[0.0], np.cumsum(lab[t])])
            alpha[t] = np.logaddexp.accumulate(entered - cum) + cum
        else:
            alpha[t] = entered

    log_z = alpha[n_t - 1, n_u] + bl[n_t - 1, n_u]

    # beta(t, u): log-probability of completing the alignment from (t, u),
    # including the symbol consumed there. beta(T', U) := 0 pads the exit.
    beta = np.full((n_t, n_u + 1), neg)
    for t in reversed(range(n_t)):
        exit_row = beta[t + 1] if t + 1 < n_t else np.full(n_u + 1, neg)
        if t + 1 == n_t:
            exit_row = exit_row.copy()
            exit_row[n_u] = 0.0
        e = bl[t] + exit_row
        if n_u:
            cum = np.concatenate([np.cumsum(lab[t][::-1])[::-1], [0.0]])
            r = np.logaddexp.accumulate((e - cum)[::-1])[::-1]
            beta[t] = r + cum
        else:
            beta[t] = e

    # posterior of traversing each lattice edge
    grad_lp = np.zeros_like(lp)
    exit_beta = np.vstack([beta[1:], np.full((1, n_u + 1), neg)])
    exit_beta[n_t - 1, n_u] = 0.0
    grad_lp[:, :, BLANK] = -np.exp(alpha + bl + exit_beta - log_z)
    if n_u:
        lab_post = -np.exp(alpha[:, :-1] + lab + beta[:, 1:] - log_z)
        grad_lp[np.arange(n_t)[:, None], np.arange(n_u)[None, :], np.array(labels)[None, :] + 1] = lab_post

    grad_logits = grad_lp - np.exp(lp) * grad_lp.sum(axis=-1, keepdims=True)
    return float(-log_z), grad_logits.astype(np.asarray(lattice).dtype)


def enumerate_alignments(n_frames: int, n_labels: int):
    """Yield every valid alignment as a tuple of booleans (True = label).

    Sequences contain ``n_frames`` blanks and ``n_labels`` labels; the final
    symbol is always the blank that leaves the last frame, so all labels sit
    among the first ``n_frames + n_labels - 1`` positions.
    """
    total = n_frames + n_labels
    for label_slots in combinations(range(total), n_labels):
        seq = [False] * total
        for s in label_slots:
            seq[s] = True
        if n_labels and seq[-1]:
            continue
        yield tuple(seq)


def rnnt_loss_bruteforce(lattice: np.ndarray, labels) -> float:
    """Loss by explicit enumeration of all monotone alignments.

    Independent of the recursion in ``rnnt_loss``; only safe on tiny
    instances (at most 20 lattice cells).
    """
    n_t, n_u = _check_lattice(lattice, labels)
    if n_t * (n_u + 1) > 20:
        raise SizeError(f"instance too large to enumerate: {n_t}x{n_u + 1} cells")
    lp = log_softmax(np.asarray(lattice, dtype=np.float64))
    labels = list(labels)
    path_scores = []
    for seq in enumerate_alignments(n_t, n_u):
        t = u = 0
        score = 0.0
        for is_label in seq:
            if is_label:
                score += lp[t, u, labels[u] + 1]
                u += 1
            else:
                score += lp[t, u, BLANK]
                t += 1
        path_scores.append(score)
    if not path_scores:
        raise InfeasibleError("no valid alignment")
    m = max(path_scores)
    return float(-(m + np.log(np.sum(np.exp(np.array(path_scores) - m)))))


def greedy_decode_resume(
    enc_slice: np.ndarray,
    model: Model,
    start: PredState,
    frame_offset: int = 0,
    max_emit: int = MAX_EMIT_PER_FRAME,
) -> Tuple[Hypothesis, PredState]:
    """Frame-synchronous greedy decode of a window, from a given state.

    If ``start`` equals the whole-run prediction state at ``frame_offset``,
    the result is exactly the corresponding slice of the whole-run decode.
    Ties break toward the lowest logit index (blank first).
    """
    params = model.params
    state = start
    hyp = Hypothesis()
    for t in range(len(enc_slice)):
        enc_t = enc_slice[t]
        emitted = 0
        while emitted < max_emit:
            logits = joint(enc_t, state.output, params)
            k = int(np.argmax(logits))
            if k == BLANK:
                break
            hyp.tokens.append(k - 1)
            hyp.emit_frame.append(frame_offset + t)
            _, state = pred_step(k - 1, state, model.predictor, params)
            emitted += 1
    return hyp, state


def greedy_decode(enc: np.ndarray, model: Model, max_emit: int = MAX_EMIT_PER_FRAME) -> Hypothesis:
    """Greedy decode of a full encoder output from a fresh state."""
    hyp, _ = greedy_decode_resume(enc, model, initial_pred_state(model.predictor, model.params), 0, max_emit)
    return hyp


def model_lattice(model: Model, enc: np.ndarray, labels) -> Tuple[np.ndarray, tuple]:
    """Joint logits over all (frame, label-prefix) pairs, with backprop cache."""
    pred_outs, pred_cache = pred_forward_labels(labels, model.predictor, model.params)
    logits, joint_cache = joint_lattice(enc, pred_outs, model.params)
    return logits, (pred_cache, joint_cache)
