"""Chunked streaming inference with asynchronous state revision.

A ``StreamSession`` consumes fixed-size chunks of input frames. Encoder
activations for the newest chunks are *temporary*: each arriving chunk
supplies fresh right context, so the engine recomputes the trailing
``encoder_revise`` chunks layer by layer (older, finalized activations act
as fixed memory; taps past the newest chunk read zeros). The chunk falling
out of that window is finalized and never touched again.

The decoder side re-runs greedy decoding from a checkpointed
prediction-net state over the trailing ``decoder_revise`` chunks every
step, so earlier temporary tokens can be replaced wholesale. Tokens whose
emission frame falls at or before the new commit boundary become permanent
and the checkpoint advances to that boundary.

The two depths are independent: committing tokens one chunk behind while
encoder states settle two chunks behind (or any other pairing, including
zero) is valid. Choosing them at session creation -- after training -- is
what makes one model serve any latency: the committed-token delay is
``decoder_revise * chunk_frames * 10 ms``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from dynlat.errors import ConfigError, DimensionError, StateError
from dynlat.model import (
    Model,
    PredState,
    initial_pred_state,
    memory_layer_forward,
    subsample_rows,
)
from dynlat.transducer import Hypothesis, greedy_decode_resume

FRAME_MS = 10.0  # input frame shift


@dataclass(frozen=True)
class RevisionPolicy:
    """How much history each new chunk is allowed to rewrite."""

    chunk_frames: int = 40
    encoder_revise: int = 0
    decoder_revise: int = 0

    def validate(self, stride_product: int) -> None:
        if self.chunk_frames < 1:
            raise ConfigError("chunk_frames must be >= 1")
        if self.chunk_frames % stride_product:
            raise ConfigError(
                f"chunk_frames {self.chunk_frames} not divisible by subsampling stride {stride_product}"
            )
        if self.encoder_revise < 0 or self.decoder_revise < 0:
            raise ConfigError("revision depths must be non-negative")


def algorithmic_latency(policy: RevisionPolicy) -> float:
    """Delay in ms between a token's audio and its commitment."""
    return policy.decoder_revise * policy.chunk_frames * FRAME_MS


@dataclass
class ChunkRecord:
    """Activations of one chunk, frozen once the chunk is finalized."""

    index: int
    status: str  # "temporary" | "finalized"
    input_frames: np.ndarray
    activations: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class DecoderCheckpoint:
    """Prediction-net snapshot at the last committed chunk boundary."""

    boundary_chunk: int
    pred_state: PredState
    committed_tokens: int
    frame_cursor: int


@dataclass
class IncrementalResult:
    """What one push changed: the committed delta and the revisable suffix."""

    newly_committed: Hypothesis
    temporary: Hypothesis
    chunk_index: int


def session_new(model: Model, policy: RevisionPolicy) -> "StreamSession":
    return StreamSession(model, policy)


class StreamSession:
    """Single-utterance streaming decode state machine.

    A session is a single-writer object: ``push_chunk``/``finish`` must be
    externally serialized. Many sessions may share one (read-only) model.
    """

    def __init__(self, model: Model, policy: RevisionPolicy):
        cfg = model.encoder
        cfg.validate()
        policy.validate(cfg.stride_product)
        self.model = model
        self.policy = policy
        self.cfg = cfg

        # per-rate chunk lengths: raw, after each subsampler
        self._rates = []
        below = 1
        for lc in cfg.subsamplers:
            below *= lc.stride
            self._rates.append(below)
        self._cf_sub = policy.chunk_frames // cfg.stride_product

        d = cfg.projection_dim
        self._raw = np.zeros((0, cfg.feature_dim), dtype=np.float32)
        self._sub_out: List[np.ndarray] = [np.zeros((0, d), dtype=np.float32) for _ in cfg.subsamplers]
        self._mem_p: List[np.ndarray] = [np.zeros((0, d), dtype=np.float32) for _ in cfg.memory_layers]
        self._enc_out = np.zeros((0, d), dtype=np.float32)

        self.chunks: List[ChunkRecord] = []
        self.checkpoint = DecoderCheckpoint(
            boundary_chunk=-1,
            pred_state=initial_pred_state(model.predictor, model.params),
            committed_tokens=0,
            frame_cursor=0,
        )
        self.committed = Hypothesis()
        self.temporary_tokens = Hypothesis()
        self.finished = False
        self._final_hypothesis: Optional[Hypothesis] = None
        self._pending_finish = False
        self._events: List[dict] = []

    # -- encoder stores -----------------------------------------------------

    def _grow(self, store: np.ndarray, rows: int) -> np.ndarray:
        pad = np.zeros((rows - store.shape[0], store.shape[1]), dtype=store.dtype)
        return np.concatenate([store, pad], axis=0)

    def _recompute_window(self, w_lo: int) -> None:
        """Recompute layer activations for chunks [w_lo, newest], layer by layer.

        Finalized frames left of the window stay untouched and serve as the
        fixed left context; right taps past the end of received input read
        zeros (the sequence-edge convention).
        """
        cfg = self.cfg
        params = self.model.params
        n_raw = self._raw.shape[0]

        # causal subsamplers: already-computed rows can never change, so only
        # rows not yet produced are evaluated
        x_store = self._raw
        for l, lc in enumerate(cfg.subsamplers):
            total_rows = -(-n_raw // self._rates[l])
            done = self._sub_out[l].shape[0]
            if total_rows > done:
                new = subsample_rows(
                    x_store, lc, params[f"sub{l}.w"].value, params[f"sub{l}.b"].value, done, total_rows
                )
                self._sub_out[l] = self._grow(self._sub_out[l], total_rows)
                self._sub_out[l][done:total_rows] = new
            x_store = self._sub_out[l]

        t_lo = w_lo * self._cf_sub
        t_hi = x_store.shape[0]
        x = x_store[t_lo:t_hi]
        for l, lc in enumerate(cfg.memory_layers):
            left = lc.left_taps
            left_p = np.zeros((left, cfg.projection_dim), dtype=np.float32)
            if left:
                have = min(left, t_lo)
                if have:
                    left_p[left - have :] = self._mem_p[l][t_lo - have : t_lo]
            y, p = memory_layer_forward(
                x,
                lc,
                params[f"mem{l}.wh"].value,
                params[f"mem{l}.bh"].value,
                params[f"mem{l}.wp"].value,
                params[f"mem{l}.a"].value,
                params[f"mem{l}.c"].value,
                left_p=left_p,
                t_lo=t_lo,
            )
            self._mem_p[l] = self._grow(self._mem_p[l], t_hi)
            self._mem_p[l][t_lo:t_hi] = p
            x = y
        self._enc_out = self._grow(self._enc_out, t_hi)
        self._enc_out[t_lo:t_hi] = x

    def _chunk_rows(self, index: int) -> tuple:
        lo = index * self._cf_sub
        hi = min((index + 1) * self._cf_sub, self._enc_out.shape[0])
        return lo, hi

    def _refresh_record(self, record: ChunkRecord) -> None:
        lo, hi = self._chunk_rows(record.index)
        acts = {}
        for l in range(len(self.cfg.subsamplers)):
            rate = self._rates[l]
            s_lo = record.index * (self.policy.chunk_frames // rate)
            s_hi = min(s_lo + (self.policy.chunk_frames // rate), self._sub_out[l].shape[0])
            acts[f"sub{l}"] = self._sub_out[l][s_lo:s_hi].copy()
        for l in range(len(self.cfg.memory_layers)):
            acts[f"p{l}"] = self._mem_p[l][lo:hi].copy()
        acts["enc"] = self._enc_out[lo:hi].copy()
        record.activations = acts

    def chunk_activations(self, index: int) -> Dict[str, np.ndarray]:
        """Live activations of a chunk, read from the session stores."""
        record = self.chunks[index]
        saved = record.activations
        self._refresh_record(record)
        live = record.activations
        record.activations = saved
        return live

    # -- decoder ------------------------------------------------------------

    def _redecode(self, last_chunk: int):
        """Re-run greedy decoding for chunks after the checkpoint boundary."""
        state = self.checkpoint.pred_state
        states_after = {self.checkpoint.boundary_chunk: state}
        window = Hypothesis()
        for ci in range(self.checkpoint.boundary_chunk + 1, last_chunk + 1):
            lo, hi = self._chunk_rows(ci)
            delta, state = greedy_decode_resume(self._enc_out[lo:hi], self.model, state, frame_offset=lo)
            window.extend(delta)
            states_after[ci] = state
        return window, states_after

    def _split_commit(self, window: Hypothesis, commit_chunk: int):
        """Partition window tokens at the last frame of ``commit_chunk``."""
        cut = (commit_chunk + 1) * self._cf_sub
        n = 0
        while n < len(window) and window.emit_frame[n] < cut:
            n += 1
        head = Hypothesis(window.tokens[:n], window.emit_frame[:n])
        tail = Hypothesis(window.tokens[n:], window.emit_frame[n:])
        return head, tail

    # -- public surface -----------------------------------------------------

    def push_chunk(self, frames: np.ndarray) -> IncrementalResult:
        """Consume one chunk; revise, finalize, and report token movement.

        Mid-stream chunks must be exactly ``chunk_frames`` long. A single
        shorter push is allowed as the utterance tail, after which only
        ``finish`` may be called.
        """
        if self.finished:
            raise StateError("push_chunk after finish")
        if self._pending_finish:
            raise StateError("a short final chunk was pushed; only finish() is allowed now")
        frames = np.asarray(frames, dtype=np.float32)
        if frames.ndim != 2 or frames.shape[1] != self.cfg.feature_dim:
            raise DimensionError(f"expected (n, {self.cfg.feature_dim}) frames, got {frames.shape}")
        if frames.shape[0] > self.policy.chunk_frames or frames.shape[0] < 1:
            raise DimensionError(
                f"chunk must have 1..{self.policy.chunk_frames} frames, got {frames.shape[0]}"
            )
        if frames.shape[0] < self.policy.chunk_frames:
            self._pending_finish = True

        t = len(self.chunks)
        self._raw = np.concatenate([self._raw, frames], axis=0)
        self.chunks.append(ChunkRecord(index=t, status="temporary", input_frames=frames.copy()))

        w_lo = max(0, t - self.policy.encoder_revise)
        self._recompute_window(w_lo)
        finalized = None
        if t - self.policy.encoder_revise >= 0:
            finalized = t - self.policy.encoder_revise
            self.chunks[finalized].status = "finalized"
        for record in self.chunks[w_lo:]:
            if record.status == "temporary" or record.index == finalized:
                self._refresh_record(record)

        window, states_after = self._redecode(t)
        commit_chunk = t - self.policy.decoder_revise
        if commit_chunk > self.checkpoint.boundary_chunk:
            head, tail = self._split_commit(window, commit_chunk)
            self.checkpoint = DecoderCheckpoint(
                boundary_chunk=commit_chunk,
                pred_state=states_after[commit_chunk].copy(),
                committed_tokens=self.checkpoint.committed_tokens + len(head),
                frame_cursor=(commit_chunk + 1) * self._cf_sub,
            )
        else:
            head, tail = Hypothesis(), window
        self.committed.extend(head)
        self.temporary_tokens = tail

        self._events.append(
            {
                "event": "push",
                "chunk_index": t,
                "encoder_window": [w_lo, t],
                "finalized_chunk": finalized,
                "committed_tokens": list(head.tokens),
                "temporary_tokens": list(tail.tokens),
                "committed_total": len(self.committed),
            }
        )
        return IncrementalResult(newly_committed=head, temporary=tail, chunk_index=t)

    def finish(self) -> Hypothesis:
        """Flush the utterance: finalize every chunk, commit every token.

        The true utterance end supplies the right boundary (taps beyond it
        read zeros, the same convention used while streaming), so the still
        temporary chunks are recomputed once more and the decoder re-runs
        from its checkpoint to the end. Idempotent.
        """
        if self.finished:
            return self._final_hypothesis.copy()
        finalized_now = []
        flush = Hypothesis()
        if self.chunks:
            first_temp = next((r.index for r in self.chunks if r.status == "temporary"), None)
            if first_temp is not None:
                self._recompute_window(first_temp)
            for record in self.chunks:
                if record.status == "temporary":
                    record.status = "finalized"
                    finalized_now.append(record.index)
                    self._refresh_record(record)
            flush, states_after = self._redecode(len(self.chunks) - 1)
            last = len(self.chunks) - 1
            self.checkpoint = DecoderCheckpoint(
                boundary_chunk=last,
                pred_state=states_after[last].copy(),
                committed_tokens=self.checkpoint.committed_tokens + len(flush),
                frame_cursor=self._enc_out.shape[0],
            )
            self.committed.extend(flush)
        self.temporary_tokens = Hypothesis()
        self.finished = True
        self._final_hypothesis = self.committed.copy()
        self._events.append(
            {
                "event": "finish",
                "finalized_chunks": finalized_now,
                "committed_tokens": list(flush.tokens),
                "committed_total": len(self.committed),
            }
        )
        return self._final_hypothesis.copy()

    def trace(self) -> List[dict]:
        """Ordered per-step event log (revisions, finalizations, commits)."""
        return list(self._events)
