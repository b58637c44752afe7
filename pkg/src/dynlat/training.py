"""Synthetic task, segment-cropping training, and CER evaluation.

The synthetic task is a stand-in corpus: each token owns a fixed random
feature embedding, repeated for a few frames and corrupted with Gaussian
noise, so recognition is learnable in minutes yet degrades measurably when
the encoder loses the right context it trained with.

Segment cropping draws fresh random cut points per utterance per step and
severs the encoder's right taps at those boundaries during the forward
pass. Left-to-right connections stay intact and gradients flow through
them, so the model learns to produce usable states from partial right
context -- the situation streaming inference puts it in.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from dynlat.errors import ConfigError, TrainingDiverged
from dynlat.model import (
    Model,
    encoder_backward,
    encoder_forward,
    encoder_forward_cached,
    joint_lattice_backward,
    pred_backward_labels,
)
from dynlat.numerics import Parameter, SeededRng, zero_grads
from dynlat.revision import RevisionPolicy, StreamSession
from dynlat.transducer import Hypothesis, greedy_decode, model_lattice, rnnt_loss


@dataclass(frozen=True)
class SyntheticTaskSpec:
    vocab_size: int = 16
    frames_per_token: int = 4
    feature_dim: int = 8
    noise_sigma: float = 0.0
    min_label_len: int = 2
    max_label_len: int = 10
    # token embeddings are part of the task identity: datasets drawn with
    # different seeds but the same spec describe the same recognition problem
    embedding_seed: int = 0

    def validate(self) -> None:
        # >= 2 so stride-2 subsampling leaves at least one encoder frame per token
        if self.frames_per_token < 2:
            raise ConfigError("frames_per_token must be >= 2")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        if not (1 <= self.min_label_len <= self.max_label_len):
            raise ConfigError("label length bounds must satisfy 1 <= min <= max")

    def token_embeddings(self) -> np.ndarray:
        rng = SeededRng(self.embedding_seed).child("vocab-embeddings")
        return rng.uniform(-1.0, 1.0, (self.vocab_size, self.feature_dim))

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "frames_per_token": self.frames_per_token,
            "feature_dim": self.feature_dim,
            "noise_sigma": self.noise_sigma,
            "min_label_len": self.min_label_len,
            "max_label_len": self.max_label_len,
            "embedding_seed": self.embedding_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticTaskSpec":
        return cls(**d)


@dataclass
class Utterance:
    uid: str
    features: np.ndarray
    labels: List[int]


def gen_synthetic(spec: SyntheticTaskSpec, n: int, seed: int) -> List[Utterance]:
    """Draw a reproducible dataset; same seed, same bytes.

    The label sequences and noise depend on ``seed``; the per-token feature
    embeddings depend only on the spec, so e.g. a training set drawn with
    one seed and a test set drawn with another pose the same task.
    """
    spec.validate()
    if n < 1:
        raise ConfigError("need at least one utterance")
    rng = SeededRng(seed)
    embeddings = spec.token_embeddings()
    utts = []
    for i in range(n):
        u = int(rng.integers(spec.min_label_len, spec.max_label_len + 1))
        labels = [int(x) for x in rng.integers(0, spec.vocab_size, size=u)]
        feats = np.repeat(embeddings[labels], spec.frames_per_token, axis=0)
        if spec.noise_sigma > 0:
            feats = feats + rng.normal(spec.noise_sigma, feats.shape)
        utts.append(Utterance(uid=f"utt{i:05d}", features=feats.astype(np.float32), labels=labels))
    return utts


@dataclass(frozen=True)
class CropMask:
    """Input-frame indices at which an utterance's right context is severed."""

    boundaries: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "boundaries", tuple(int(b) for b in self.boundaries))
        if list(self.boundaries) != sorted(set(self.boundaries)):
            raise ConfigError("boundaries must be strictly increasing")


MIN_SEGMENT_FRAMES = 8


def sample_crop(T: int, k: int, rng: SeededRng, min_segment: int = MIN_SEGMENT_FRAMES) -> CropMask:
    """Uniform random split of [0, T) into k segments of >= min_segment frames.

    Sampling is exact over the set of valid splits (stars-and-bars bijection),
    so every admissible cut position is reachable. If T is too short for k
    segments, the segment count degrades to floor(T / min_segment).
    """
    if k < 1:
        raise ConfigError("segment count must be >= 1")
    if T < k * min_segment:
        k = max(1, T // min_segment)
    if k == 1:
        return CropMask(())
    slack = T - k * min_segment
    picks = np.sort(rng.choice_without_replacement(slack + k - 1, k - 1))
    boundaries = [int(picks[i]) - i + (i + 1) * min_segment for i in range(k - 1)]
    return CropMask(tuple(boundaries))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 400
    batch_size: int = 8
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    num_segments: int = 0  # 0 disables cropping
    min_segment: int = MIN_SEGMENT_FRAMES
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "steps": self.steps,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "adam_eps": self.adam_eps,
            "num_segments": self.num_segments,
            "min_segment": self.min_segment,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


class Adam:
    """Adaptive moment estimation over a flat parameter dict."""

    def __init__(self, params: Dict[str, Parameter], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * p.grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * p.grad * p.grad
            m_hat = self.m[name] / b1c
            v_hat = self.v[name] / b2c
            p.value -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def utterance_loss(
    model: Model,
    utt: Utterance,
    crop_boundaries: Optional[Sequence[int]] = None,
    grad_scale: float = 1.0,
) -> float:
    """Forward + backward for one utterance; accumulates parameter grads."""
    enc, enc_cache = encoder_forward_cached(utt.features, model.encoder, model.params, crop_boundaries)
    logits, (pred_cache, joint_cache) = model_lattice(model, enc, utt.labels)
    nll, grad_logits = rnnt_loss(logits, utt.labels)
    grad_enc, grad_pred = joint_lattice_backward(grad_logits * grad_scale, joint_cache, model.params)
    encoder_backward(grad_enc, enc_cache, model.encoder, model.params)
    pred_backward_labels(grad_pred, pred_cache, model.predictor, model.params)
    return nll


def train(model: Model, dataset: List[Utterance], cfg: TrainConfig) -> List[float]:
    """Train in place; returns the per-step mean-loss curve.

    Each step samples a batch with replacement, draws a fresh crop mask per
    utterance when cropping is enabled, and applies one Adam update from
    the batch-mean gradient. Fully deterministic given the seed.
    """
    rng = SeededRng(cfg.seed)
    opt = Adam(model.params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    curve: List[float] = []
    for step in range(cfg.steps):
        picks = rng.integers(0, len(dataset), size=cfg.batch_size)
        zero_grads(model.params)
        total = 0.0
        for i in picks:
            utt = dataset[int(i)]
            boundaries = None
            if cfg.num_segments > 0:
                boundaries = sample_crop(
                    len(utt.features), cfg.num_segments, rng, cfg.min_segment
                ).boundaries
            total += utterance_loss(model, utt, boundaries, grad_scale=1.0 / cfg.batch_size)
        mean_loss = total / cfg.batch_size
        if not math.isfinite(mean_loss):
            raise TrainingDiverged(f"non-finite loss {mean_loss} at step {step}")
        curve.append(mean_loss)
        opt.step()
    return curve


def cer(ref: Sequence[int], hyp: Sequence[int]) -> float:
    """Token error rate: unit-cost edit distance over reference length.

    An empty reference scores 0.0 against an empty hypothesis and
    len(hyp) / 1 otherwise.
    """
    if not ref:
        return float(len(hyp))
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(
                prev[j] + 1,  # deletion
                cur[j - 1] + 1,  # insertion
                prev[j - 1] + (r != h),  # substitution / match
            )
        prev = cur
    return prev[-1] / len(ref)


@dataclass
class EvalResult:
    mean_cer: float
    per_utterance: List[dict] = field(default_factory=list)


def stream_utterance(model: Model, policy: RevisionPolicy, features: np.ndarray) -> Tuple[Hypothesis, StreamSession]:
    """Push an utterance through a fresh streaming session chunk by chunk."""
    session = StreamSession(model, policy)
    cf = policy.chunk_frames
    n_full = len(features) // cf
    for c in range(n_full):
        session.push_chunk(features[c * cf : (c + 1) * cf])
    if len(features) % cf:
        session.push_chunk(features[n_full * cf :])
    hyp = session.finish()
    return hyp, session


def evaluate(model: Model, dataset: List[Utterance], policy: Optional[RevisionPolicy] = None) -> EvalResult:
    """Mean CER of streaming decode under ``policy`` (offline when None)."""
    if not dataset:
        raise ConfigError("dataset is empty")
    rows = []
    for utt in dataset:
        if policy is None:
            enc = encoder_forward(utt.features, model.encoder, model.params)
            hyp = greedy_decode(enc, model)
        else:
            hyp, _ = stream_utterance(model, policy, utt.features)
        rows.append(
            {
                "id": utt.uid,
                "cer": cer(utt.labels, hyp.tokens),
                "ref_len": len(utt.labels),
                "hyp": list(hyp.tokens),
            }
        )
    mean = sum(r["cer"] for r in rows) / len(rows)
    return EvalResult(mean_cer=mean, per_utterance=rows)
