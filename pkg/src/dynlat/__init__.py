"""Dynamic-latency transducer toolkit.

A small, self-contained stack for chunked streaming transducer inference
with asynchronous revision of encoder and decoder states: one trained model
can be decoded at any latency by choosing how many history chunks to revise
per step. Includes segment-cropping training to reduce the partial-memory
mismatch between full-context training and limited-context streaming, and a
sweep harness that maps out the latency/accuracy trade-off.
"""

__version__ = "0.1.0"

from dynlat.numerics import Parameter, SeededRng, gradient_check
from dynlat.model import (
    EncoderConfig,
    LayerContext,
    Model,
    PredictionNetConfig,
    left_context_frames,
    right_context_frames,
)
from dynlat.transducer import Hypothesis, greedy_decode, rnnt_loss
from dynlat.revision import RevisionPolicy, StreamSession, algorithmic_latency
from dynlat.training import CropMask, SyntheticTaskSpec, TrainConfig, cer, evaluate, train

__all__ = [
    "Parameter",
    "SeededRng",
    "gradient_check",
    "EncoderConfig",
    "LayerContext",
    "Model",
    "PredictionNetConfig",
    "left_context_frames",
    "right_context_frames",
    "Hypothesis",
    "greedy_decode",
    "rnnt_loss",
    "RevisionPolicy",
    "StreamSession",
    "algorithmic_latency",
    "CropMask",
    "SyntheticTaskSpec",
    "TrainConfig",
    "cer",
    "evaluate",
    "train",
]
