"""Transducer loss vs the enumeration oracle, and greedy decode semantics."""

import math
from math import comb

import numpy as np
import pytest

from dynlat.errors import InfeasibleError, SizeError
from dynlat.model import EncoderConfig, LayerContext, PredictionNetConfig, init_model, initial_pred_state
from dynlat.numerics import Parameter, SeededRng, gradient_check, log_softmax
from dynlat.transducer import (
    BLANK,
    Hypothesis,
    enumerate_alignments,
    greedy_decode,
    greedy_decode_resume,
    rnnt_loss,
    rnnt_loss_bruteforce,
)


class TestLossValues:
    def test_single_forced_blank(self):
        rng = SeededRng(0)
        lattice = rng.uniform(-2, 2, (1, 1, 4))
        nll, _ = rnnt_loss(lattice, [])
        want = -log_softmax(lattice[0, 0].astype(np.float64))[BLANK]
        assert nll == pytest.approx(float(want), abs=1e-9)

    def test_two_frame_one_label_path_enumeration(self):
        """T'=2, U=1: exactly two alignments, summed by hand."""
        rng = SeededRng(1)
        lattice = rng.uniform(-2, 2, (2, 2, 4))
        label = 2
        lp = log_softmax(lattice.astype(np.float64))
        # path A: emit at frame 0, then blank, blank
        path_a = lp[0, 0, label + 1] + lp[0, 1, BLANK] + lp[1, 1, BLANK]
        # path B: blank, emit at frame 1, blank
        path_b = lp[0, 0, BLANK] + lp[1, 0, label + 1] + lp[1, 1, BLANK]
        want = -np.logaddexp(path_a, path_b)
        nll, _ = rnnt_loss(lattice, [label])
        assert nll == pytest.approx(float(want), abs=1e-9)

    def test_uniform_logits_closed_form(self):
        """Uniform logits: P = (#paths) * (1/(V+1))^(T+U)."""
        vocab = 3
        lattice = np.zeros((2, 2, vocab + 1), dtype=np.float32)
        nll, _ = rnnt_loss(lattice, [1])
        want = -math.log(2 * (1.0 / (vocab + 1)) ** 3)
        assert nll == pytest.approx(want, abs=1e-6)

    def test_infeasible_zero_frames(self):
        with pytest.raises(InfeasibleError):
            rnnt_loss(np.zeros((0, 2, 3), dtype=np.float32), [1])


class TestBruteforceOracle:
    def test_agreement_on_random_instances(self):
        rng = SeededRng(2)
        for trial in range(50):
            n_t = int(rng.integers(1, 5))
            n_u = int(rng.integers(0, 4))
            vocab = int(rng.integers(1, 4))
            lattice = rng.uniform(-3, 3, (n_t, n_u + 1, vocab + 1))
            labels = [int(x) for x in rng.integers(0, vocab, size=n_u)]
            nll, _ = rnnt_loss(lattice, labels)
            ref = rnnt_loss_bruteforce(lattice, labels)
            assert abs(nll - ref) <= 1e-6, f"trial {trial}: {nll} vs {ref}"

    def test_no_labels_single_path(self):
        rng = SeededRng(3)
        lattice = rng.uniform(-2, 2, (3, 1, 3))
        lp = log_softmax(lattice.astype(np.float64))
        want = -(lp[0, 0, BLANK] + lp[1, 0, BLANK] + lp[2, 0, BLANK])
        assert rnnt_loss_bruteforce(lattice, []) == pytest.approx(float(want), abs=1e-9)

    def test_alignment_counts(self):
        """Valid alignments end in blank: C(T+U-1, U) of C(T+U, U) interleavings."""
        for n_t, n_u in [(2, 1), (3, 3), (4, 2), (1, 0), (2, 2)]:
            valid = sum(1 for _ in enumerate_alignments(n_t, n_u))
            assert valid == comb(n_t + n_u - 1, n_u)
            assert valid <= comb(n_t + n_u, n_u)

    def test_size_guard(self):
        with pytest.raises(SizeError):
            rnnt_loss_bruteforce(np.zeros((7, 4, 3), dtype=np.float32), [1, 1, 1])


class TestLossGradient:
    def test_lattice_gradient_finite_differences(self):
        rng = SeededRng(4)
        lattice = rng.uniform(-2, 2, (3, 3, 4))
        labels = [0, 2]
        params = {"lattice": Parameter(lattice)}

        def f(p):
            nll, grad = rnnt_loss(p["lattice"].value, labels)
            p["lattice"].grad += grad
            return nll

        assert gradient_check(f, params, SeededRng(5), n_samples=48) < 1e-6

    def test_gradient_rows_sum_to_zero(self):
        # softmax-composed gradients are zero-sum over the logit axis
        rng = SeededRng(6)
        lattice = rng.uniform(-2, 2, (4, 3, 5))
        _, grad = rnnt_loss(lattice, [1, 3])
        np.testing.assert_allclose(grad.sum(axis=-1), 0.0, atol=1e-6)


def decode_model(seed, vocab=4, dim=6):
    enc = EncoderConfig(
        feature_dim=4,
        subsamplers=(LayerContext(1, 0, 2),),
        memory_layers=(LayerContext(2, 1),),
        hidden_dim=dim,
        projection_dim=dim,
    )
    pred = PredictionNetConfig(vocab_size=vocab, embed_dim=4, layers=1, units=dim)
    return init_model(enc, pred, SeededRng(seed))


class TestGreedyDecode:
    def test_empty_encoder_output(self):
        model = decode_model(7)
        hyp = greedy_decode(np.zeros((0, 6), dtype=np.float32), model)
        assert hyp.tokens == [] and hyp.emit_frame == []

    def test_blank_rigged_model_emits_nothing(self):
        model = decode_model(8)
        model.params["joint.bo"].value[BLANK] = 100.0
        enc = SeededRng(9).uniform(-1, 1, (12, 6))
        hyp = greedy_decode(enc, model)
        assert hyp.tokens == []

    def test_deterministic(self):
        model = decode_model(10)
        enc = SeededRng(11).uniform(-1, 1, (9, 6))
        a = greedy_decode(enc, model)
        b = greedy_decode(enc, model)
        assert a.tokens == b.tokens and a.emit_frame == b.emit_frame

    def test_emission_cap(self):
        model = decode_model(12)
        # rig token 1 to always win: unbounded emission without the cap
        model.params["joint.bo"].value[...] = 0
        model.params["joint.bo"].value[2] = 100.0
        model.params["joint.wo"].value[...] = 0
        enc = SeededRng(13).uniform(-1, 1, (5, 6))
        hyp = greedy_decode(enc, model)
        assert len(hyp.tokens) == 5 * 10
        assert all(tok == 1 for tok in hyp.tokens)

    def test_emit_frames_non_decreasing(self):
        model = decode_model(14)
        enc = SeededRng(15).uniform(-1, 1, (20, 6))
        hyp = greedy_decode(enc, model)
        assert hyp.emit_frame == sorted(hyp.emit_frame)


class TestGreedyResume:
    def test_fresh_resume_equals_decode(self):
        model = decode_model(16)
        enc = SeededRng(17).uniform(-1, 1, (10, 6))
        whole = greedy_decode(enc, model)
        resumed, _ = greedy_decode_resume(enc, model, initial_pred_state(model.predictor, model.params), 0)
        assert whole.tokens == resumed.tokens and whole.emit_frame == resumed.emit_frame

    def test_empty_slice(self):
        model = decode_model(18)
        state = initial_pred_state(model.predictor, model.params)
        delta, end = greedy_decode_resume(np.zeros((0, 6), dtype=np.float32), model, state, 5)
        assert len(delta) == 0
        assert end.allclose(state)

    def test_split_anywhere_equals_whole(self):
        """Decode in two resumed parts == whole decode, for every split."""
        rng = SeededRng(19)
        for trial in range(25):
            model = decode_model(100 + trial)
            n = int(rng.integers(1, 12))
            enc = rng.uniform(-1, 1, (n, 6))
            whole = greedy_decode(enc, model)
            for split in range(n + 1):
                first, state = greedy_decode_resume(
                    enc[:split], model, initial_pred_state(model.predictor, model.params), 0
                )
                second, _ = greedy_decode_resume(enc[split:], model, state, split)
                combined = first.copy()
                combined.extend(second)
                assert combined.tokens == whole.tokens, f"trial {trial} split {split}"
                assert combined.emit_frame == whole.emit_frame
