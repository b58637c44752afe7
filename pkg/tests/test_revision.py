"""Streaming sessions: revision windows, finalization, commits, exactness."""

import numpy as np
import pytest

from dynlat.errors import ConfigError, DimensionError, StateError
from dynlat.model import (
    EncoderConfig,
    LayerContext,
    PredictionNetConfig,
    encoder_forward,
    init_model,
    right_context_frames,
)
from dynlat.numerics import SeededRng
from dynlat.revision import RevisionPolicy, StreamSession, algorithmic_latency, session_new
from dynlat.transducer import greedy_decode

CHUNK = 8


def make_model(seed, right=4, n_layers=2, vocab=4):
    """1 subsampler (stride 2) + memory layers; lookahead = right*2*n_layers frames."""
    enc = EncoderConfig(
        feature_dim=4,
        subsamplers=(LayerContext(1, 0, 2),),
        memory_layers=tuple(LayerContext(1, right) for _ in range(n_layers)),
        hidden_dim=8,
        projection_dim=8,
    )
    pred = PredictionNetConfig(vocab_size=vocab, embed_dim=4, layers=1, units=8)
    return init_model(enc, pred, SeededRng(seed))


def push_all(session, features):
    results = []
    cf = session.policy.chunk_frames
    n_full = len(features) // cf
    for c in range(n_full):
        results.append(session.push_chunk(features[c * cf : (c + 1) * cf]))
    if len(features) % cf:
        results.append(session.push_chunk(features[n_full * cf :]))
    return results


def offline_decode(model, features):
    return greedy_decode(encoder_forward(features, model.encoder, model.params), model)


def exactness_depth(model, chunk=CHUNK):
    return -(-right_context_frames(model.encoder) // chunk)


class TestAlgorithmicLatency:
    def test_one_chunk_is_400ms(self):
        assert algorithmic_latency(RevisionPolicy(40, 0, 1)) == 400.0

    def test_three_and_six_chunks(self):
        assert algorithmic_latency(RevisionPolicy(40, 0, 3)) == 1200.0
        assert algorithmic_latency(RevisionPolicy(40, 0, 6)) == 2400.0

    def test_commit_on_arrival(self):
        assert algorithmic_latency(RevisionPolicy(40, 2, 0)) == 0.0


class TestSessionBasics:
    def test_empty_finish(self):
        model = make_model(0)
        session = session_new(model, RevisionPolicy(CHUNK, 1, 1))
        hyp = session.finish()
        assert hyp.tokens == []
        assert session.finish().tokens == []  # idempotent

    def test_chunk_size_must_divide_stride(self):
        model = make_model(1)
        with pytest.raises(ConfigError):
            session_new(model, RevisionPolicy(chunk_frames=7, encoder_revise=1, decoder_revise=1))

    def test_wrong_frame_count(self):
        model = make_model(2)
        session = session_new(model, RevisionPolicy(CHUNK, 1, 1))
        with pytest.raises(DimensionError):
            session.push_chunk(np.zeros((CHUNK + 1, 4), dtype=np.float32))
        with pytest.raises(DimensionError):
            session.push_chunk(np.zeros((CHUNK, 3), dtype=np.float32))

    def test_push_after_finish(self):
        model = make_model(3)
        session = session_new(model, RevisionPolicy(CHUNK, 0, 0))
        session.push_chunk(SeededRng(4).uniform(-1, 1, (CHUNK, 4)))
        session.finish()
        with pytest.raises(StateError):
            session.push_chunk(np.zeros((CHUNK, 4), dtype=np.float32))

    def test_short_push_locks_session(self):
        model = make_model(5)
        session = session_new(model, RevisionPolicy(CHUNK, 1, 1))
        session.push_chunk(SeededRng(6).uniform(-1, 1, (3, 4)))
        with pytest.raises(StateError):
            session.push_chunk(np.zeros((CHUNK, 4), dtype=np.float32))
        session.finish()

    def test_two_sessions_do_not_interfere(self):
        model = make_model(7)
        rng = SeededRng(8)
        feats_a = rng.uniform(-1, 1, (3 * CHUNK, 4))
        feats_b = rng.uniform(-1, 1, (2 * CHUNK, 4))
        solo = StreamSession(model, RevisionPolicy(CHUNK, 1, 1))
        push_all(solo, feats_a)
        want = solo.finish()

        a = StreamSession(model, RevisionPolicy(CHUNK, 1, 1))
        b = StreamSession(model, RevisionPolicy(CHUNK, 2, 2))
        a.push_chunk(feats_a[:CHUNK])
        b.push_chunk(feats_b[:CHUNK])
        a.push_chunk(feats_a[CHUNK : 2 * CHUNK])
        b.push_chunk(feats_b[CHUNK:])
        a.push_chunk(feats_a[2 * CHUNK :])
        got = a.finish()
        assert got.tokens == want.tokens

    def test_single_chunk_no_revision_matches_offline_prefix(self):
        model = make_model(9)
        feats = SeededRng(10).uniform(-1, 1, (CHUNK, 4))
        session = session_new(model, RevisionPolicy(CHUNK, 0, 0))
        result = session.push_chunk(feats)
        want = offline_decode(model, feats)
        assert result.newly_committed.tokens == want.tokens
        assert result.temporary.tokens == []

    def test_short_utterance_through_finish(self):
        model = make_model(11)
        feats = SeededRng(12).uniform(-1, 1, (5, 4))  # shorter than one chunk
        session = session_new(model, RevisionPolicy(CHUNK, 1, 1))
        push_all(session, feats)
        got = session.finish()
        want = offline_decode(model, feats)
        assert got.tokens == want.tokens
        assert got.emit_frame == want.emit_frame


class TestNoRevisionDegenerate:
    def test_every_push_commits_immediately(self):
        model = make_model(13)
        feats = SeededRng(14).uniform(-1, 1, (4 * CHUNK, 4))
        session = session_new(model, RevisionPolicy(CHUNK, 0, 0))
        for result in push_all(session, feats):
            assert result.temporary.tokens == []
        for record in session.chunks:
            assert record.status == "finalized"


class TestFigureTwoScenario:
    """Right context of two chunks, encoder revised 2 steps, decoder 1."""

    def setup_method(self):
        self.model = make_model(28)  # emits tokens in chunk 0
        assert right_context_frames(self.model.encoder) == 2 * CHUNK
        self.feats = SeededRng(1028).uniform(-1, 1, (3 * CHUNK, 4))
        self.session = session_new(self.model, RevisionPolicy(CHUNK, encoder_revise=2, decoder_revise=1))

    def test_commit_runs_ahead_of_finalization(self):
        r0 = self.session.push_chunk(self.feats[:CHUNK])
        assert r0.newly_committed.tokens == []  # decoder still one chunk behind
        assert self.session.chunks[0].status == "temporary"

        r1 = self.session.push_chunk(self.feats[CHUNK : 2 * CHUNK])
        # decoder commits chunk 0's tokens while encoder state E0 is temporary
        assert len(r1.newly_committed.tokens) > 0
        assert all(f < CHUNK // 2 for f in r1.newly_committed.emit_frame)
        assert self.session.chunks[0].status == "temporary"

        self.session.push_chunk(self.feats[2 * CHUNK :])
        # E0 got its full two-chunk right context and finalizes
        assert self.session.chunks[0].status == "finalized"

    def test_trace_matches_timeline(self):
        for c in range(3):
            self.session.push_chunk(self.feats[c * CHUNK : (c + 1) * CHUNK])
        events = self.session.trace()
        assert [e["finalized_chunk"] for e in events] == [None, None, 0]
        assert events[1]["committed_tokens"] != []


class TestExactness:
    """Enough revision makes streaming equal offline, token for token."""

    def test_full_depth_matches_offline(self):
        rng = SeededRng(15)
        for trial in range(30):
            model = make_model(300 + trial, right=int(rng.integers(1, 6)), n_layers=int(rng.integers(1, 3)))
            depth = exactness_depth(model)
            n_chunks = int(rng.integers(1, 9))
            tail = int(rng.integers(0, CHUNK)) if n_chunks > 1 else 0
            feats = rng.uniform(-1, 1, (n_chunks * CHUNK + tail, 4))
            session = session_new(model, RevisionPolicy(CHUNK, depth, depth))
            push_all(session, feats)
            got = session.finish()
            want = offline_decode(model, feats)
            assert got.tokens == want.tokens, f"trial {trial}"
            assert got.emit_frame == want.emit_frame

    def test_deeper_than_needed_is_still_exact(self):
        model = make_model(16)
        feats = SeededRng(17).uniform(-1, 1, (5 * CHUNK, 4))
        want = offline_decode(model, feats)
        for extra in (0, 1, 3):
            depth = exactness_depth(model) + extra
            session = session_new(model, RevisionPolicy(CHUNK, depth, depth))
            push_all(session, feats)
            assert session.finish().tokens == want.tokens


GRID = [(0, 0), (0, 2), (1, 1), (1, 3), (2, 1), (3, 0), (2, 2), (3, 3)]


class TestPrefixStability:
    def test_committed_stream_is_monotone_prefix(self):
        rng = SeededRng(18)
        for trial in range(12):
            model = make_model(500 + trial, right=int(rng.integers(1, 5)))
            n_chunks = int(rng.integers(1, 10))
            feats = rng.uniform(-1, 1, (n_chunks * CHUNK, 4))
            for enc_rev, dec_rev in GRID:
                session = session_new(model, RevisionPolicy(CHUNK, enc_rev, dec_rev))
                seen = []
                for result in push_all(session, feats):
                    new_stream = seen + list(result.newly_committed.tokens)
                    assert new_stream[: len(seen)] == seen  # prefix property
                    seen = new_stream
                final = session.finish()
                assert final.tokens[: len(seen)] == seen
                assert session.finish().tokens == final.tokens


class TestFinalizationImmutability:
    def test_finalized_activations_never_move(self):
        rng = SeededRng(19)
        for trial in range(6):
            model = make_model(700 + trial, right=int(rng.integers(1, 5)))
            feats = rng.uniform(-1, 1, (8 * CHUNK, 4))
            for enc_rev, dec_rev in ((0, 0), (1, 2), (2, 1), (3, 3)):
                session = session_new(model, RevisionPolicy(CHUNK, enc_rev, dec_rev))
                frozen = {}
                for step in range(8):
                    session.push_chunk(feats[step * CHUNK : (step + 1) * CHUNK])
                    for record in session.chunks:
                        if record.status != "finalized":
                            continue
                        if record.index not in frozen:
                            frozen[record.index] = {
                                k: v.copy() for k, v in record.activations.items()
                            }
                        live = session.chunk_activations(record.index)
                        for key, want in frozen[record.index].items():
                            assert np.array_equal(live[key], want), (
                                f"trial {trial} policy ({enc_rev},{dec_rev}) "
                                f"chunk {record.index} layer {key} changed after finalization"
                            )
                session.finish()
                for index, acts in frozen.items():
                    live = session.chunk_activations(index)
                    for key, want in acts.items():
                        assert np.array_equal(live[key], want)

    def test_increasing_encoder_depth_never_rewrites_finalized(self):
        model = make_model(20)
        feats = SeededRng(21).uniform(-1, 1, (6 * CHUNK, 4))
        for enc_rev in (0, 1, 2, 3):
            session = session_new(model, RevisionPolicy(CHUNK, enc_rev, 1))
            snapshots = {}
            for step in range(6):
                session.push_chunk(feats[step * CHUNK : (step + 1) * CHUNK])
                for record in session.chunks:
                    if record.status == "finalized":
                        live = session.chunk_activations(record.index)
                        if record.index in snapshots:
                            for key, want in snapshots[record.index].items():
                                assert np.array_equal(live[key], want)
                        else:
                            snapshots[record.index] = {k: v.copy() for k, v in live.items()}


class TestTrace:
    def test_each_chunk_finalized_once_and_commits_monotone(self):
        model = make_model(22)
        feats = SeededRng(23).uniform(-1, 1, (7 * CHUNK, 4))
        session = session_new(model, RevisionPolicy(CHUNK, 2, 1))
        push_all(session, feats)
        session.finish()
        events = session.trace()
        finalized = [e["finalized_chunk"] for e in events if e["event"] == "push" and e["finalized_chunk"] is not None]
        finalized += [c for e in events if e["event"] == "finish" for c in e["finalized_chunks"]]
        assert sorted(finalized) == list(range(7))
        assert len(set(finalized)) == 7
        totals = [e["committed_total"] for e in events]
        assert totals == sorted(totals)


class TestAsymmetricDepths:
    def test_any_pairing_runs(self):
        model = make_model(24)
        feats = SeededRng(25).uniform(-1, 1, (4 * CHUNK, 4))
        final_lengths = {}
        for enc_rev, dec_rev in ((0, 3), (3, 0), (1, 2), (2, 1), (0, 0), (4, 4)):
            session = session_new(model, RevisionPolicy(CHUNK, enc_rev, dec_rev))
            push_all(session, feats)
            final_lengths[(enc_rev, dec_rev)] = len(session.finish().tokens)
        assert all(isinstance(v, int) for v in final_lengths.values())
