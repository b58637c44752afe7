"""Checkpoint and dataset file formats: bit-exact, byte-stable round trips."""

import numpy as np
import pytest

from dynlat.checkpoint import load_model, save_model
from dynlat.data import read_dataset, write_dataset
from dynlat.errors import ConfigError
from dynlat.model import desk_config, encoder_forward, init_model
from dynlat.numerics import SeededRng
from dynlat.training import SyntheticTaskSpec, gen_synthetic
from dynlat.transducer import greedy_decode


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        enc, pred = desk_config()
        model = init_model(enc, pred, SeededRng(5))
        path = tmp_path / "model.ckpt"
        save_model(path, model)
        loaded = load_model(path)
        assert loaded.encoder == model.encoder
        assert loaded.predictor == model.predictor
        assert set(loaded.params) == set(model.params)
        for name, p in model.params.items():
            got = loaded.params[name].value
            assert got.dtype == np.float32
            assert np.array_equal(got, p.value), name

    def test_loaded_model_decodes_identically(self, tmp_path):
        enc, pred = desk_config()
        model = init_model(enc, pred, SeededRng(6))
        feats = SeededRng(7).uniform(-1, 1, (30, enc.feature_dim))
        want = greedy_decode(encoder_forward(feats, enc, model.params), model)
        path = tmp_path / "model.ckpt"
        save_model(path, model)
        loaded = load_model(path)
        got = greedy_decode(encoder_forward(feats, loaded.encoder, loaded.params), loaded)
        assert got.tokens == want.tokens
        assert got.emit_frame == want.emit_frame

    def test_same_model_same_bytes(self, tmp_path):
        enc, pred = desk_config()
        model = init_model(enc, pred, SeededRng(8))
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_model(a, model)
        save_model(b, model)
        assert a.read_bytes() == b.read_bytes()

    def test_rejects_garbage(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint at all")
        with pytest.raises(ConfigError):
            load_model(path)

    def test_rejects_truncation(self, tmp_path):
        enc, pred = desk_config()
        model = init_model(enc, pred, SeededRng(9))
        path = tmp_path / "model.ckpt"
        save_model(path, model)
        clipped = tmp_path / "clipped.ckpt"
        clipped.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(ConfigError):
            load_model(clipped)


class TestDatasetFile:
    def spec(self):
        return SyntheticTaskSpec(vocab_size=5, frames_per_token=3, feature_dim=4,
                                 noise_sigma=0.25, min_label_len=2, max_label_len=4)

    def test_roundtrip_exact(self, tmp_path):
        spec = self.spec()
        utts = gen_synthetic(spec, 12, seed=3)
        path = tmp_path / "data.jsonl"
        write_dataset(path, utts, spec, seed=3)
        loaded, header = read_dataset(path)
        assert header["spec"] == spec.to_dict()
        assert header["seed"] == 3
        assert len(loaded) == 12
        for a, b in zip(utts, loaded):
            assert a.uid == b.uid
            assert a.labels == b.labels
            assert b.features.dtype == np.float32
            assert np.array_equal(a.features, b.features)

    def test_same_seed_same_bytes(self, tmp_path):
        spec = self.spec()
        a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
        write_dataset(a, gen_synthetic(spec, 9, seed=4), spec, seed=4)
        write_dataset(b, gen_synthetic(spec, 9, seed=4), spec, seed=4)
        assert a.read_bytes() == b.read_bytes()

    def test_rejects_wrong_format(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"format":"something-else","version":1}\n')
        with pytest.raises(ConfigError):
            read_dataset(path)
