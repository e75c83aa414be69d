"""Checkpoint container and model reconstruction round-trips."""
import io

import numpy as np
import pytest

from bagfuse.checkpoint import (
    load_checkpoint,
    load_ensemble_checkpoint,
    load_weak_checkpoint,
    read_tensor_blob,
    save_checkpoint,
    save_ensemble_checkpoint,
    save_weak_checkpoint,
    write_tensor_blob,
)
from bagfuse.ensemble import AdaptiveEnsemble
from bagfuse.errors import CheckpointError
from bagfuse.model import ScalingConfig, build_scaled_cnn, strip_head_and_freeze, tiny_base_stack
from bagfuse.tensor import Tensor, no_grad


def test_blob_round_trip_bit_exact():
    rng = np.random.default_rng(0)
    tensors = {
        "a.weight": rng.normal(size=(3, 4)).astype(np.float32),
        "b": rng.normal(size=(2, 2, 2, 2)).astype(np.float32),
        "scalar": np.array([1.5], dtype=np.float32),
    }
    buf = io.BytesIO()
    write_tensor_blob(buf, tensors)
    buf.seek(0)
    loaded = read_tensor_blob(buf)
    assert set(loaded) == set(tensors)
    for name in tensors:
        assert loaded[name].dtype == np.float32
        assert np.array_equal(loaded[name], tensors[name])


def test_blob_truncation_detected():
    buf = io.BytesIO()
    write_tensor_blob(buf, {"w": np.ones((4, 4), dtype=np.float32)})
    raw = buf.getvalue()[:-7]
    with pytest.raises(CheckpointError):
        read_tensor_blob(io.BytesIO(raw))


def test_container_round_trip(tmp_path):
    path = tmp_path / "c.ckpt"
    manifest = {"kind": "test", "nested": {"x": [1, 2, 3]}}
    tensors = {"t": np.arange(6, dtype=np.float32).reshape(2, 3)}
    save_checkpoint(path, manifest, tensors)
    loaded_manifest, loaded_tensors = load_checkpoint(path)
    assert loaded_manifest == manifest
    assert np.array_equal(loaded_tensors["t"], tensors["t"])


def test_missing_file_names_path(tmp_path):
    missing = tmp_path / "nope.ckpt"
    with pytest.raises(CheckpointError, match="nope.ckpt"):
        load_checkpoint(missing)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"XXXX" + b"\x00" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


class TestWeakCheckpoint:
    def make_model(self, seed=3):
        return build_scaled_cnn(tiny_base_stack(), ScalingConfig(), classes=4, input_size=32, seed=seed)

    def test_round_trip_preserves_parameters_and_outputs(self, tmp_path):
        model = self.make_model()
        path = tmp_path / "weak.ckpt"
        save_weak_checkpoint(path, model, history=[{"epoch": 0, "loss": 1.0, "train_accuracy": 0.5}],
                             metrics={"valid_accuracy": 0.75})
        loaded, manifest = load_weak_checkpoint(path)
        for (na, pa), (nb, pb) in zip(model.parameters(), loaded.parameters()):
            assert na == nb
            assert np.array_equal(pa.data, pb.data)
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 32, 32)).astype(np.float32))
        with no_grad():
            assert np.array_equal(model.forward_logits(x).data, loaded.forward_logits(x).data)
        assert manifest["metrics"]["valid_accuracy"] == 0.75
        assert manifest["history"][0]["loss"] == 1.0

    def test_save_load_save_is_byte_identical(self, tmp_path):
        model = self.make_model(seed=4)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_weak_checkpoint(p1, model)
        loaded, _ = load_weak_checkpoint(p1)
        save_weak_checkpoint(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_frozen_state_round_trips(self, tmp_path):
        model = strip_head_and_freeze(self.make_model(seed=5))
        path = tmp_path / "frozen.ckpt"
        save_weak_checkpoint(path, model)
        loaded, manifest = load_weak_checkpoint(path)
        assert manifest["frozen"] is True
        assert loaded.frozen
        assert loaded.head is None
        assert all(not p.requires_grad for _, p in loaded.parameters())

    def test_kind_mismatch_rejected(self, tmp_path):
        path = tmp_path / "other.ckpt"
        save_checkpoint(path, {"kind": "something_else"}, {})
        with pytest.raises(CheckpointError):
            load_weak_checkpoint(path)


class TestEnsembleCheckpoint:
    def test_round_trip(self, tmp_path):
        models = [
            build_scaled_cnn(tiny_base_stack(), ScalingConfig(), classes=3, input_size=32, seed=i)
            for i in range(2)
        ]
        extractors = [strip_head_and_freeze(m) for m in models]
        ens = AdaptiveEnsemble(extractors, classes=3, seed=7)
        path = tmp_path / "ens.ckpt"
        save_ensemble_checkpoint(path, ens, metrics={"test_accuracy": 0.9})
        loaded, manifest = load_ensemble_checkpoint(path)
        assert manifest["metrics"]["test_accuracy"] == 0.9
        assert loaded.n == 2
        x = Tensor(np.random.default_rng(1).normal(size=(3, 3, 32, 32)).astype(np.float32))
        with no_grad():
            assert np.array_equal(ens.forward(x).data, loaded.forward(x).data)

    def test_wrong_kind_rejected(self, tmp_path):
        model = build_scaled_cnn(tiny_base_stack(), ScalingConfig(), classes=3, input_size=32)
        path = tmp_path / "weak.ckpt"
        save_weak_checkpoint(path, model)
        with pytest.raises(CheckpointError):
            load_ensemble_checkpoint(path)
