"""Checkpoint format tests: round trips, integrity, and model compatibility."""

import numpy as np
import pytest

from bwrf.checkpoint import (CheckpointError, load_checkpoint, load_into_model,
                             save_checkpoint, save_model)
from bwrf.network import BlockSpec, build_model

SPEC = BlockSpec(units_per_block=1, in_channels=3, num_classes=10)


def sample_tensors():
    rng = np.random.default_rng(0)
    return {
        "stem.conv.weight": rng.standard_normal((16, 3, 3, 3)).astype(np.float32),
        "head.bias": rng.standard_normal(10).astype(np.float32),
        "head.wq.scale": np.array([0.037], np.float32),
    }


def test_round_trip_preserves_values_and_metadata(tmp_path):
    path = str(tmp_path / "m.ckpt")
    tensors = sample_tensors()
    save_checkpoint(path, "resnet20", 4, tensors)
    arch, bits, loaded = load_checkpoint(path)
    assert arch == "resnet20" and bits == 4
    assert list(loaded) == list(tensors)
    for name in tensors:
        np.testing.assert_array_equal(loaded[name], tensors[name])
        assert loaded[name].dtype == np.float32


def test_save_load_save_is_byte_identical(tmp_path):
    a, b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
    save_checkpoint(a, "resnet20", 4, sample_tensors())
    _, _, loaded = load_checkpoint(a)
    save_checkpoint(b, "resnet20", 4, loaded)
    assert open(a, "rb").read() == open(b, "rb").read()


def test_every_corrupted_byte_is_detected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(str(path), "resnet8", 0, {"w": np.arange(6, dtype=np.float32)})
    blob = bytearray(path.read_bytes())
    stride = max(1, len(blob) // 64)
    for pos in range(4, len(blob), stride):  # past the magic
        flipped = bytearray(blob)
        flipped[pos] ^= 0xFF
        path.write_bytes(flipped)
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))
    path.write_bytes(blob)
    load_checkpoint(str(path))  # pristine file still loads


def test_bad_magic_and_missing_file(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="bad magic"):
        load_checkpoint(str(path))
    with pytest.raises(CheckpointError, match="missing checkpoint"):
        load_checkpoint(str(tmp_path / "absent.ckpt"))


def test_truncated_file(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(str(path), "resnet8", 0, {"w": np.ones(4, np.float32)})
    path.write_bytes(path.read_bytes()[:10])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_model_round_trip_bit_identical(tmp_path):
    path = str(tmp_path / "lp.ckpt")
    model = build_model(SPEC, "lp", bits=4, seed=7)
    save_model(path, model, "resnet8")
    clone = build_model(SPEC, "lp", bits=4, seed=99)
    load_into_model(path, clone, "resnet8")
    assert clone.checksum() == model.checksum()


def test_load_into_model_rejects_wrong_arch(tmp_path):
    path = str(tmp_path / "m.ckpt")
    save_model(path, build_model(SPEC, "fp", seed=1), "resnet8")
    with pytest.raises(CheckpointError, match="is for 'resnet8'"):
        load_into_model(path, build_model(SPEC, "fp", seed=2), "resnet20")


def test_load_into_model_rejects_wrong_bits(tmp_path):
    path = str(tmp_path / "m.ckpt")
    save_model(path, build_model(SPEC, "fp", seed=1), "resnet8")
    with pytest.raises(CheckpointError, match="bit-width"):
        load_into_model(path, build_model(SPEC, "lp", bits=4, seed=2), "resnet8")


def test_load_into_model_rejects_shape_drift(tmp_path):
    path = str(tmp_path / "m.ckpt")
    model = build_model(SPEC, "fp", seed=1)
    state = dict(model.state_dict())
    state["head.bias"] = np.zeros(7, np.float32)
    save_checkpoint(path, "resnet8", 0, state)
    with pytest.raises(CheckpointError, match="head.bias"):
        load_into_model(path, build_model(SPEC, "fp", seed=2), "resnet8")


def test_fp_bits_tag_is_zero(tmp_path):
    path = str(tmp_path / "m.ckpt")
    save_model(path, build_model(SPEC, "fp", seed=1), "resnet8")
    _, bits, _ = load_checkpoint(path)
    assert bits == 0
