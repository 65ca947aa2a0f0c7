import hashlib
import json
import struct

import numpy as np
import pandas as pd
import pytest

from src.modules.cardionet import NetConfig, init_params
from src.modules.errors import CheckpointError, StoreError
from src.modules.storage import load_checkpoint, read_sample_store, save_checkpoint, write_sample_store


def test_sample_store_roundtrip(tmp_path, sample_factory, tiny_config):
    samples = sample_factory(6, tiny_config)
    samples[2].pad_count = 1
    loaded = read_sample_store(write_sample_store(tmp_path / "samples.bin", samples))
    assert len(loaded) == 6
    for original, copy in zip(samples, loaded):
        np.testing.assert_array_equal(copy.segments, original.segments.astype(np.float32))
        assert copy.labels == original.labels
        assert (copy.patient_id, copy.location, copy.recording_id) == (original.patient_id, original.location, original.recording_id)
    assert loaded[2].pad_count == 1


def test_empty_store(tmp_path):
    assert read_sample_store(write_sample_store(tmp_path / "empty.bin", [])) == []


def test_store_rejects_mixed_shapes(tmp_path, sample_factory, tiny_config):
    samples = sample_factory(2, tiny_config)
    samples[1].segments = samples[1].segments[:1]
    with pytest.raises(StoreError, match="sample 1"):
        write_sample_store(tmp_path / "samples.bin", samples)


def test_store_corruption(tmp_path, sample_factory, tiny_config):
    path = write_sample_store(tmp_path / "samples.bin", sample_factory(3, tiny_config))
    payload = path.read_bytes()
    path.write_bytes(b"XXXX" + payload[4:])
    with pytest.raises(StoreError, match="not a sample store"):
        read_sample_store(path)
    path.write_bytes(payload[:40])
    with pytest.raises(StoreError, match="payload shorter"):
        read_sample_store(path)
    path.write_bytes(payload[:-1])
    with pytest.raises(StoreError, match="trailer length"):
        read_sample_store(path)


def history():
    return pd.DataFrame({"epoch": [1, 2], "train_loss": [0.5, 0.25]})


def test_checkpoint_resave_is_byte_identical(tmp_path, tiny_config):
    first = save_checkpoint(tmp_path / "a.ckpt", init_params(tiny_config, 3), history(), 3, {"fold": 0})
    checkpoint = load_checkpoint(first, tiny_config)
    second = save_checkpoint(tmp_path / "b.ckpt", checkpoint.params, checkpoint.history, checkpoint.seed, checkpoint.metadata["extra"])
    assert first.read_bytes() == second.read_bytes()
    assert checkpoint.history["train_loss"].tolist() == [0.5, 0.25]
    assert checkpoint.metadata["extra"] == {"fold": 0}


def test_checkpoint_history_keeps_full_precision(tmp_path, tiny_config):
    losses = [1.0 / 3.0, 2.718281828459045e-3]
    frame = pd.DataFrame({"epoch": [1, 2], "train_loss": losses})
    restored = load_checkpoint(save_checkpoint(tmp_path / "h.ckpt", init_params(tiny_config), frame)).history
    np.testing.assert_allclose(restored["train_loss"], losses, rtol=1e-12, atol=0)


def test_checkpoint_restores_parameters(tmp_path, tiny_config):
    params = init_params(tiny_config, 7)
    loaded = load_checkpoint(save_checkpoint(tmp_path / "m.ckpt", params)).params
    assert loaded.config == tiny_config
    for name, values in params.state_dict().items():
        np.testing.assert_array_equal(loaded.state_dict()[name], values)


def test_truncated_checkpoint_fails_the_checksum(tmp_path, tiny_config):
    path = save_checkpoint(tmp_path / "m.ckpt", init_params(tiny_config))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="checksum mismatch"):
        load_checkpoint(path)
    path.write_bytes(b"CLCK")
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path, tiny_config):
    path = save_checkpoint(tmp_path / "m.ckpt", init_params(tiny_config))
    payload = bytearray(path.read_bytes())
    struct.pack_into("<H", payload, 4, 99)
    path.write_bytes(bytes(payload))
    with pytest.raises(CheckpointError, match="unsupported checkpoint version 99"):
        load_checkpoint(path)


def rewrite_metadata(path, change):
    """Edit the JSON metadata in place and re-sign the body."""
    payload = path.read_bytes()
    header, body = payload[:38], payload[38:]
    (length,) = struct.unpack_from("<I", body, 0)
    metadata = json.loads(body[4 : 4 + length])
    change(metadata)
    encoded = json.dumps(metadata, sort_keys=True).encode("utf-8")
    body = struct.pack("<I", len(encoded)) + encoded + body[4 + length :]
    path.write_bytes(header[:6] + hashlib.sha256(body).digest() + body)


def test_group_width_mismatch(tmp_path, tiny_config):
    path = save_checkpoint(tmp_path / "m.ckpt", init_params(tiny_config))

    def shrink(metadata):
        metadata["config"]["group_widths"] = [5, 4, 4, 5, 3]

    rewrite_metadata(path, shrink)
    with pytest.raises(CheckpointError, match="incompatible group widths"):
        load_checkpoint(path, tiny_config)


def test_architecture_mismatch(tmp_path, tiny_config):
    path = save_checkpoint(tmp_path / "m.ckpt", init_params(tiny_config))
    other = NetConfig(segments_per_sample=3, segment_length=16, encoder=tiny_config.encoder, head_grid=1)
    with pytest.raises(CheckpointError, match="incompatible architecture"):
        load_checkpoint(path, other)
    reweighted = NetConfig(2, 16, tiny_config.encoder, global_weight=0.5, head_grid=1)
    assert load_checkpoint(path, reweighted).params.config == tiny_config
