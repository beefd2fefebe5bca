"""Checkpoint format: bit-exact round-trips, corruption detection, provenance."""
import os

import numpy as np
import pytest

from cladapt.checkpoint import (
    CheckpointError,
    load_checkpoint,
    read_header,
    save_checkpoint,
)
from cladapt.model import Model, ModelConfig
from cladapt.taskgen import generate_task, interference_suite
from cladapt.training import ParameterStore, TrainPolicy, train_a_freeze, train_initial

CFG = ModelConfig(vocab_size=10, feature_dim=4, num_encoder_layers=2,
                  num_decoder_layers=1, attention_dim=8, feedforward_dim=16, num_heads=2)


@pytest.fixture(scope="module")
def trained_store():
    specs = interference_suite(2, vocab_size=10, feature_dim=4, n_train=16,
                               n_dev=4, n_test=4, min_tokens=2, max_tokens=3)
    store = ParameterStore(Model(CFG, seed=1), use_adapters=True, adapter_dim=4)
    policy = TrainPolicy(method="adapter_freeze", epochs_initial=1, epochs_adapt=1,
                         batch_size=8, adapter_dim=4, seed=1)
    train_initial(generate_task(specs[0]), store, policy)
    train_a_freeze(generate_task(specs[1]), store, policy)
    return store


def test_roundtrip_is_bit_exact(trained_store, tmp_path):
    path = str(tmp_path / "ckpt.bin")
    save_checkpoint(path, trained_store, provenance={"config_hash": "abc", "task_index": 2})
    loaded, info = load_checkpoint(path)
    for (na, ta), (nb, tb) in zip(trained_store.all_named_tensors(),
                                  loaded.all_named_tensors()):
        assert na == nb
        assert ta.data.tobytes() == tb.data.tobytes()
    assert info.task_ids == [1, 2]
    assert info.provenance["config_hash"] == "abc"
    assert loaded.registry.shared_fingerprints == trained_store.registry.shared_fingerprints


def test_saved_files_are_deterministic(trained_store, tmp_path):
    a, b = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
    save_checkpoint(a, trained_store, provenance={"config_hash": "x"})
    save_checkpoint(b, trained_store, provenance={"config_hash": "x"})
    assert open(a, "rb").read() == open(b, "rb").read()


def test_single_flipped_byte_is_caught(trained_store, tmp_path):
    path = str(tmp_path / "ckpt.bin")
    save_checkpoint(path, trained_store)
    data = bytearray(open(path, "rb").read())
    data[-100] ^= 0x01  # flip one bit deep inside the payload
    with open(path, "wb") as fh:
        fh.write(bytes(data))
    with pytest.raises(CheckpointError, match="fingerprint mismatch"):
        load_checkpoint(path)


def test_truncation_is_caught(trained_store, tmp_path):
    path = str(tmp_path / "ckpt.bin")
    save_checkpoint(path, trained_store)
    size = os.path.getsize(path)
    with open(path, "rb+") as fh:
        fh.truncate(size - 64)
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)


def test_unsupported_version_rejected(trained_store, tmp_path):
    path = str(tmp_path / "ckpt.bin")
    save_checkpoint(path, trained_store)
    header = read_header(path)
    assert header["format_version"] == 1
    # rewrite with a bumped version but otherwise intact body
    import json
    import struct

    blob = json.dumps({**header, "format_version": 9}, sort_keys=True,
                      separators=(",", ":")).encode()
    body = open(path, "rb").read()
    (hlen,) = struct.unpack("<Q", body[:8])
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(body[8 + hlen:])
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_baseline_store_without_adapters_roundtrips(tmp_path):
    store = ParameterStore(Model(CFG, seed=3), use_adapters=False)
    path = str(tmp_path / "plain.bin")
    save_checkpoint(path, store)
    loaded, info = load_checkpoint(path)
    assert not info.uses_adapters
    assert loaded.model.fingerprint() == store.model.fingerprint()
