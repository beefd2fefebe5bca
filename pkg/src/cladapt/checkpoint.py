"""Bit-exact checkpoints: JSON header plus length-prefixed float64 tensor blobs.

Layout: an 8-byte little-endian header length, the canonical-JSON header,
then one ``u64 byte-length + raw little-endian float64 data`` block per
tensor, in the header's tensor order.  Group fingerprints stored in the
header are re-verified on load, so any flipped payload byte is caught.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .adapters import Adapter, AdapterBank
from .autodiff import Tensor
from .model import Model, ModelConfig
from .training import ParameterStore

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated, or mismatched checkpoint file."""


@dataclass
class CheckpointInfo:
    """Header contents of a saved checkpoint."""

    model_config: ModelConfig
    task_ids: list[int]
    adapter_dim: int | None
    fingerprints: dict[str, str]
    provenance: dict

    @property
    def uses_adapters(self) -> bool:
        return self.adapter_dim is not None


def save_checkpoint(path: str, store: ParameterStore, provenance: dict | None = None) -> None:
    tensors = list(store.all_named_tensors())
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": store.model.config.to_dict(),
        "model_seed": store.model.seed,
        "registry": {
            "task_ids": store.registry.task_ids,
            "adapter_dim": store.adapter_dim if store.use_adapters else None,
            "shared_fingerprints": store.registry.shared_fingerprints,
        },
        "fingerprints": store.fingerprints(),
        "provenance": provenance or {},
        "tensors": [{"name": name, "shape": list(t.data.shape)} for name, t in tensors],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, t in tensors:
            raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
            fh.write(struct.pack("<Q", len(raw)))
            fh.write(raw)


def read_header(path: str) -> dict:
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) != 8:
            raise CheckpointError("truncated checkpoint: missing header length")
        (hlen,) = struct.unpack("<Q", prefix)
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise CheckpointError("truncated checkpoint: incomplete header")
    try:
        return json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint header: {exc}") from exc


def load_checkpoint(path: str) -> tuple[ParameterStore, CheckpointInfo]:
    """Rebuild a parameter store; every tensor byte and fingerprint re-verified."""
    header = read_header(path)
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {header.get('format_version')!r}")
    config = ModelConfig.from_dict(header["model_config"])
    registry_info = header["registry"]
    adapter_dim = registry_info.get("adapter_dim")
    model = Model(config, seed=header.get("model_seed", 0))
    store = ParameterStore(model, use_adapters=adapter_dim is not None,
                           adapter_dim=adapter_dim or 32)

    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        fh.seek(8 + hlen)
        for entry in header["tensors"]:
            prefix = fh.read(8)
            if len(prefix) != 8:
                raise CheckpointError(f"truncated payload before tensor {entry['name']!r}")
            (nbytes,) = struct.unpack("<Q", prefix)
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise CheckpointError(f"truncated payload inside tensor {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"])

    for name, t in store.model.named_parameters():
        key = f"shared.{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing tensor {key!r}")
        t.data = arrays[key].copy()

    for task_id in registry_info["task_ids"]:
        prefix = f"bank_{task_id}."
        adapters = []
        for layer in range(config.num_encoder_layers):
            fields = {}
            for field_name in ("ln_gain", "ln_bias", "down_weight", "down_bias",
                               "up_weight", "up_bias"):
                key = f"{prefix}layer{layer}.{field_name}"
                if key not in arrays:
                    raise CheckpointError(f"checkpoint is missing tensor {key!r}")
                fields[field_name] = Tensor(arrays[key].copy(), requires_grad=True)
            adapters.append(Adapter(**fields))
        store.registry.add(AdapterBank(task_id=task_id, adapters=adapters))
    store.registry.shared_fingerprints = {
        int(k): v for k, v in registry_info.get("shared_fingerprints", {}).items()}
    store._reset_flags()

    expected = header["fingerprints"]
    actual = store.fingerprints()
    bad = sorted(g for g in expected if expected[g] != actual.get(g))
    if bad:
        raise CheckpointError(f"fingerprint mismatch after load for groups {bad}; "
                              "the payload is corrupt or was tampered with")
    info = CheckpointInfo(model_config=config, task_ids=list(registry_info["task_ids"]),
                          adapter_dim=adapter_dim, fingerprints=expected,
                          provenance=header.get("provenance", {}))
    return store, info
