"""Task-specific bottleneck adapters and their per-task banks.

An adapter is layer_norm -> down-projection to d -> ReLU -> up-projection
back to h, wrapped in a skip connection.  One bank holds one adapter per
encoder layer; a registry holds the banks of every task learned so far,
in training order.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .autodiff import Tensor, add, layer_norm, matmul, relu, reshape


@dataclass
class Adapter:
    ln_gain: Tensor
    ln_bias: Tensor
    down_weight: Tensor  # h x d
    down_bias: Tensor
    up_weight: Tensor    # d x h
    up_bias: Tensor

    @property
    def hidden_dim(self) -> int:
        return self.down_weight.shape[0]

    @property
    def bottleneck_dim(self) -> int:
        return self.down_weight.shape[1]

    def named_tensors(self, prefix: str = ""):
        for name in ("ln_gain", "ln_bias", "down_weight", "down_bias", "up_weight", "up_bias"):
            yield prefix + name, getattr(self, name)


def apply_adapter(adapter: Adapter, x: Tensor) -> Tensor:
    """x + up(relu(down(layer_norm(x)))), row-wise for matrices."""
    squeeze = x.data.ndim == 1
    if squeeze:
        x = reshape(x, (1, -1))
    normed = layer_norm(x, adapter.ln_gain, adapter.ln_bias)
    down = add(matmul(normed, adapter.down_weight), adapter.down_bias)
    up = add(matmul(relu(down), adapter.up_weight), adapter.up_bias)
    out = add(x, up)
    return reshape(out, (out.shape[-1],)) if squeeze else out


def count_parameters(hidden_dim: int, bottleneck_dim: int, layers: int) -> tuple[int, int]:
    """(per-adapter, per-bank) trainable scalar counts for given dimensions."""
    if hidden_dim <= 0 or bottleneck_dim <= 0 or layers <= 0:
        raise ValueError("count_parameters: dimensions must be positive")
    per_adapter = (2 * hidden_dim                                  # layer norm
                   + hidden_dim * bottleneck_dim + bottleneck_dim  # down projection
                   + bottleneck_dim * hidden_dim + hidden_dim)     # up projection
    return per_adapter, layers * per_adapter


@dataclass
class AdapterBank:
    task_id: int
    adapters: list[Adapter]

    @property
    def hidden_dim(self) -> int:
        return self.adapters[0].hidden_dim

    @property
    def bottleneck_dim(self) -> int:
        return self.adapters[0].bottleneck_dim

    def named_tensors(self):
        for i, adapter in enumerate(self.adapters):
            yield from adapter.named_tensors(prefix=f"layer{i}.")

    def parameter_count(self) -> int:
        return sum(t.data.size for _, t in self.named_tensors())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_tensors():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def set_requires_grad(self, flag: bool) -> None:
        for _, t in self.named_tensors():
            t.requires_grad = flag


def new_bank(task_id: int, num_layers: int, hidden_dim: int, bottleneck_dim: int,
             previous: AdapterBank | None = None, seed: int = 0) -> AdapterBank:
    """Create the bank for a task.

    The first task starts as an exact identity map (zero up-projection), so
    inserting it never changes the host model's outputs.  Later tasks deep
    copy the previous task's bank.
    """
    if bottleneck_dim <= 0 or hidden_dim <= 0 or num_layers <= 0:
        raise ValueError("new_bank: dimensions must be positive")
    if task_id == 1:
        if previous is not None:
            raise ValueError("task 1 takes no previous bank")
        adapters = []
        for layer in range(num_layers):
            gen = rngmod.generator("adapter-init", seed, layer)
            down = gen.normal(size=(hidden_dim, bottleneck_dim)) / np.sqrt(hidden_dim)
            adapters.append(Adapter(
                ln_gain=Tensor(np.ones(hidden_dim), requires_grad=True),
                ln_bias=Tensor(np.zeros(hidden_dim), requires_grad=True),
                down_weight=Tensor(down, requires_grad=True),
                down_bias=Tensor(np.zeros(bottleneck_dim), requires_grad=True),
                up_weight=Tensor(np.zeros((bottleneck_dim, hidden_dim)), requires_grad=True),
                up_bias=Tensor(np.zeros(hidden_dim), requires_grad=True),
            ))
        return AdapterBank(task_id=1, adapters=adapters)
    if previous is None or previous.task_id != task_id - 1:
        got = "none" if previous is None else f"bank {previous.task_id}"
        raise ValueError(f"task {task_id} must start from bank {task_id - 1}, got {got}")
    adapters = [Adapter(**{name.split(".")[-1]: Tensor(t.data.copy(), requires_grad=True)
                           for name, t in adapter.named_tensors()})
                for adapter in previous.adapters]
    return AdapterBank(task_id=task_id, adapters=adapters)


def average_banks(banks: list[AdapterBank]) -> AdapterBank:
    """Elementwise arithmetic mean of every parameter tensor across banks."""
    if not banks:
        raise ValueError("average_banks: need at least one bank")
    dims = {(b.hidden_dim, b.bottleneck_dim, len(b.adapters)) for b in banks}
    if len(dims) != 1:
        raise ValueError(f"average_banks: heterogeneous bank dimensions {sorted(dims)}")
    adapters = []
    for layer in range(len(banks[0].adapters)):
        fields = {}
        for name in ("ln_gain", "ln_bias", "down_weight", "down_bias", "up_weight", "up_bias"):
            stacked = np.stack([getattr(b.adapters[layer], name).data for b in banks])
            fields[name] = Tensor(stacked.mean(axis=0))
        adapters.append(Adapter(**fields))
    return AdapterBank(task_id=banks[-1].task_id, adapters=adapters)


@dataclass
class BankRegistry:
    """Banks of all tasks learned so far, in training order.

    Also keeps an audit trail of shared-parameter fingerprints captured at
    each task boundary, which the freeze-based trainers verify.
    """

    banks: dict[int, AdapterBank] = field(default_factory=dict)
    shared_fingerprints: dict[int, str] = field(default_factory=dict)
    version: int = 0

    def __len__(self) -> int:
        return len(self.banks)

    @property
    def task_ids(self) -> list[int]:
        return sorted(self.banks)

    def add(self, bank: AdapterBank) -> None:
        expected = len(self.banks) + 1
        if bank.task_id != expected:
            raise ValueError(f"expected bank {expected} next, got bank {bank.task_id}")
        self.banks[bank.task_id] = bank
        self.version += 1

    def get(self, task_id: int) -> AdapterBank:
        return self.banks[task_id]

    def latest(self) -> AdapterBank | None:
        return self.banks[len(self.banks)] if self.banks else None

    def record_shared_fingerprint(self, task_id: int, fingerprint: str) -> None:
        self.shared_fingerprints[task_id] = fingerprint

    def all_banks(self) -> list[AdapterBank]:
        return [self.banks[t] for t in self.task_ids]
