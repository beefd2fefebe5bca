"""Sequential-task training procedures.

One shared transformer plus (for the adapter methods) a growing registry of
per-task adapter banks.  The procedures differ in what they freeze and what
they add to the loss:

* ``train_initial``        - first task; shared and bank trained jointly, with
                             optional weight decay on the shared groups only.
* ``train_fine_tune``      - all shared parameters at the adaptation rate.
* ``train_a_freeze``       - only the new task's bank; shared bit-frozen.
* ``train_a_cft``          - the frozen stage above, then whole-model
                             adaptation at one tenth of the adaptation rate.
* ``train_lwf``            - fine-tune plus distillation from the pre-task
                             model on new-task batches.
* ``train_er``             - fine-tune plus a rehearsal-memory batch per step.
* ``train_kd``             - fine-tune plus distillation on memory batches.
* ``train_separate``       - per-task checkpoints (bounds), with optional
                             frozen decoder or frozen everything-but-feedforward.

All procedures verify their freeze contracts by fingerprint and are
bit-reproducible from (config, seed) on one thread.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngmod
from .adapters import AdapterBank, BankRegistry, new_bank
from .autodiff import Tensor, add, backward, mean, mul, no_grad, sub, sum_
from .decoding import Decoder, evaluate_corpus_wer
from .model import SHARED_GROUPS, Model, Utterance, group_of, teacher_forcing
from .taskgen import TaskDataset

log = logging.getLogger(__name__)

METHODS = ("fine_tune", "adapter_freeze", "adapter_cautious", "lwf", "er", "kd",
           "sep_model", "sep_encoder", "sep_encoder_ff")
ADAPTER_METHODS = ("adapter_freeze", "adapter_cautious")
MEMORY_METHODS = ("er", "kd")
SEPARATE_SCOPES = {"sep_model": "full", "sep_encoder": "encoder",
                   "sep_encoder_ff": "encoder_ff"}


def uses_adapters(method: str) -> bool:
    return method in ADAPTER_METHODS


def uses_memory(method: str) -> bool:
    return method in MEMORY_METHODS


class FreezeViolationError(AssertionError):
    """A parameter group that was declared frozen changed during training."""


@dataclass
class TrainPolicy:
    """One sequential-training method plus its hyperparameters.

    The adaptation rate defaults to a tenth of the initial rate and the
    cautious rate to a tenth of that; explicit overrides are honored but
    logged.
    """

    method: str = "fine_tune"
    lr_initial: float = 3e-3
    lr_ft: float | None = None
    cautious_lr: float | None = None
    weight_decay_exponent: float | None = -5.0   # lambda = 10**omega on shared groups
    distill_weight: float = 1.0
    memory_capacity: int = 1000
    epochs_initial: int = 8
    epochs_adapt: int = 6
    epochs_stage2: int = 4
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"
    adapter_dim: int = 32

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.adapter_dim < 1:
            raise ValueError("batch_size and adapter_dim must be positive")
        if self.weight_decay_exponent is not None and self.weight_decay_exponent >= 0:
            raise ValueError("weight_decay_exponent must be negative (or None for no decay)")
        for name, rule in (("lr_ft", self.lr_initial / 10.0),
                           ("cautious_lr", self.resolved_lr_ft / 10.0)):
            value = getattr(self, name)
            if value is not None and not np.isclose(value, rule):
                log.warning("%s=%g overrides the default rule value %g", name, value, rule)

    @property
    def resolved_lr_ft(self) -> float:
        return self.lr_ft if self.lr_ft is not None else self.lr_initial / 10.0

    @property
    def resolved_cautious_lr(self) -> float:
        return self.cautious_lr if self.cautious_lr is not None else self.resolved_lr_ft / 10.0

    @property
    def weight_decay_lambda(self) -> float:
        if self.weight_decay_exponent is None:
            return 0.0
        return 10.0 ** self.weight_decay_exponent

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "lr_initial": self.lr_initial,
            "lr_ft": self.lr_ft,
            "cautious_lr": self.cautious_lr,
            "weight_decay_exponent": self.weight_decay_exponent,
            "distill_weight": self.distill_weight,
            "memory_capacity": self.memory_capacity,
            "epochs_initial": self.epochs_initial,
            "epochs_adapt": self.epochs_adapt,
            "epochs_stage2": self.epochs_stage2,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "optimizer": self.optimizer,
            "adapter_dim": self.adapter_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainPolicy":
        return cls(**d)


# ---------------------------------------------------------------------------
# parameter store
# ---------------------------------------------------------------------------

def bank_group(task_id: int) -> str:
    return f"bank_{task_id}"


@dataclass
class GroupFlags:
    trainable: bool = False
    decayed: bool = False


class ParameterStore:
    """Shared model parameters plus the adapter-bank registry, grouped.

    Every trainable scalar belongs to exactly one group: the five shared
    groups or one ``bank_<t>`` group per task.  Flags describe the current
    training stage (who trains, who decays) for introspection and audits.
    """

    def __init__(self, model: Model, use_adapters: bool, adapter_dim: int = 32):
        self.model = model
        self.use_adapters = use_adapters
        self.adapter_dim = adapter_dim
        self.registry = BankRegistry()
        self.flags: dict[str, GroupFlags] = {}
        self._reset_flags()

    def _reset_flags(self) -> None:
        self.flags = {g: GroupFlags() for g in self.group_names()}

    def group_names(self) -> list[str]:
        return list(SHARED_GROUPS) + [bank_group(t) for t in self.registry.task_ids]

    def named_tensors(self, group: str):
        if group.startswith("bank_"):
            bank = self.registry.get(int(group.split("_")[1]))
            for name, t in bank.named_tensors():
                yield f"{group}.{name}", t
        else:
            for name, t in self.model.group_members(group):
                yield f"shared.{name}", t

    def all_named_tensors(self):
        for group in self.group_names():
            yield from self.named_tensors(group)

    def fingerprints(self) -> dict[str, str]:
        fps = {g: self.model.fingerprint(g) for g in SHARED_GROUPS}
        for t in self.registry.task_ids:
            fps[bank_group(t)] = self.registry.get(t).fingerprint()
        return fps

    def shared_fingerprint(self) -> str:
        return self.model.fingerprint()

    def start_bank(self, task_id: int) -> AdapterBank:
        if not self.use_adapters:
            raise ValueError("this store was built without adapters")
        bank = new_bank(task_id, self.model.config.num_encoder_layers,
                        self.model.config.attention_dim, self.adapter_dim,
                        previous=self.registry.latest(), seed=self.model.seed)
        self.registry.add(bank)
        self._reset_flags()
        return bank

    def configure(self, trainable: set[str], decayed: set[str] = frozenset()) -> None:
        known = set(self.group_names())
        unknown = (set(trainable) | set(decayed)) - known
        if unknown:
            raise ValueError(f"unknown parameter groups {sorted(unknown)}")
        self._reset_flags()
        for g in trainable:
            self.flags[g].trainable = True
        for g in decayed:
            self.flags[g].decayed = True

    def trainable_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for g, f in self.flags.items():
            if f.trainable:
                out.extend(self.named_tensors(g))
        return out

    def decayed_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for g, f in self.flags.items():
            if f.decayed:
                out.extend(self.named_tensors(g))
        return out

    def zero_grads(self) -> None:
        for _, t in self.all_named_tensors():
            t.grad = None

    def set_requires_grad_from_flags(self) -> None:
        for g, f in self.flags.items():
            for _, t in self.named_tensors(g):
                t.requires_grad = f.trainable

    def restore_requires_grad(self) -> None:
        for _, t in self.all_named_tensors():
            t.requires_grad = True


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params: list[tuple[str, Tensor]], lr: float,
                 beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-9):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params}
        self.v = {name: np.zeros_like(t.data) for name, t in params}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params:
            if p.grad is None:
                continue
            m = self.m[name] = b1 * self.m[name] + (1 - b1) * p.grad
            v = self.v[name] = b2 * self.v[name] + (1 - b2) * p.grad ** 2
            mhat = m / (1 - b1 ** self.t)
            vhat = v / (1 - b2 ** self.t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class SGD:
    def __init__(self, params: list[tuple[str, Tensor]], lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for _, p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


def make_optimizer(policy: TrainPolicy, params, lr: float):
    return Adam(params, lr) if policy.optimizer == "adam" else SGD(params, lr)


# ---------------------------------------------------------------------------
# rehearsal memory
# ---------------------------------------------------------------------------

@dataclass
class RehearsalMemory:
    """Fixed-capacity store of earlier tasks' utterances.

    Rebalanced after every task so per-task counts differ by at most one;
    subsampling is uniform and seeded.  Size never exceeds capacity.
    """

    capacity: int
    items: list[Utterance] = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("memory capacity must be >= 1")

    def __len__(self) -> int:
        return len(self.items)

    def task_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for u in self.items:
            counts[u.task_id] = counts.get(u.task_id, 0) + 1
        return counts

    def rebalance(self, task_id: int, new_task_pool: list[Utterance], seed: int) -> None:
        tasks = sorted(set(self.task_counts()) | {task_id})
        quota_base, extra = divmod(self.capacity, len(tasks))
        kept: list[Utterance] = []
        for rank, tid in enumerate(tasks):
            quota = quota_base + (1 if rank < extra else 0)
            pool = list(new_task_pool) if tid == task_id else \
                [u for u in self.items if u.task_id == tid]
            if len(pool) > quota:
                gen = rngmod.generator("memory-rebalance", seed, tid, len(tasks))
                idx = np.sort(gen.choice(len(pool), size=quota, replace=False))
                pool = [pool[i] for i in idx]
            kept.extend(pool)
        if len(kept) > self.capacity:
            raise AssertionError("rebalance exceeded memory capacity")
        self.items = kept

    def sample(self, size: int, gen: np.random.Generator) -> list[Utterance]:
        if not self.items:
            raise ValueError("cannot sample a batch from an empty rehearsal memory")
        idx = gen.integers(0, len(self.items), size=size)
        return [self.items[i] for i in idx]


# ---------------------------------------------------------------------------
# loss assembly over mixed-length batches
# ---------------------------------------------------------------------------

def _group_by_shape(utterances: list[Utterance]) -> list[list[Utterance]]:
    groups: dict[tuple[int, int], list[Utterance]] = {}
    for u in utterances:
        groups.setdefault((u.frames.shape[0], len(u.tokens)), []).append(u)
    return [groups[k] for k in sorted(groups)]


def _sum_terms(terms: list[Tensor]) -> Tensor:
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


def mean_hybrid_loss(model: Model, utterances: list[Utterance],
                     bank: AdapterBank | None = None) -> Tensor:
    """Mean hybrid loss over a mixed-length batch (grouped by shape internally)."""
    n = len(utterances)
    parts = []
    for group in _group_by_shape(utterances):
        frames = np.stack([u.frames for u in group])
        toks = np.array([u.tokens for u in group], dtype=np.int64).reshape(
            len(group), len(group[0].tokens))
        loss, _, _ = model.hybrid_loss_batch(frames, toks, bank)
        parts.append(mul(Tensor(len(group) / n), loss))
    return _sum_terms(parts)


def mean_distill_kl(student: Model, teacher: Model, utterances: list[Utterance]) -> Tensor:
    """Mean KL(teacher || student) over decoder token distributions.

    Teacher-forced on the given references, temperature 1, averaged over
    positions and utterances.  The teacher's distributions are constants.
    """
    n = len(utterances)
    parts = []
    for group in _group_by_shape(utterances):
        frames = np.stack([u.frames for u in group])
        toks = np.array([u.tokens for u in group], dtype=np.int64).reshape(
            len(group), len(group[0].tokens))
        dec_in, _ = teacher_forcing(toks)
        with no_grad():
            lp_teacher = teacher.decoder_logprobs(teacher.encode(frames), dec_in).data
        p_teacher = np.exp(lp_teacher)
        entropy = (p_teacher * lp_teacher).sum(axis=-1)        # [B, L] constants
        lp_student = student.decoder_logprobs(student.encode(frames), dec_in)
        cross = sum_(mul(Tensor(p_teacher), lp_student), axis=-1)
        kl = mean(sub(Tensor(entropy), cross))
        parts.append(mul(Tensor(len(group) / n), kl))
    return _sum_terms(parts)


def weight_decay_term(named_tensors: list[tuple[str, Tensor]], lam: float) -> Tensor:
    """lam * sum of squared parameters, as a differentiable loss term."""
    parts = [sum_(mul(t, t)) for _, t in named_tensors]
    return mul(Tensor(lam), _sum_terms(parts))


# ---------------------------------------------------------------------------
# the stage runner
# ---------------------------------------------------------------------------

@dataclass
class StageLog:
    stage: str
    lr: float
    epochs: int
    steps: int
    epoch_losses: list[float]

    def to_dict(self) -> dict:
        return {"stage": self.stage, "lr": self.lr, "epochs": self.epochs,
                "steps": self.steps, "epoch_losses": self.epoch_losses}


@dataclass
class TrainRun:
    method: str
    task_id: int
    seed: int
    stages: list[StageLog]
    fingerprints_before: dict[str, str]
    fingerprints_after: dict[str, str]
    wall_clock_seconds: float = 0.0
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "task_id": self.task_id,
            "seed": self.seed,
            "stages": [s.to_dict() for s in self.stages],
            "fingerprints_before": self.fingerprints_before,
            "fingerprints_after": self.fingerprints_after,
            "wall_clock_seconds": self.wall_clock_seconds,
            "notes": self.notes,
        }


def _epoch_batches(utterances: list[Utterance], batch_size: int,
                   gen: np.random.Generator) -> list[list[Utterance]]:
    order = gen.permutation(len(utterances))
    lengths = np.array([utterances[i].frames.shape[0] for i in order])
    order = order[np.argsort(lengths, kind="stable")]  # group lengths, keep shuffle inside
    shuffled = [utterances[i] for i in order]
    return [shuffled[i:i + batch_size] for i in range(0, len(shuffled), batch_size)]


def _run_stage(store: ParameterStore, utterances: list[Utterance], *, stage: str,
               task_id: int, lr: float, epochs: int, policy: TrainPolicy,
               trainable: set[str], decayed: set[str] = frozenset(),
               bank: AdapterBank | None = None, teacher: Model | None = None,
               distill_on: str | None = None, memory: RehearsalMemory | None = None,
               rehearse: bool = False) -> StageLog:
    if not utterances:
        raise ValueError(f"stage {stage!r} of task {task_id} received no training data")
    store.configure(trainable, decayed)
    params = store.trainable_tensors()
    decayed_params = store.decayed_tensors()
    lam = policy.weight_decay_lambda if decayed else 0.0
    opt = make_optimizer(policy, params, lr)
    losses = []
    steps = 0
    store.set_requires_grad_from_flags()
    try:
        for epoch in range(epochs):
            # keyed without the stage name so that disabling a method's extra
            # term reproduces its base method's trajectory exactly
            gen = rngmod.generator("batches", policy.seed, task_id, epoch)
            mem_gen = rngmod.generator("memory-draw", policy.seed, task_id, epoch)
            epoch_loss = 0.0
            batches = _epoch_batches(utterances, policy.batch_size, gen)
            for batch in batches:
                store.zero_grads()
                loss = mean_hybrid_loss(store.model, batch, bank)
                if rehearse:
                    mem_batch = memory.sample(policy.batch_size, mem_gen)
                    loss = add(loss, mean_hybrid_loss(store.model, mem_batch))
                if teacher is not None and policy.distill_weight != 0.0:
                    if distill_on == "memory":
                        kl_batch = memory.sample(policy.batch_size, mem_gen)
                    else:
                        kl_batch = batch
                    kl = mean_distill_kl(store.model, teacher, kl_batch)
                    loss = add(loss, mul(Tensor(policy.distill_weight), kl))
                if lam > 0.0:
                    loss = add(loss, weight_decay_term(decayed_params, lam))
                backward(loss)
                opt.step()
                epoch_loss += float(loss.data)
                steps += 1
            losses.append(epoch_loss / max(1, len(batches)))
    finally:
        store.restore_requires_grad()
        store.zero_grads()
    return StageLog(stage=stage, lr=lr, epochs=epochs, steps=steps, epoch_losses=losses)


def _check_frozen(before: dict[str, str], after: dict[str, str],
                  frozen: set[str]) -> None:
    for group in frozen:
        if before.get(group) != after.get(group):
            raise FreezeViolationError(
                f"group {group!r} was declared frozen but its fingerprint changed")


# ---------------------------------------------------------------------------
# the training procedures
# ---------------------------------------------------------------------------

def train_initial(dataset: TaskDataset, store: ParameterStore,
                  policy: TrainPolicy) -> TrainRun:
    """First task: shared parameters and (if present) bank 1, trained jointly.

    Weight decay applies to the shared groups only; the adapter parameters
    are exempt so task-specific signal accumulates there.
    """
    if len(store.registry) != 0:
        raise ValueError("train_initial requires an empty bank registry")
    t0 = time.perf_counter()
    before = store.fingerprints()
    bank = store.start_bank(1) if store.use_adapters else None
    trainable = set(SHARED_GROUPS) | ({bank_group(1)} if bank else set())
    decayed = set(SHARED_GROUPS) if policy.weight_decay_lambda > 0 else set()
    stage = _run_stage(store, dataset.train, stage="initial", task_id=1,
                       lr=policy.lr_initial, epochs=policy.epochs_initial,
                       policy=policy, trainable=trainable, decayed=decayed, bank=bank)
    store.registry.record_shared_fingerprint(1, store.shared_fingerprint())
    return TrainRun(method=policy.method, task_id=1, seed=policy.seed, stages=[stage],
                    fingerprints_before=before, fingerprints_after=store.fingerprints(),
                    wall_clock_seconds=time.perf_counter() - t0,
                    notes=[f"weight_decay_lambda={policy.weight_decay_lambda:g}"])


def train_fine_tune(dataset: TaskDataset, store: ParameterStore,
                    policy: TrainPolicy) -> TrainRun:
    """Adapt every shared parameter to the new task at the adaptation rate."""
    t0 = time.perf_counter()
    before = store.fingerprints()
    task_id = dataset.task_id
    stage = _run_stage(store, dataset.train, stage="fine_tune", task_id=task_id,
                       lr=policy.resolved_lr_ft, epochs=policy.epochs_adapt,
                       policy=policy, trainable=set(SHARED_GROUPS))
    return TrainRun(method="fine_tune", task_id=task_id, seed=policy.seed, stages=[stage],
                    fingerprints_before=before, fingerprints_after=store.fingerprints(),
                    wall_clock_seconds=time.perf_counter() - t0)


def train_a_freeze(dataset: TaskDataset, store: ParameterStore, policy: TrainPolicy,
                   lr: float | None = None) -> TrainRun:
    """Train only the new task's bank; every shared tensor stays bit-identical."""
    if not store.use_adapters or len(store.registry) < 1:
        raise ValueError("adapter training requires an initialized bank registry")
    t0 = time.perf_counter()
    task_id = len(store.registry) + 1
    before = store.fingerprints()
    bank = store.start_bank(task_id)
    frozen = set(before)  # everything that existed before this task
    stage = _run_stage(store, dataset.train, stage="adapt_frozen", task_id=task_id,
                       lr=lr if lr is not None else policy.resolved_lr_ft,
                       epochs=policy.epochs_adapt, policy=policy,
                       trainable={bank_group(task_id)}, bank=bank)
    after = store.fingerprints()
    _check_frozen(before, after, frozen)
    store.registry.record_shared_fingerprint(task_id, store.shared_fingerprint())
    return TrainRun(method="adapter_freeze", task_id=task_id, seed=policy.seed,
                    stages=[stage], fingerprints_before=before, fingerprints_after=after,
                    wall_clock_seconds=time.perf_counter() - t0)


def train_a_cft(dataset: TaskDataset, store: ParameterStore,
                policy: TrainPolicy) -> TrainRun:
    """Two stages: bank-only training, then whole-model adaptation at the
    cautious rate (a tenth of the adaptation rate).  Earlier banks stay frozen."""
    t0 = time.perf_counter()
    frozen_banks = {bank_group(t) for t in store.registry.task_ids}
    run = train_a_freeze(dataset, store, policy)
    task_id = run.task_id
    notes = [f"stage2_lr={policy.resolved_cautious_lr:g}"]
    if policy.epochs_stage2 > 0:
        before2 = store.fingerprints()
        bank = store.registry.get(task_id)
        stage2 = _run_stage(store, dataset.train, stage="adapt_cautious", task_id=task_id,
                            lr=policy.resolved_cautious_lr, epochs=policy.epochs_stage2,
                            policy=policy,
                            trainable=set(SHARED_GROUPS) | {bank_group(task_id)},
                            bank=bank)
        after = store.fingerprints()
        _check_frozen(before2, after, frozen_banks)
        run.stages.append(stage2)
        run.fingerprints_after = after
        store.registry.record_shared_fingerprint(task_id, store.shared_fingerprint())
    else:
        notes.append("stage2 skipped (0 epochs): reduces to the frozen variant")
    run.method = "adapter_cautious"
    run.notes.extend(notes)
    run.wall_clock_seconds = time.perf_counter() - t0
    return run


def train_lwf(dataset: TaskDataset, store: ParameterStore,
              policy: TrainPolicy) -> TrainRun:
    """Fine-tune with a distillation pull toward the pre-task model's decoder
    distributions, computed on the new task's own batches."""
    t0 = time.perf_counter()
    before = store.fingerprints()
    task_id = dataset.task_id
    teacher = store.model.clone()
    stage = _run_stage(store, dataset.train, stage="lwf", task_id=task_id,
                       lr=policy.resolved_lr_ft, epochs=policy.epochs_adapt,
                       policy=policy, trainable=set(SHARED_GROUPS),
                       teacher=teacher, distill_on="batch")
    return TrainRun(method="lwf", task_id=task_id, seed=policy.seed, stages=[stage],
                    fingerprints_before=before, fingerprints_after=store.fingerprints(),
                    wall_clock_seconds=time.perf_counter() - t0,
                    notes=[f"distill_weight={policy.distill_weight:g}"])


def train_er(dataset: TaskDataset, store: ParameterStore, memory: RehearsalMemory,
             policy: TrainPolicy) -> TrainRun:
    """Joint steps on the new batch and a memory batch; memory rebalanced after."""
    t0 = time.perf_counter()
    before = store.fingerprints()
    task_id = dataset.task_id
    stage = _run_stage(store, dataset.train, stage="er", task_id=task_id,
                       lr=policy.resolved_lr_ft, epochs=policy.epochs_adapt,
                       policy=policy, trainable=set(SHARED_GROUPS),
                       memory=memory, rehearse=True)
    memory.rebalance(task_id, dataset.train, policy.seed)
    return TrainRun(method="er", task_id=task_id, seed=policy.seed, stages=[stage],
                    fingerprints_before=before, fingerprints_after=store.fingerprints(),
                    wall_clock_seconds=time.perf_counter() - t0)


def train_kd(dataset: TaskDataset, store: ParameterStore, memory: RehearsalMemory,
             policy: TrainPolicy) -> TrainRun:
    """Fine-tune with distillation from the pre-task model on memory batches."""
    t0 = time.perf_counter()
    before = store.fingerprints()
    task_id = dataset.task_id
    teacher = store.model.clone()
    stage = _run_stage(store, dataset.train, stage="kd", task_id=task_id,
                       lr=policy.resolved_lr_ft, epochs=policy.epochs_adapt,
                       policy=policy, trainable=set(SHARED_GROUPS),
                       teacher=teacher, distill_on="memory", memory=memory)
    memory.rebalance(task_id, dataset.train, policy.seed)
    return TrainRun(method="kd", task_id=task_id, seed=policy.seed, stages=[stage],
                    fingerprints_before=before, fingerprints_after=store.fingerprints(),
                    wall_clock_seconds=time.perf_counter() - t0,
                    notes=[f"distill_weight={policy.distill_weight:g}"])


def train_separate(dataset: TaskDataset, store: ParameterStore, policy: TrainPolicy,
                   scope: str = "full") -> TrainRun:
    """Per-task model bounds: the caller snapshots the store after each task.

    ``full`` trains everything; ``encoder`` freezes the decoder group after
    task 1; ``encoder_ff`` trains only the encoder feedforward group.
    """
    if scope not in ("full", "encoder", "encoder_ff"):
        raise ValueError(f"unknown separate-training scope {scope!r}")
    t0 = time.perf_counter()
    before = store.fingerprints()
    task_id = dataset.task_id
    if scope == "full":
        trainable = set(SHARED_GROUPS)
    elif scope == "encoder":
        trainable = set(SHARED_GROUPS) - {"decoder"}
    else:
        trainable = {"encoder-feedforward"}
    stage = _run_stage(store, dataset.train, stage=f"separate_{scope}", task_id=task_id,
                       lr=policy.resolved_lr_ft, epochs=policy.epochs_adapt,
                       policy=policy, trainable=trainable)
    after = store.fingerprints()
    _check_frozen(before, after, set(SHARED_GROUPS) - trainable)
    return TrainRun(method=f"separate_{scope}", task_id=task_id, seed=policy.seed,
                    stages=[stage], fingerprints_before=before, fingerprints_after=after,
                    wall_clock_seconds=time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# weight-decay strength selection
# ---------------------------------------------------------------------------

@dataclass
class DecaySelection:
    selected_exponent: float | None
    reference_wer: float
    evaluated: list[tuple[float, float]]   # (omega, dev WER) in search order
    tolerance: float

    def to_dict(self) -> dict:
        return {"selected_exponent": self.selected_exponent,
                "reference_wer": self.reference_wer,
                "evaluated": [list(pair) for pair in self.evaluated],
                "tolerance": self.tolerance}


def decay_candidate_passes(candidate_wer: float, reference_wer: float,
                           tolerance: float = 0.01) -> bool:
    """At most ``tolerance`` (relative) worse than the no-decay reference."""
    return candidate_wer <= reference_wer * (1.0 + tolerance)


def pick_decay_exponent(evaluated: list[tuple[float, float]], reference_wer: float,
                        tolerance: float = 0.01) -> float | None:
    """Largest (least negative) exponent meeting the tolerance, else None."""
    for omega, wer_value in sorted(evaluated, key=lambda p: -p[0]):
        if decay_candidate_passes(wer_value, reference_wer, tolerance):
            return omega
    return None


def select_weight_decay(dataset: TaskDataset, store_factory, policy: TrainPolicy,
                        candidates: list[float], tolerance: float = 0.01,
                        beam_width: int = 4, exhaustive: bool = False) -> DecaySelection:
    """Pick the largest negative exponent whose first-task dev WER is at most
    ``tolerance`` worse than training without decay.

    Trains a no-decay reference, then candidates from the largest exponent
    down, stopping at the first pass (or evaluating all of them when
    ``exhaustive``).  When every candidate fails, returns a no-decay
    sentinel (``selected_exponent=None``) and logs the fallback.
    """
    candidates = sorted(candidates, reverse=True)
    if any(w >= 0 for w in candidates):
        raise ValueError("decay exponents must be negative")

    def run_with(exponent: float | None) -> float:
        trial_policy = TrainPolicy(**{**policy.to_dict(),
                                      "weight_decay_exponent": exponent})
        store = store_factory()
        train_initial(dataset, store, trial_policy)
        bank = store.registry.get(1) if store.use_adapters else None
        decoder = Decoder(store.model, beam_width=beam_width)
        return evaluate_corpus_wer(decoder, dataset.dev, bank)

    reference = run_with(None)
    evaluated: list[tuple[float, float]] = []
    selected = None
    for omega in candidates:
        wer_value = run_with(omega)
        evaluated.append((omega, wer_value))
        if decay_candidate_passes(wer_value, reference, tolerance):
            selected = omega
            if not exhaustive:
                break
    if selected is None:
        log.warning("no weight-decay candidate stayed within %.1f%% of the "
                    "no-decay reference; falling back to no decay", 100 * tolerance)
    elif exhaustive:
        selected = pick_decay_exponent(evaluated, reference, tolerance)
    return DecaySelection(selected_exponent=selected, reference_wer=reference,
                          evaluated=evaluated, tolerance=tolerance)
