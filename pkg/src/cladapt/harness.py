"""Experiment runner: sequential tasks, evaluation rows, checkpoints, reports.

One run directory corresponds to one (config, seed) pair and contains
``config.json``, ``task_<t>/checkpoint.bin``, ``task_<t>/matrix_row.json``,
``task_<t>/train_log.json``, ``report.txt`` and ``report.json``.  Configs
with several seeds write one sub-run per seed plus a combined report.

The sequential-training protocol is enforced by an access guard: when task
t starts, the train splits of tasks < t are sealed, and any read outside
the rehearsal memory aborts the run.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import load_checkpoint, read_header, save_checkpoint
from .decoding import Decoder
from .metrics import ResultMatrix, corpus_wer, summarize
from .model import Model, ModelConfig, Utterance
from .taskgen import TaskDataset, TaskSpec, generate_task
from .training import (
    ParameterStore,
    RehearsalMemory,
    TrainPolicy,
    train_a_cft,
    train_a_freeze,
    train_er,
    train_fine_tune,
    train_initial,
    train_kd,
    train_lwf,
    train_separate,
    uses_adapters,
    uses_memory,
)

log = logging.getLogger(__name__)

EVAL_MODES = ("task_label", "conf_infer", "avg_apt")


class ConfigError(ValueError):
    """Invalid or conflicting experiment configuration."""


@dataclass
class ExperimentConfig:
    tasks: list[TaskSpec]
    policy: TrainPolicy
    model: ModelConfig
    eval_modes: list[str] = field(default_factory=lambda: ["task_label"])
    seeds: list[int] = field(default_factory=lambda: [0])
    beam_width: int = 4
    output_dir: str = "runs/experiment"
    wd_candidates: list[float] | None = None

    def __post_init__(self):
        if not self.tasks:
            raise ConfigError("config needs at least one task")
        ids = [s.task_id for s in self.tasks]
        if ids != list(range(1, len(ids) + 1)):
            raise ConfigError(f"task ids must be contiguous 1..T, got {ids}")
        for spec in self.tasks:
            if spec.vocab_size != self.model.vocab_size:
                raise ConfigError(
                    f"task {spec.task_id} vocab {spec.vocab_size} != model "
                    f"vocab {self.model.vocab_size}")
            if spec.feature_dim != self.model.feature_dim:
                raise ConfigError(
                    f"task {spec.task_id} feature dim {spec.feature_dim} != "
                    f"model feature dim {self.model.feature_dim}")
        bad = [m for m in self.eval_modes if m not in EVAL_MODES]
        if bad:
            raise ConfigError(f"unknown eval modes {bad}; expected subset of {EVAL_MODES}")
        if not uses_adapters(self.policy.method):
            label_free = [m for m in self.eval_modes if m != "task_label"]
            if label_free:
                raise ConfigError(
                    f"eval modes {label_free} need adapter banks, but method "
                    f"{self.policy.method!r} trains none")
        if not self.seeds:
            raise ConfigError("config needs at least one seed")

    def to_dict(self) -> dict:
        return {
            "tasks": [s.to_dict() for s in self.tasks],
            "policy": self.policy.to_dict(),
            "model": self.model.to_dict(),
            "eval_modes": list(self.eval_modes),
            "seeds": list(self.seeds),
            "beam_width": self.beam_width,
            "output_dir": self.output_dir,
            "wd_candidates": self.wd_candidates,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            tasks=[TaskSpec.from_dict(t) for t in d["tasks"]],
            policy=TrainPolicy.from_dict(d["policy"]),
            model=ModelConfig.from_dict(d["model"]),
            eval_modes=list(d.get("eval_modes", ["task_label"])),
            seeds=list(d.get("seeds", [0])),
            beam_width=int(d.get("beam_width", 4)),
            output_dir=d.get("output_dir", "runs/experiment"),
            wd_candidates=d.get("wd_candidates"),
        )

    def canonical_json(self) -> str:
        content = self.to_dict()
        content.pop("output_dir")  # location, not identity
        return json.dumps(content, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


# ---------------------------------------------------------------------------
# single (config, seed) run
# ---------------------------------------------------------------------------

def _task_dir(run_dir: str, t: int) -> str:
    return os.path.join(run_dir, f"task_{t}")


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _write_run_config(run_dir: str, config: ExperimentConfig, seed: int) -> None:
    existing = os.path.join(run_dir, "config.json")
    payload = {"config": config.to_dict(), "config_hash": config.config_hash(),
               "seed": seed}
    if os.path.exists(existing):
        with open(existing, encoding="utf-8") as fh:
            stored = json.load(fh)
        if stored.get("config_hash") == payload["config_hash"]:
            if stored.get("config") != payload["config"] or stored.get("seed") != seed:
                raise ConfigError(
                    "config hash collision: stored config differs from the new one "
                    "under the same hash")
            return  # identical config: resume is allowed
        raise ConfigError(
            f"run directory {run_dir} already belongs to config "
            f"{stored.get('config_hash', '?')[:12]}")
    _write_json(existing, payload)


MEMORY_FILE = "memory.bin"


def _save_memory(path: str, memory: RehearsalMemory) -> None:
    records = []
    blob = bytearray()
    for u in memory.items:
        raw = u.frames.astype("<f4").tobytes()
        records.append({"utt_id": u.utt_id, "task_id": u.task_id,
                        "tokens": list(u.tokens), "offset": len(blob),
                        "frame_count": u.frames.shape[0],
                        "feature_dim": u.frames.shape[1]})
        blob.extend(raw)
    header = json.dumps({"capacity": memory.capacity, "records": records},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(bytes(blob))


def _load_memory(path: str) -> RehearsalMemory:
    with open(path, "rb") as fh:
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode())
        blob = fh.read()
    items = []
    for rec in header["records"]:
        start = rec["offset"]
        count = rec["frame_count"] * rec["feature_dim"] * 4
        frames = np.frombuffer(blob[start:start + count], dtype="<f4").reshape(
            rec["frame_count"], rec["feature_dim"]).astype(np.float64)
        items.append(Utterance(frames=frames, tokens=tuple(rec["tokens"]),
                               task_id=rec["task_id"], utt_id=rec["utt_id"]))
    return RehearsalMemory(capacity=header["capacity"], items=items)


def _train_task(store: ParameterStore, datasets: list[TaskDataset], t: int,
                policy: TrainPolicy, memory: RehearsalMemory | None):
    """Dispatch one task's training; task 1 is always the initial joint run."""
    ds = datasets[t - 1]
    if t == 1:
        return train_initial(ds, store, policy)
    method = policy.method
    if method == "fine_tune":
        return train_fine_tune(ds, store, policy)
    if method == "adapter_freeze":
        return train_a_freeze(ds, store, policy)
    if method == "adapter_cautious":
        return train_a_cft(ds, store, policy)
    if method == "lwf":
        return train_lwf(ds, store, policy)
    if method == "er":
        return train_er(ds, store, memory, policy)
    if method == "kd":
        return train_kd(ds, store, memory, policy)
    if method in ("sep_model", "sep_encoder", "sep_encoder_ff"):
        scope = {"sep_model": "full", "sep_encoder": "encoder",
                 "sep_encoder_ff": "encoder_ff"}[method]
        return train_separate(ds, store, policy, scope=scope)
    raise ConfigError(f"no training dispatch for method {method!r}")


def _evaluate_rows(config: ExperimentConfig, run_dir: str, store: ParameterStore,
                   datasets: list[TaskDataset], t: int,
                   matrices: dict[str, ResultMatrix]) -> dict:
    """Fill R[t][1..t] for every requested mode; returns the row payload."""
    method = config.policy.method
    separate = method.startswith("sep_")
    row: dict[str, dict[str, float]] = {mode: {} for mode in config.eval_modes}
    for mode in config.eval_modes:
        if mode == "task_label":
            for j in range(1, t + 1):
                test = datasets[j - 1].test
                if separate:
                    snap_store, _ = load_checkpoint(
                        os.path.join(_task_dir(run_dir, j), "checkpoint.bin"))
                    decoder = Decoder(snap_store.model, beam_width=config.beam_width)
                    hyps = decoder.decode_many(test)
                else:
                    decoder = Decoder(store.model, beam_width=config.beam_width)
                    bank = store.registry.get(j) if uses_adapters(method) else None
                    hyps = decoder.decode_many(test, bank)
                wer = corpus_wer((u.tokens, h.tokens) for u, h in zip(test, hyps))
                matrices[mode].set(t, j, wer)
                row[mode][str(j)] = wer
        else:
            decoder = Decoder(store.model, beam_width=config.beam_width)
            for j in range(1, t + 1):
                test = datasets[j - 1].test
                if mode == "conf_infer":
                    pairs = decoder.conf_infer_many(test, store.registry)
                    hyps = [h for h, _ in pairs]
                else:
                    hyps = decoder.avg_apt_decode_many(test, store.registry)
                wer = corpus_wer((u.tokens, h.tokens) for u, h in zip(test, hyps))
                matrices[mode].set(t, j, wer)
                row[mode][str(j)] = wer
    return row


@dataclass
class SeedRunResult:
    seed: int
    run_dir: str
    matrices: dict[str, ResultMatrix]
    shared_params: int
    bank_params: int | None


def run_single_seed(config: ExperimentConfig, seed: int, run_dir: str) -> SeedRunResult:
    os.makedirs(run_dir, exist_ok=True)
    _write_run_config(run_dir, config, seed)
    policy = TrainPolicy(**{**config.policy.to_dict(), "seed": seed})
    method = policy.method
    datasets = [generate_task(spec) for spec in config.tasks]
    T = len(datasets)
    store = ParameterStore(Model(config.model, seed=seed), uses_adapters(method),
                           policy.adapter_dim)
    memory = RehearsalMemory(policy.memory_capacity) if uses_memory(method) else None
    matrices = {mode: ResultMatrix(num_tasks=T, mode=mode) for mode in config.eval_modes}

    start_task = 1
    resumed = _find_resume_point(run_dir, config, T)
    if resumed:
        start_task = resumed + 1
        ckpt = os.path.join(_task_dir(run_dir, resumed), "checkpoint.bin")
        store, _ = load_checkpoint(ckpt)
        if memory is not None:
            memory = _load_memory(os.path.join(_task_dir(run_dir, resumed), MEMORY_FILE))
        for t in range(1, resumed + 1):
            with open(os.path.join(_task_dir(run_dir, t), "matrix_row.json"),
                      encoding="utf-8") as fh:
                saved = json.load(fh)
            for mode, entries in saved["row"].items():
                if mode in matrices:
                    for j, wer in entries.items():
                        matrices[mode].set(t, int(j), wer)
        log.info("resuming %s after completed task %d", run_dir, resumed)

    for t in range(start_task, T + 1):
        for old in datasets[: t - 1]:
            old.seal_train()  # protocol: earlier train data is gone now
        train_run = _train_task(store, datasets, t, policy, memory)
        task_dir = _task_dir(run_dir, t)
        os.makedirs(task_dir, exist_ok=True)
        save_checkpoint(os.path.join(task_dir, "checkpoint.bin"), store,
                        provenance={"config_hash": config.config_hash(),
                                    "task_index": t, "stage": "complete",
                                    "seed": seed})
        if t == 1 and memory is not None:
            memory.rebalance(1, datasets[0].train, policy.seed)
        if memory is not None:
            _save_memory(os.path.join(task_dir, MEMORY_FILE), memory)
        row = _evaluate_rows(config, run_dir, store, datasets, t, matrices)
        _write_json(os.path.join(task_dir, "matrix_row.json"),
                    {"task_index": t, "row": row})
        _write_json(os.path.join(task_dir, "train_log.json"), train_run.to_dict())

    bank_params = None
    if uses_adapters(method) and len(store.registry):
        bank_params = store.registry.get(1).parameter_count()
    result = SeedRunResult(seed=seed, run_dir=run_dir, matrices=matrices,
                           shared_params=store.model.parameter_count(),
                           bank_params=bank_params)
    records = [RunRecord(method=method, mode=mode, seed=seed, matrix=m,
                         shared_params=result.shared_params, bank_params=bank_params)
               for mode, m in matrices.items()]
    text, payload = emit_report(records)
    with open(os.path.join(run_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    _write_json(os.path.join(run_dir, "report.json"), payload)
    return result


def _find_resume_point(run_dir: str, config: ExperimentConfig, T: int) -> int:
    """Index of the last completed task recorded on disk for this config (0 if none)."""
    done = 0
    for t in range(1, T + 1):
        ckpt = os.path.join(_task_dir(run_dir, t), "checkpoint.bin")
        row = os.path.join(_task_dir(run_dir, t), "matrix_row.json")
        if not (os.path.exists(ckpt) and os.path.exists(row)):
            break
        try:
            prov = read_header(ckpt).get("provenance", {})
        except Exception:
            break
        if prov.get("config_hash") != config.config_hash() or prov.get("stage") != "complete":
            break
        done = t
    return done


def run_experiment(config: ExperimentConfig) -> list[SeedRunResult]:
    """Run every seed of the config; sub-runs land in seed_<s>/ when several."""
    results = []
    for seed in config.seeds:
        run_dir = config.output_dir if len(config.seeds) == 1 else \
            os.path.join(config.output_dir, f"seed_{seed}")
        results.append(run_single_seed(config, seed, run_dir))
    if len(config.seeds) > 1:
        records = []
        for res in results:
            for mode, m in res.matrices.items():
                records.append(RunRecord(method=config.policy.method, mode=mode,
                                         seed=res.seed, matrix=m,
                                         shared_params=res.shared_params,
                                         bank_params=res.bank_params))
        text, payload = emit_report(records)
        os.makedirs(config.output_dir, exist_ok=True)
        with open(os.path.join(config.output_dir, "report.txt"), "w",
                  encoding="utf-8") as fh:
            fh.write(text)
        _write_json(os.path.join(config.output_dir, "report.json"), payload)
    return results


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------

@dataclass
class RunRecord:
    method: str
    mode: str
    seed: int
    matrix: ResultMatrix
    shared_params: int | None = None
    bank_params: int | None = None


def _fmt(value, width=7) -> str:
    if value is None:
        return "n/a".rjust(width)
    return f"{round(value, 1):.1f}".rjust(width)


def emit_report(records: list[RunRecord]) -> tuple[str, dict]:
    """Rows of per-task WER plus AVG/BWT/FWT/COV, one per (method, mode, seed).

    FWT and COV need a plain fine-tuning run (and, for COV, a separate-models
    run) of the same seed; rows without them carry an explaining notice.
    The text table rounds half-even to one decimal; the machine-readable
    payload keeps full precision.
    """
    if not records:
        raise ValueError("emit_report needs at least one run record")
    T = records[0].matrix.num_tasks
    if any(r.matrix.num_tasks != T for r in records):
        raise ValueError("all records in one report must share the task count")
    ft = {r.seed: r for r in records if r.method == "fine_tune" and r.mode == "task_label"}
    sep = {r.seed: r for r in records if r.method == "sep_model" and r.mode == "task_label"}
    notices = []
    if not ft:
        notices.append("COV/FWT undefined: no fine_tune baseline run in this report")
    if not sep:
        notices.append("COV undefined: no sep_model bound run in this report")

    rows = []
    for rec in sorted(records, key=lambda r: (r.method, r.mode, r.seed)):
        ft_rec = ft.get(rec.seed)
        sep_rec = sep.get(rec.seed)
        summary = summarize(
            rec.matrix,
            ft_diagonal=ft_rec.matrix.diagonal() if ft_rec and T >= 2 else None,
            avg_ft=summarize(ft_rec.matrix).avg if ft_rec and sep_rec else None,
            avg_sep=summarize(sep_rec.matrix).avg if ft_rec and sep_rec else None,
        )
        tasks_to_double = None
        if rec.bank_params:
            tasks_to_double = round(rec.shared_params / rec.bank_params)
        rows.append({
            "method": rec.method,
            "mode": rec.mode,
            "seed": rec.seed,
            "needs_task_label": rec.mode == "task_label" and rec.method.startswith(("adapter", "sep")),
            "per_task_wer": rec.matrix.final_row(),
            "avg": summary.avg,
            "bwt": summary.bwt,
            "fwt": summary.fwt,
            "cov": summary.cov,
            "shared_params": rec.shared_params,
            "bank_params": rec.bank_params,
            "tasks_to_double_storage": tasks_to_double,
        })

    medians = []
    by_key: dict[tuple[str, str], list[dict]] = {}
    for row in rows:
        by_key.setdefault((row["method"], row["mode"]), []).append(row)
    for (method, mode), group in sorted(by_key.items()):
        if len(group) < 2:
            continue
        med = {"method": method, "mode": mode, "seeds": [g["seed"] for g in group]}
        for key in ("avg", "bwt", "fwt", "cov"):
            values = [g[key] for g in group if g[key] is not None]
            med[key] = float(np.median(values)) if values else None
        medians.append(med)

    header = (f"{'method':<18} {'mode':<11} {'seed':>4} "
              + " ".join(f"T{j:<6}" for j in range(1, T + 1))
              + f" {'AVG':>7} {'BWT':>7} {'FWT':>7} {'COV%':>7} {'x2-tasks':>9}")
    lines = [header, "-" * len(header)]
    for row in rows:
        per_task = " ".join(_fmt(w) for w in row["per_task_wer"])
        double = "" if row["tasks_to_double_storage"] is None else \
            str(row["tasks_to_double_storage"]).rjust(9)
        lines.append(
            f"{row['method']:<18} {row['mode']:<11} {row['seed']:>4} {per_task} "
            f"{_fmt(row['avg'])} {_fmt(row['bwt'])} {_fmt(row['fwt'])} "
            f"{_fmt(row['cov'])} {double}")
    if medians:
        lines.append("")
        lines.append("median over seeds:")
        for med in medians:
            lines.append(
                f"{med['method']:<18} {med['mode']:<11} {'med':>4} "
                + " " * (8 * T)
                + f"{_fmt(med['avg'])} {_fmt(med['bwt'])} {_fmt(med['fwt'])} "
                  f"{_fmt(med['cov'])}")
    for notice in notices:
        lines.append(f"note: {notice}")
    text = "\n".join(lines) + "\n"
    payload = {"rows": rows, "medians": medians, "notices": notices, "num_tasks": T}
    return text, payload


def load_run_records(run_dir: str) -> list[RunRecord]:
    """Rebuild report records from a run directory (or its seed_* sub-runs)."""
    subdirs = sorted(d for d in os.listdir(run_dir)
                     if d.startswith("seed_") and
                     os.path.isdir(os.path.join(run_dir, d)))
    if subdirs and not os.path.exists(os.path.join(run_dir, "config.json")):
        records = []
        for sub in subdirs:
            records.extend(load_run_records(os.path.join(run_dir, sub)))
        return records
    with open(os.path.join(run_dir, "config.json"), encoding="utf-8") as fh:
        stored = json.load(fh)
    config = ExperimentConfig.from_dict(stored["config"])
    seed = stored["seed"]
    T = len(config.tasks)
    matrices = {mode: ResultMatrix(num_tasks=T, mode=mode) for mode in config.eval_modes}
    for t in range(1, T + 1):
        row_path = os.path.join(_task_dir(run_dir, t), "matrix_row.json")
        if not os.path.exists(row_path):
            raise ConfigError(f"{run_dir} is incomplete: missing {row_path}")
        with open(row_path, encoding="utf-8") as fh:
            saved = json.load(fh)
        for mode, entries in saved["row"].items():
            for j, wer in entries.items():
                matrices[mode].set(t, int(j), wer)
    last_ckpt = os.path.join(_task_dir(run_dir, T), "checkpoint.bin")
    shared_params = bank_params = None
    if os.path.exists(last_ckpt):
        header = read_header(last_ckpt)
        shared = [e for e in header["tensors"] if e["name"].startswith("shared.")]
        shared_params = int(sum(np.prod(e["shape"]) for e in shared))
        bank1 = [e for e in header["tensors"] if e["name"].startswith("bank_1.")]
        if bank1:
            bank_params = int(sum(np.prod(e["shape"]) for e in bank1))
    return [RunRecord(method=config.policy.method, mode=mode, seed=seed, matrix=m,
                      shared_params=shared_params, bank_params=bank_params)
            for mode, m in matrices.items()]
