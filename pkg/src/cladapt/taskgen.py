"""Deterministic synthetic "dialect" tasks that interfere when learned in sequence.

Tokens are drawn uniformly from a shared lexicon.  Each task renders a
token as its base embedding (shared across tasks), optionally remapped by a
task-specific substitution table, repeated a fixed number of frames,
rotated by a task-specific orthogonal transform, and perturbed with
Gaussian noise.  Substitutions flip which label a sound maps to; rotations
shift the acoustic channel; together they make naive sequential training
forget earlier tasks.

Corpora are pure functions of their spec: every utterance draws from a
counter-based stream keyed by (content hash, utterance index), so
generation order and thread count cannot change a single byte.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from . import rng as rngmod
from .model import NUM_SPECIALS, Utterance

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.jsonl"
FRAMES_NAME = "frames.bin"


class DataIntegrityError(ValueError):
    """A manifest or blob failed verification."""


class ProtocolViolationError(RuntimeError):
    """Training data of a finished task was read outside the rehearsal memory."""


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    vocab_size: int = 34              # 32 content tokens + blank + sentinel
    feature_dim: int = 16
    frames_per_token: int = 3
    rotation_seed: int = 0
    rotation_strength: float = 1.0    # 0 -> identity transform
    subst_seed: int = 0
    subst_fraction: float = 0.3
    subst_symbols: tuple[int, ...] | None = None  # explicit override of the permuted set
    noise_sigma: float = 0.1
    n_train: int = 2000
    n_dev: int = 250
    n_test: int = 250
    min_tokens: int = 3
    max_tokens: int = 8
    base_seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be >= 4 (two specials + two content tokens)")
        if self.frames_per_token < 1:
            raise ValueError("frames_per_token must be >= 1")
        if not 0.0 <= self.subst_fraction <= 1.0:
            raise ValueError("subst_fraction must lie in [0, 1]")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ValueError("need 1 <= min_tokens <= max_tokens")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.subst_symbols is not None:
            bad = [s for s in self.subst_symbols if not NUM_SPECIALS <= s < self.vocab_size]
            if bad:
                raise ValueError(f"subst_symbols outside the content range: {bad}")

    @property
    def content_tokens(self) -> np.ndarray:
        return np.arange(NUM_SPECIALS, self.vocab_size)

    def to_dict(self) -> dict:
        d = {
            "task_id": self.task_id,
            "vocab_size": self.vocab_size,
            "feature_dim": self.feature_dim,
            "frames_per_token": self.frames_per_token,
            "rotation_seed": self.rotation_seed,
            "rotation_strength": self.rotation_strength,
            "subst_seed": self.subst_seed,
            "subst_fraction": self.subst_fraction,
            "subst_symbols": list(self.subst_symbols) if self.subst_symbols is not None else None,
            "noise_sigma": self.noise_sigma,
            "n_train": self.n_train,
            "n_dev": self.n_dev,
            "n_test": self.n_test,
            "min_tokens": self.min_tokens,
            "max_tokens": self.max_tokens,
            "base_seed": self.base_seed,
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        d = dict(d)
        if d.get("subst_symbols") is not None:
            d["subst_symbols"] = tuple(d["subst_symbols"])
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def spec_hash(self) -> str:
        """Identity of the full spec, task_id included (manifest integrity)."""
        return _sha256_hex(self.canonical_json().encode())

    def content_hash(self) -> bytes:
        """Identity of everything that shapes the data; task_id excluded, so
        two specs that differ only in task_id generate identical corpora."""
        d = self.to_dict()
        d.pop("task_id")
        return _sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode())


def _sha256(data: bytes) -> bytes:
    import hashlib

    return hashlib.sha256(data).digest()


def _sha256_hex(data: bytes) -> str:
    import hashlib

    return hashlib.sha256(data).hexdigest()


@dataclass
class TaskDataset:
    spec: TaskSpec
    dev: list[Utterance]
    test: list[Utterance]
    _train: list[Utterance] = field(default_factory=list, repr=False)
    _train_sealed: bool = False

    @property
    def train(self) -> list[Utterance]:
        if self._train_sealed:
            raise ProtocolViolationError(
                f"train split of task {self.spec.task_id} was sealed when the next task "
                "started; only the rehearsal memory may retain earlier training data")
        return self._train

    def seal_train(self) -> None:
        self._train_sealed = True

    @property
    def task_id(self) -> int:
        return self.spec.task_id


def rotation_matrix(spec: TaskSpec) -> np.ndarray:
    """Orthogonal transform; strength 0 is the exact identity."""
    if spec.rotation_strength == 0.0:
        return np.eye(spec.feature_dim)
    f = spec.feature_dim
    g = rngmod.generator("rotation", spec.rotation_seed, f).normal(size=(f, f))
    skew = (g - g.T) / (2.0 * np.sqrt(f))
    return expm(spec.rotation_strength * skew)


def substitution_map(spec: TaskSpec) -> np.ndarray:
    """token id -> rendered token id; a permutation on the chosen subset.

    The chosen subset is either given explicitly or seeded at a
    ``subst_fraction`` of the lexicon; the permutation is a seeded cyclic
    shift, so any subset of two or more symbols has no fixed points.
    """
    mapping = np.arange(spec.vocab_size)
    content = spec.content_tokens
    if spec.subst_symbols is not None:
        chosen = np.array(sorted(spec.subst_symbols), dtype=np.int64)
    else:
        k = int(round(spec.subst_fraction * content.size))
        if k == 0:
            return mapping
        gen = rngmod.generator("subst-choice", spec.subst_seed)
        chosen = np.sort(gen.choice(content, size=k, replace=False))
    if chosen.size >= 2:
        order = rngmod.generator("subst-perm", spec.subst_seed).permutation(chosen)
        mapping[order] = np.roll(order, 1)
    return mapping


def base_embeddings(spec: TaskSpec) -> np.ndarray:
    """Shared per-token embeddings; row t is the rendering of token id t."""
    gen = rngmod.generator("base-embed", spec.base_seed, spec.feature_dim)
    table = np.zeros((spec.vocab_size, spec.feature_dim))
    table[NUM_SPECIALS:] = gen.normal(size=(spec.vocab_size - NUM_SPECIALS, spec.feature_dim))
    return table


def _render_utterance(spec: TaskSpec, index: int, table: np.ndarray, rot: np.ndarray,
                      sub: np.ndarray) -> Utterance:
    gen = rngmod.generator("utt", spec.content_hash(), index)
    n = int(gen.integers(spec.min_tokens, spec.max_tokens + 1))
    content = spec.content_tokens
    tokens = content[gen.integers(0, content.size, size=n)]
    emb = table[sub[tokens]]                         # n x f
    frames = np.repeat(emb, spec.frames_per_token, axis=0) @ rot.T
    if spec.noise_sigma > 0:
        frames = frames + gen.normal(size=frames.shape) * spec.noise_sigma
    frames = frames.astype(np.float32).astype(np.float64)  # stored as float32
    return Utterance(frames=frames, tokens=tuple(int(t) for t in tokens),
                     task_id=spec.task_id, utt_id=f"t{spec.task_id}-u{index:06d}")


def generate_task(spec: TaskSpec) -> TaskDataset:
    """Synthesize the full task corpus with disjoint 80/10/10-style splits."""
    table = base_embeddings(spec)
    rot = rotation_matrix(spec)
    sub = substitution_map(spec)
    total = spec.n_train + spec.n_dev + spec.n_test
    utts = [_render_utterance(spec, i, table, rot, sub) for i in range(total)]
    perm = rngmod.generator("split", spec.content_hash()).permutation(total)
    train_ids = np.sort(perm[: spec.n_train])
    dev_ids = np.sort(perm[spec.n_train: spec.n_train + spec.n_dev])
    test_ids = np.sort(perm[spec.n_train + spec.n_dev:])
    return TaskDataset(
        spec=spec,
        _train=[utts[i] for i in train_ids],
        dev=[utts[i] for i in dev_ids],
        test=[utts[i] for i in test_ids],
    )


def interference_suite(num_tasks: int = 3, **overrides) -> list[TaskSpec]:
    """Task sequence with disjoint substitution tables and distinct rotations.

    Disjoint tables guarantee that no two tasks agree on the remapped
    symbols, which is what makes sequential fine-tuning forget and what
    separates the tasks for label-free decoding.
    """
    proto = TaskSpec(task_id=1, **overrides)
    content = proto.content_tokens
    block = int(round(proto.subst_fraction * content.size))
    if num_tasks * block > content.size:
        raise ValueError(
            f"{num_tasks} disjoint substitution blocks of {block} symbols exceed the "
            f"lexicon of {content.size}")
    specs = []
    for t in range(1, num_tasks + 1):
        chosen = tuple(int(s) for s in content[(t - 1) * block: t * block])
        specs.append(replace(proto, task_id=t, rotation_seed=t, subst_seed=t,
                             subst_symbols=chosen))
    return specs


# ---------------------------------------------------------------------------
# persistence: JSON-lines manifest + raw float32 frame blob
# ---------------------------------------------------------------------------

def write_manifest(dataset: TaskDataset, out_dir: str) -> str:
    """Write ``manifest.jsonl`` + ``frames.bin`` into ``out_dir``; returns the dir."""
    os.makedirs(out_dir, exist_ok=True)
    records = []
    offset = 0
    blob_path = os.path.join(out_dir, FRAMES_NAME)
    with open(blob_path, "wb") as blob:
        for split in ("train", "dev", "test"):
            utts = dataset._train if split == "train" else getattr(dataset, split)
            for utt in utts:
                raw = utt.frames.astype("<f4").tobytes()
                blob.write(raw)
                records.append({
                    "utt_id": utt.utt_id,
                    "task_id": utt.task_id,
                    "split": split,
                    "offset": offset,
                    "frame_count": utt.frames.shape[0],
                    "tokens": list(utt.tokens),
                })
                offset += len(raw)
    header = {
        "format_version": MANIFEST_VERSION,
        "kind": "task-manifest",
        "spec": dataset.spec.to_dict(),
        "spec_hash": dataset.spec.spec_hash(),
        "feature_dim": dataset.spec.feature_dim,
        "dtype": "float32-le",
        "counts": {"train": dataset.spec.n_train, "dev": dataset.spec.n_dev,
                   "test": dataset.spec.n_test},
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return out_dir


def load_manifest(path: str) -> TaskDataset:
    """Load a written task; verifies version, spec hash, and blob resolvability."""
    if os.path.isdir(path):
        manifest_path = os.path.join(path, MANIFEST_NAME)
    else:
        manifest_path = path
    blob_path = os.path.join(os.path.dirname(manifest_path), FRAMES_NAME)
    with open(manifest_path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataIntegrityError("manifest is empty")
    header = json.loads(lines[0])
    if header.get("format_version") != MANIFEST_VERSION:
        raise DataIntegrityError(
            f"unsupported manifest version {header.get('format_version')!r}, "
            f"expected {MANIFEST_VERSION}")
    spec = TaskSpec.from_dict(header["spec"])
    if spec.spec_hash() != header.get("spec_hash"):
        raise DataIntegrityError("spec hash does not match the embedded spec; refusing to load")
    blob_size = os.path.getsize(blob_path)
    item = np.dtype("<f4").itemsize
    f = spec.feature_dim
    splits: dict[str, list[Utterance]] = {"train": [], "dev": [], "test": []}
    with open(blob_path, "rb") as blob:
        for idx, line in enumerate(lines[1:]):
            rec = json.loads(line)
            nbytes = rec["frame_count"] * f * item
            if rec["offset"] + nbytes > blob_size:
                raise DataIntegrityError(
                    f"record {idx} ({rec['utt_id']}) needs bytes "
                    f"[{rec['offset']}, {rec['offset'] + nbytes}) but the frame blob "
                    f"has only {blob_size}")
            blob.seek(rec["offset"])
            raw = blob.read(nbytes)
            frames = np.frombuffer(raw, dtype="<f4").reshape(
                rec["frame_count"], f).astype(np.float64)
            splits[rec["split"]].append(Utterance(
                frames=frames, tokens=tuple(rec["tokens"]),
                task_id=rec["task_id"], utt_id=rec["utt_id"]))
    counts = header["counts"]
    for split, expected in (("train", counts["train"]), ("dev", counts["dev"]),
                            ("test", counts["test"])):
        if len(splits[split]) != expected:
            raise DataIntegrityError(
                f"{split} split has {len(splits[split])} records, header says {expected}")
    return TaskDataset(spec=spec, _train=splits["train"], dev=splits["dev"],
                       test=splits["test"])
