"""Token error rate and the four sequential-learning summary metrics.

All summaries read off a lower-triangular result matrix R where R[i][j] is
the WER (in percent) on task j's test set measured after training task i.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field


def levenshtein(ref, hyp) -> int:
    """Minimum edit distance with unit substitution/insertion/deletion costs."""
    ref, hyp = list(ref), list(hyp)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1,                      # deletion
                         cur[j - 1] + 1,                   # insertion
                         prev[j - 1] + (r != h))           # substitution / match
        prev = cur
    return prev[-1]


def wer(reference, hypothesis) -> float:
    """Edit distance over reference length, in percent."""
    reference = list(reference)
    if not reference:
        raise ValueError("wer: reference must be nonempty")
    return 100.0 * levenshtein(reference, hypothesis) / len(reference)


def corpus_wer(pairs) -> float:
    """Aggregate WER over (reference, hypothesis) pairs: total edits / total length."""
    edits = 0
    length = 0
    for ref, hyp in pairs:
        ref = list(ref)
        if not ref:
            raise ValueError("corpus_wer: empty reference")
        edits += levenshtein(ref, hyp)
        length += len(ref)
    if length == 0:
        raise ValueError("corpus_wer: no pairs")
    return 100.0 * edits / length


@dataclass
class ResultMatrix:
    """Lower-triangular WER matrix for one run, tagged with its decoding mode."""

    num_tasks: int
    mode: str = "task_label"
    entries: dict = field(default_factory=dict)  # (i, j) -> WER%, 1-based, j <= i

    def set(self, after_task: int, on_task: int, value: float) -> None:
        if not (1 <= on_task <= after_task <= self.num_tasks):
            raise ValueError(f"entry ({after_task}, {on_task}) outside the lower triangle")
        if value < 0:
            raise ValueError("WER entries must be >= 0")
        self.entries[(after_task, on_task)] = float(value)

    def get(self, after_task: int, on_task: int) -> float:
        return self.entries[(after_task, on_task)]

    def final_row(self) -> list[float]:
        T = self.num_tasks
        missing = [j for j in range(1, T + 1) if (T, j) not in self.entries]
        if missing:
            raise ValueError(f"final row incomplete, missing tasks {missing}")
        return [self.entries[(T, j)] for j in range(1, T + 1)]

    def diagonal(self) -> list[float]:
        missing = [i for i in range(1, self.num_tasks + 1) if (i, i) not in self.entries]
        if missing:
            raise ValueError(f"diagonal incomplete, missing tasks {missing}")
        return [self.entries[(i, i)] for i in range(1, self.num_tasks + 1)]

    def to_dict(self) -> dict:
        return {
            "num_tasks": self.num_tasks,
            "mode": self.mode,
            "entries": {f"{i},{j}": v for (i, j), v in sorted(self.entries.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ResultMatrix":
        m = cls(num_tasks=int(d["num_tasks"]), mode=d.get("mode", "task_label"))
        for key, v in d["entries"].items():
            i, j = (int(p) for p in key.split(","))
            m.set(i, j, float(v))
        return m


def avg(matrix: ResultMatrix) -> float:
    """Mean WER over all tasks after the last one was learned."""
    row = matrix.final_row()
    return sum(row) / len(row)


def bwt(matrix: ResultMatrix) -> float:
    """Mean change of earlier tasks' WER relative to when they were first learned.

    Negative values mean the final model got worse on old tasks (forgetting).
    """
    T = matrix.num_tasks
    if T < 2:
        raise ValueError("bwt needs at least two tasks")
    total = sum(matrix.get(i, i) - matrix.get(T, i) for i in range(1, T))
    return total / (T - 1)


def fwt(matrix: ResultMatrix, ft_diagonal) -> float:
    """Mean decrease of new-task WER relative to a plain fine-tuning run.

    The sum starts at task 2: task 1 has no previously-trained model to
    transfer from, so both runs coincide there by construction.
    """
    diag = matrix.diagonal()
    ft_diagonal = list(ft_diagonal)
    if len(ft_diagonal) != len(diag):
        raise ValueError(
            f"fwt: diagonals have different lengths ({len(ft_diagonal)} vs {len(diag)})")
    if len(diag) < 2:
        raise ValueError("fwt needs at least two tasks")
    total = sum(ft_diagonal[i] - diag[i] for i in range(1, len(diag)))
    return total / (len(diag) - 1)


def cov(avg_method: float, avg_ft: float, avg_sep: float) -> float:
    """Percentage of the fine-tune-to-separate-models AVG gap that is closed."""
    gap = avg_ft - avg_sep
    if math.isclose(gap, 0.0, abs_tol=1e-12):
        raise ValueError("cov is undefined: fine-tune and separate-model AVG coincide")
    return 100.0 * (avg_ft - avg_method) / gap


@dataclass
class Summary:
    """The four summary numbers for one (method, mode) run."""

    avg: float
    bwt: float | None = None
    fwt: float | None = None
    cov: float | None = None

    def to_dict(self) -> dict:
        return {"avg": self.avg, "bwt": self.bwt, "fwt": self.fwt, "cov": self.cov}


def summarize(matrix: ResultMatrix, ft_diagonal=None, avg_ft=None, avg_sep=None) -> Summary:
    """Compute AVG always, BWT when T >= 2, FWT/COV when baselines are given."""
    s = Summary(avg=avg(matrix))
    if matrix.num_tasks >= 2:
        s.bwt = bwt(matrix)
        if ft_diagonal is not None:
            s.fwt = fwt(matrix, ft_diagonal)
    if avg_ft is not None and avg_sep is not None:
        s.cov = cov(s.avg, avg_ft, avg_sep)
    return s
