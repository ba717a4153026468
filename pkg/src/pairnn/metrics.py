"""Offline metrics (pairwise accuracy, average hinge loss) and replay recall.

Replay stands in for an online A/B test: for each held-out message event it
re-runs a retrieval strategy for that user at the event's timestamp and
counts a hit when the messaged product is in the top N.
"""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class EmptyEvalSetError(ValueError):
    pass


@dataclass
class EvalSet:
    """Model scores for (user, positive, negative) tuples."""

    r_pos: np.ndarray
    r_neg: np.ndarray

    def __post_init__(self):
        self.r_pos = np.asarray(self.r_pos, dtype=np.float64).reshape(-1)
        self.r_neg = np.asarray(self.r_neg, dtype=np.float64).reshape(-1)
        if self.r_pos.shape != self.r_neg.shape:
            raise ValueError("r_pos and r_neg must have the same length")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[float, float]]) -> "EvalSet":
        pairs = list(pairs)
        return cls([p for p, _ in pairs], [n for _, n in pairs])

    def __len__(self) -> int:
        return len(self.r_pos)


def _require(s: EvalSet) -> None:
    if len(s) == 0:
        raise EmptyEvalSetError("metrics need at least one tuple")


def accuracy(s: EvalSet) -> float:
    """Fraction of tuples whose positive strictly outscores the negative."""
    _require(s)
    return float(np.count_nonzero(s.r_pos - s.r_neg > 0)) / len(s)


def average_loss(s: EvalSet, margin: float = 1.0) -> float:
    """Mean of ``max(0, r_neg - r_pos + margin)``."""
    _require(s)
    if margin < 0:
        raise ValueError("margin must be non-negative")
    return float(np.maximum(0.0, s.r_neg - s.r_pos + margin).mean())


# -- replay --------------------------------------------------------------------

Strategy = Callable[[str, float, int, int], Sequence[str]]
"""(user_id, timestamp, M, N) -> ranked product ids."""


@dataclass
class ReplayReport:
    N: int
    M: int
    events: int
    hits: dict[str, int] = field(default_factory=dict)
    baseline: str = "time"

    def recall(self, strategy: str) -> float:
        return self.hits[strategy] / self.events if self.events else 0.0

    def lift(self, strategy: str) -> float:
        base = self.recall(self.baseline)
        if strategy == self.baseline:
            return 0.0
        return self.recall(strategy) / base - 1.0 if base > 0 else float("inf")

    @property
    def strategies(self) -> list[str]:
        return list(self.hits)

    def records(self) -> list[tuple[str, str, float]]:
        rows = []
        for s in self.strategies:
            rows.append((s, f"recall@{self.N}", self.recall(s)))
            if self.baseline in self.hits:
                rows.append((s, "lift_vs_time", self.lift(s)))
            rows.append((s, "hits", float(self.hits[s])))
        rows.append(("all", "events", float(self.events)))
        return rows

    def table(self) -> str:
        lines = [f"{'Methods':<12} {'recall@' + str(self.N):>10} {'lift':>10} {'hits':>7}"]
        for s in self.strategies:
            lift = f"{100 * self.lift(s):+.2f}%" if self.baseline in self.hits and s != self.baseline else "baseline"
            lines.append(f"{s:<12} {self.recall(s):>10.4f} {lift:>10} {self.hits[s]:>7d}")
        lines.append(f"({self.events} held-out message events, M={self.M})")
        return "\n".join(lines)


def replay(
    held_out_messages: Sequence,
    strategies: Mapping[str, Strategy | None],
    M: int,
    N: int,
    training_events: Sequence | None = None,
    workers: int = 1,
) -> ReplayReport:
    """Recall@N of each strategy over held-out message events.

    ``strategies`` maps a name to a callable ``(user_id, timestamp, M, N)``
    returning ranked product ids drawn only from products created before
    ``timestamp``. With ``workers > 1`` events are judged on a thread pool
    and reduced in event order. A ``None`` entry means the artifact backing that strategy
    is missing and is an error.
    """
    if N < 1 or M < N:
        raise ValueError(f"need 1 <= N <= M, got N={N}, M={M}")
    missing = [name for name, fn in strategies.items() if fn is None]
    if missing:
        raise ValueError(f"strategy {missing[0]!r} has no trained artifact (checkpoint or vectors)")
    events = [e for e in held_out_messages if e.type == "message"]
    if training_events is not None:
        seen = {(e.type, e.user_id, e.product_id, e.timestamp) for e in training_events}
        if any((e.type, e.user_id, e.product_id, e.timestamp) in seen for e in events):
            raise ValueError("held-out events overlap the training events")
    report = ReplayReport(N=N, M=M, events=len(events), hits={name: 0 for name in strategies})

    def judge(e) -> list[bool]:
        return [e.product_id in fn(e.user_id, e.timestamp, M, N) for fn in strategies.values()]

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outcomes = list(pool.map(judge, events))
    else:
        outcomes = [judge(e) for e in events]
    for row in outcomes:
        for name, hit in zip(strategies, row):
            report.hits[name] += hit
    return report


# -- report files --------------------------------------------------------------

REPORT_HEADER = ("strategy", "metric", "value")


def format_records(records: Iterable[tuple[str, str, float]]) -> str:
    """Tab-separated ``strategy metric value`` lines with a header row."""
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for strategy, metric, value in records:
        w.writerow((strategy, metric, f"{value:.6f}"))
    return buf.getvalue()


def write_records(path, records: Iterable[tuple[str, str, float]]) -> None:
    Path(path).write_text(format_records(records), encoding="utf-8")


def read_records(path) -> list[tuple[str, str, float]]:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh, delimiter="\t"))
    if not rows or tuple(rows[0]) != REPORT_HEADER:
        raise ValueError(f"{path}: missing report header {REPORT_HEADER}")
    out = []
    for lineno, row in enumerate(rows[1:], 2):
        if len(row) != 3:
            raise ValueError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        out.append((row[0], row[1], float(row[2])))
    return out


def table1(rows: Mapping[str, tuple[float, float]], baseline: tuple[float, float] | None = None) -> str:
    """Accuracy / average-loss table: optional baseline block, then one row per model."""
    lines = []
    if baseline is not None:
        lines += [f"{'':<14} {'Accuracy':>9} {'Average Loss':>13}", f"{'Word2vec-based':<14} {baseline[0]:>9.4f} {baseline[1]:>13.4f}", ""]
    lines.append(f"{'PairNN':<14} {'Accuracy':>9} {'Average Loss':>13}")
    for name, (acc, loss) in rows.items():
        lines.append(f"{name:<14} {acc:>9.4f} {loss:>13.4f}")
    return "\n".join(lines)
