"""Benchmark scoring: execution accuracy plus efficiency-weighted variants.

A prediction is correct when its execution result matches the gold query's
result (multiset row comparison, column names ignored). Correct predictions
additionally earn a reward from the speed ratio tau = gold_time / pred_time:

    tau >= 2        -> 1.25
    1 <= tau < 2    -> 1.00
    0.5 <= tau < 1  -> 0.75
    0.25 <= tau < 0.5 -> 0.50
    tau < 0.25      -> 0.25

Incorrect or missing predictions earn 0. The reward-based score is the mean
reward expressed as a percentage; the plain efficiency score uses
sqrt(tau) instead of the tier table and is unbounded above. Gold and
predicted queries are timed with interleaved samples (gold, pred, gold, ...)
so cache drift hits both equally.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .consensus import equivalent
from .db_catalog import DatabaseHandle, QueryTask
from .sql_runner import (
    DEFAULT_TIMEOUT_S,
    DEFAULT_TIMING_REPEATS,
    TimingStats,
    execute_sql,
    summarize_samples,
    time_once,
    timing_lock,
)

logger = logging.getLogger(__name__)

REWARD_TIERS = (
    (2.0, 1.25),
    (1.0, 1.0),
    (0.5, 0.75),
    (0.25, 0.5),
)
MIN_REWARD = 0.25


class GoldExecutionError(Exception):
    """The gold query itself failed; the task is a dataset defect."""


@dataclass
class RunnerSettings:
    timeout: float = DEFAULT_TIMEOUT_S
    repeats: int = DEFAULT_TIMING_REPEATS
    max_fetch_rows: int = 100_000


@dataclass
class EvalRecord:
    task: QueryTask
    predicted_sql: Optional[str]
    correct: bool
    gold_time: float = 0.0
    pred_time: float = 0.0
    reward: float = 0.0


@dataclass
class EvalReport:
    n: int
    ex: float
    ves: float
    r_ves: float
    per_difficulty: dict[str, tuple[int, float, float, float]] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "ex": self.ex,
            "ves": self.ves,
            "r_ves": self.r_ves,
            "per_difficulty": {
                d: {"n": n, "ex": ex, "ves": ves, "r_ves": rves}
                for d, (n, ex, ves, rves) in self.per_difficulty.items()
            },
        }


def reward_for_ratio(tau: float) -> float:
    """Reward tier for a correct prediction with speed ratio tau."""
    for threshold, reward in REWARD_TIERS:
        if tau >= threshold:
            return reward
    return MIN_REWARD


def interleaved_times(
    db: DatabaseHandle,
    gold_sql: str,
    pred_sql: str,
    repeats: int,
    timeout: float,
) -> tuple[TimingStats, TimingStats]:
    """Time both queries with alternating samples under the per-database lock."""
    gold_samples: list[float] = []
    pred_samples: list[float] = []
    with timing_lock(db):
        for _ in range(max(1, repeats)):
            gold_samples.append(time_once(db, gold_sql, timeout))
            pred_samples.append(time_once(db, pred_sql, timeout))

    def stats(samples: list[float]) -> TimingStats:
        if any(math.isinf(s) for s in samples):
            finite = [s for s in samples if not math.isinf(s)]
            return TimingStats(samples=finite, representative=math.inf, timed_out=True)
        return TimingStats(samples=samples, representative=summarize_samples(samples))

    return stats(gold_samples), stats(pred_samples)


def score_task(
    task: QueryTask,
    predicted_sql: Optional[str],
    db: DatabaseHandle,
    runner_cfg: Optional[RunnerSettings] = None,
) -> EvalRecord:
    """Score one prediction against the task's gold query.

    Raises GoldExecutionError when the gold query fails; callers exclude such
    tasks from the report instead of counting them as wrong.
    """
    cfg = runner_cfg or RunnerSettings()
    if not task.gold_sql:
        raise GoldExecutionError(f"task {task.question_id} has no gold SQL")
    gold = execute_sql(db, task.gold_sql, timeout=cfg.timeout,
                       max_fetch_rows=cfg.max_fetch_rows)
    if gold.status != "ok":
        raise GoldExecutionError(
            f"gold SQL failed for task {task.question_id}: {gold.diagnostic}")
    if not predicted_sql:
        return EvalRecord(task=task, predicted_sql=predicted_sql, correct=False)
    pred = execute_sql(db, predicted_sql, timeout=cfg.timeout,
                       max_fetch_rows=cfg.max_fetch_rows)
    if pred.status != "ok" or not equivalent(pred.table, gold.table):
        return EvalRecord(task=task, predicted_sql=predicted_sql, correct=False)

    gold_stats, pred_stats = interleaved_times(
        db, task.gold_sql, predicted_sql, cfg.repeats, cfg.timeout)
    gold_time = gold_stats.representative
    pred_time = pred_stats.representative
    if math.isinf(pred_time):
        tau = 0.0
    elif pred_time <= 0 or math.isinf(gold_time):
        tau = math.inf
    else:
        tau = gold_time / pred_time
    return EvalRecord(
        task=task,
        predicted_sql=predicted_sql,
        correct=True,
        gold_time=0.0 if math.isinf(gold_time) else gold_time,
        pred_time=0.0 if math.isinf(pred_time) else pred_time,
        reward=reward_for_ratio(tau),
    )


def execution_accuracy(records: Sequence[EvalRecord]) -> float:
    if not records:
        return 0.0
    return 100.0 * sum(1 for r in records if r.correct) / len(records)


def r_ves(records: Sequence[EvalRecord]) -> float:
    if not records:
        return 0.0
    return 100.0 * sum(r.reward for r in records) / len(records)


def ves(records: Sequence[EvalRecord]) -> float:
    """Efficiency score using sqrt(gold/pred); can exceed 100."""
    if not records:
        return 0.0
    total = 0.0
    for r in records:
        if not r.correct:
            continue
        if r.pred_time > 0:
            total += math.sqrt(r.gold_time / r.pred_time)
    return 100.0 * total / len(records)


def report(records: Sequence[EvalRecord]) -> EvalReport:
    """Aggregate overall and per-difficulty metrics."""
    per: dict[str, list[EvalRecord]] = {}
    for r in records:
        per.setdefault(r.task.difficulty, []).append(r)
    order = [d for d in ("simple", "moderate", "challenging", "unknown") if d in per]
    per_difficulty = {
        d: (len(per[d]), execution_accuracy(per[d]), ves(per[d]), r_ves(per[d]))
        for d in order
    }
    return EvalReport(
        n=len(records),
        ex=execution_accuracy(records),
        ves=ves(records),
        r_ves=r_ves(records),
        per_difficulty=per_difficulty,
    )


def format_report(rep: EvalReport) -> str:
    """Aligned text table, one row per difficulty tier plus overall."""
    header = f"{'subset':<14}{'n':>6}{'EX':>10}{'R-VES':>10}{'VES':>10}"
    lines = [header, "-" * len(header)]

    def row(name: str, n: int, ex: float, rves: float, v: float) -> str:
        return f"{name:<14}{n:>6}{ex:>10.2f}{rves:>10.2f}{v:>10.2f}"

    for diff, (n, ex, v, rves) in rep.per_difficulty.items():
        lines.append(row(diff, n, ex, rves, v))
    lines.append(row("overall", rep.n, rep.ex, rep.r_ves, rep.ves))
    return "\n".join(lines)


def report_csv(rep: EvalReport) -> str:
    lines = ["subset,n,ex,r_ves,ves"]
    for diff, (n, ex, v, rves) in rep.per_difficulty.items():
        lines.append(f"{diff},{n},{ex:.2f},{rves:.2f},{v:.2f}")
    lines.append(f"overall,{rep.n},{rep.ex:.2f},{rep.r_ves:.2f},{rep.ves:.2f}")
    return "\n".join(lines)
