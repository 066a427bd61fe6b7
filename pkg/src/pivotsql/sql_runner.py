"""Read-only SQL execution against SQLite files, with timeouts and timing.

Timing uses a drop-min/max-then-mean rule so that a single anomalous sample
(cache miss, scheduler hiccup) cannot decide candidate selection or reward
tiers. Timing sequences are serialized per database file to keep samples from
interfering with each other.
"""
from __future__ import annotations

import math
import sqlite3
import threading
import time
from dataclasses import dataclass, field

from .consensus import ResultTable
from .db_catalog import DatabaseHandle

DEFAULT_TIMEOUT_S = 30.0
DEFAULT_MAX_FETCH_ROWS = 100_000
DEFAULT_TIMING_REPEATS = 10

# Advisory per-database locks: at most one timing sequence per file at a time.
_timing_locks: dict[str, threading.Lock] = {}
_timing_locks_guard = threading.Lock()


@dataclass
class ExecutionOutcome:
    """What happened when a program ran: status, result, wall time, diagnostics."""

    status: str  # ok | error | timeout
    table: ResultTable = field(default_factory=ResultTable)
    elapsed: float = 0.0
    diagnostic: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


@dataclass
class TimingStats:
    samples: list[float]
    representative: float
    timed_out: bool = False


class _Deadline:
    """Progress-handler hook that interrupts a query past its deadline."""

    def __init__(self, timeout_s: float):
        self.expires = time.monotonic() + timeout_s
        self.fired = False

    def __call__(self) -> int:
        if time.monotonic() > self.expires:
            self.fired = True
            return 1
        return 0


def _connect_readonly(db: DatabaseHandle) -> sqlite3.Connection:
    uri = f"file:{db.path}?mode=ro"
    conn = sqlite3.connect(uri, uri=True)
    conn.text_factory = str
    return conn


def execute_sql(
    db: DatabaseHandle,
    sql: str,
    timeout: float = DEFAULT_TIMEOUT_S,
    max_fetch_rows: int = DEFAULT_MAX_FETCH_ROWS,
) -> ExecutionOutcome:
    """Run one SQL statement read-only and fetch all rows.

    Returns status ``error`` for engine failures, ``timeout`` when the
    deadline interrupts the query, and ``error`` with a result-too-large
    diagnostic when the row cap is exceeded. Elapsed covers execute + fetch.
    """
    deadline = _Deadline(timeout)
    start = time.perf_counter()
    try:
        conn = _connect_readonly(db)
    except sqlite3.Error as exc:
        return ExecutionOutcome(status="error", diagnostic=str(exc))
    try:
        # Fire roughly every few thousand VM instructions.
        conn.set_progress_handler(deadline, 2000)
        cur = conn.execute(sql)
        columns = [d[0] for d in cur.description] if cur.description else []
        rows: list[tuple] = []
        while True:
            chunk = cur.fetchmany(1000)
            if not chunk:
                break
            rows.extend(chunk)
            if len(rows) > max_fetch_rows:
                return ExecutionOutcome(
                    status="error",
                    elapsed=time.perf_counter() - start,
                    diagnostic=f"result-too-large: more than {max_fetch_rows} rows",
                )
        elapsed = time.perf_counter() - start
        return ExecutionOutcome(
            status="ok",
            table=ResultTable(columns=columns, rows=rows),
            elapsed=elapsed,
        )
    except sqlite3.OperationalError as exc:
        elapsed = time.perf_counter() - start
        if deadline.fired or "interrupted" in str(exc).lower():
            return ExecutionOutcome(status="timeout", elapsed=elapsed,
                                    diagnostic=f"timeout after {timeout:g} s")
        return ExecutionOutcome(status="error", elapsed=elapsed, diagnostic=str(exc))
    except sqlite3.Error as exc:
        return ExecutionOutcome(status="error",
                                elapsed=time.perf_counter() - start,
                                diagnostic=str(exc))
    finally:
        conn.close()


def time_once(db: DatabaseHandle, sql: str, timeout: float) -> float:
    """One timing sample on a fresh connection; math.inf when it times out."""
    outcome = execute_sql(db, sql, timeout=timeout)
    if outcome.status != "ok":
        return math.inf
    return outcome.elapsed


def summarize_samples(samples: list[float]) -> float:
    """Representative duration: drop min and max when there are >= 4 samples,
    then take the arithmetic mean of the rest."""
    if not samples:
        raise ValueError("no samples")
    if len(samples) >= 4:
        trimmed = sorted(samples)[1:-1]
    else:
        trimmed = list(samples)
    return sum(trimmed) / len(trimmed)


def timing_lock(db: DatabaseHandle) -> threading.Lock:
    """Advisory lock serializing timing sequences against one database file."""
    key = str(db.path)
    with _timing_locks_guard:
        if key not in _timing_locks:
            _timing_locks[key] = threading.Lock()
        return _timing_locks[key]


def time_sql(
    db: DatabaseHandle,
    sql: str,
    repeats: int = DEFAULT_TIMING_REPEATS,
    timeout: float = DEFAULT_TIMEOUT_S,
) -> TimingStats:
    """Time a query over `repeats` fresh-connection runs.

    If any run exceeds the timeout the stats are marked timed out and the
    representative is +inf (such a candidate ranks after every finite one).
    """
    samples: list[float] = []
    with timing_lock(db):
        for _ in range(max(1, repeats)):
            sample = time_once(db, sql, timeout)
            if math.isinf(sample):
                return TimingStats(samples=samples, representative=math.inf,
                                   timed_out=True)
            samples.append(sample)
    return TimingStats(samples=samples, representative=summarize_samples(samples))
