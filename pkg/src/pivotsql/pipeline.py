"""End-to-end translation of one benchmark task into a final SQL query.

The flow: link the schema, export CSVs, generate one pivot program per
strategy sample, execute each pivot, generate one SQL candidate per pivot
(feeding execution results or error text back into the prompt), vote the
reference result among pivot outcomes, keep candidates matching it, and pick
the fastest. Failed steps degrade instead of aborting: a pivot that crashed
still guides SQL generation through its error text, and a run with no valid
candidate falls back to self-consistency over the SQL results.

Pivot execution is behind the PivotExecutor contract so the whole pipeline
can run either against the real subprocess harness or against recorded
outcomes (replay needs no pivot interpreter at all).
"""
from __future__ import annotations

import hashlib
import json
import subprocess
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol, Sequence

from .consensus import (
    ReferenceResult,
    ResultTable,
    SqlCandidate,
    most_frequent,
    pick_fastest,
    select_valid,
    self_consistency_select,
    equivalent,
)
from .db_catalog import CsvBundle, DatabaseHandle, QueryTask, export_csv, introspect_schema
from .llm_gateway import CompletionRecord, Gateway
from .prompt_forge import (
    STRATEGY_ORDER,
    NoCodeBlockError,
    PivotProgram,
    build_pivot_prompt,
    build_refine_prompt,
    build_sql_prompt,
    build_vanilla_prompt,
    extract_code_block,
)
from .schema_link import LinkerConfig, link_schema, link_schema_llm
from .sql_runner import ExecutionOutcome, TimingStats, execute_sql, time_sql

MISSING_PIVOT_SOURCE = "# no program was produced for this attempt"

# How many result rows a PipelineResult document keeps per table.
DOC_ROW_CAP = 50


class PivotFixtureMissError(Exception):
    """Replay was asked for a pivot execution that was never recorded."""


class PivotExecutor(Protocol):
    def execute(self, program: PivotProgram, bundle: CsvBundle,
                timeout: float) -> ExecutionOutcome: ...


def outcome_key(source: str, bundle: CsvBundle) -> str:
    """Content key for one pivot execution: the program plus the data shape
    it ran against (table names, columns, row counts from the manifest)."""
    tables = bundle.manifest.get("tables", {})
    payload = source + "\x00" + json.dumps(tables, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def reply_to_outcome(doc: dict) -> ExecutionOutcome:
    """Convert a harness reply document into an ExecutionOutcome."""
    status = doc.get("status", "error")
    table = ResultTable(columns=list(doc.get("columns", [])),
                        rows=[tuple(r) for r in doc.get("rows", [])])
    if status != "ok":
        table = ResultTable()
    return ExecutionOutcome(
        status=status,
        table=table,
        elapsed=doc.get("elapsed_ms", 0) / 1000.0,
        diagnostic=doc.get("error_text", ""),
    )


def outcome_to_reply(outcome: ExecutionOutcome) -> dict:
    return {
        "status": outcome.status,
        "columns": list(outcome.table.columns),
        "rows": [list(r) for r in outcome.table.rows],
        "elapsed_ms": int(round(outcome.elapsed * 1000)),
        "error_text": outcome.diagnostic,
    }


class PivotOutcomeStore:
    """JSON-lines store of harness replies keyed by outcome_key."""

    def __init__(self, path: Path | str):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._replies: dict[str, dict] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if line:
                        doc = json.loads(line)
                        self._replies[doc["key"]] = doc

    def get(self, key: str) -> Optional[dict]:
        return self._replies.get(key)

    def put(self, key: str, reply: dict) -> None:
        doc = dict(reply)
        doc["key"] = key
        with self._lock:
            self._replies[key] = doc
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(doc, sort_keys=True) + "\n")

    def __len__(self) -> int:
        return len(self._replies)


class FixturePivotExecutor:
    """Replays recorded pivot outcomes; the replay path of the contract."""

    def __init__(self, store: PivotOutcomeStore | Path | str):
        self.store = store if isinstance(store, PivotOutcomeStore) else PivotOutcomeStore(store)

    def execute(self, program: PivotProgram, bundle: CsvBundle,
                timeout: float) -> ExecutionOutcome:
        key = outcome_key(program.source, bundle)
        doc = self.store.get(key)
        if doc is None:
            raise PivotFixtureMissError(f"no recorded pivot outcome for key {key}")
        return reply_to_outcome(doc)


class SubprocessHarnessExecutor:
    """Runs pivot programs through the external harness command.

    Only the wire format is shared: the harness is invoked as
    ``<command> <program_path> <bundle_dir> <timeout_seconds>`` and prints one
    reply document on stdout.
    """

    def __init__(self, command: Sequence[str] = ("pivot-harness",)):
        self.command = list(command)

    def execute(self, program: PivotProgram, bundle: CsvBundle,
                timeout: float) -> ExecutionOutcome:
        with tempfile.TemporaryDirectory(prefix="pivot-prog-") as tmp:
            program_path = Path(tmp) / "program.py"
            program_path.write_text(program.source, encoding="utf-8")
            argv = self.command + [str(program_path), str(bundle.directory), str(timeout)]
            try:
                proc = subprocess.run(
                    argv, capture_output=True, text=True, timeout=timeout + 15,
                )
            except (OSError, subprocess.TimeoutExpired) as exc:
                return ExecutionOutcome(status="error",
                                        diagnostic=f"harness transport failure: {exc}")
        if proc.returncode != 0:
            return ExecutionOutcome(
                status="error",
                diagnostic=f"harness internal failure (exit {proc.returncode}): "
                           f"{proc.stderr.strip()[:500]}")
        try:
            doc = json.loads(proc.stdout)
        except json.JSONDecodeError as exc:
            return ExecutionOutcome(status="error",
                                    diagnostic=f"harness reply was not JSON: {exc}")
        return reply_to_outcome(doc)


class RecordingPivotExecutor:
    """Wraps any executor and persists every reply for later replay."""

    def __init__(self, inner: PivotExecutor, store: PivotOutcomeStore):
        self.inner = inner
        self.store = store

    def execute(self, program: PivotProgram, bundle: CsvBundle,
                timeout: float) -> ExecutionOutcome:
        outcome = self.inner.execute(program, bundle, timeout)
        self.store.put(outcome_key(program.source, bundle), outcome_to_reply(outcome))
        return outcome


@dataclass
class PipelineConfig:
    strategies: tuple[str, ...] = STRATEGY_ORDER
    samples_per_strategy: int = 1
    adaptation: bool = True
    selection: str = "cross_verify"  # cross_verify | sql_self_consistency
    pivot_timeout: float = 30.0
    sql_timeout: float = 30.0
    timing_repeats: int = 10
    refine_rounds: int = 0
    max_result_rows: int = 20
    max_fetch_rows: int = 100_000
    linker: LinkerConfig = field(default_factory=LinkerConfig)
    work_dir: Optional[Path] = None

    def __post_init__(self) -> None:
        if self.samples_per_strategy < 1:
            raise ValueError("samples_per_strategy must be >= 1")
        if self.refine_rounds < 0:
            raise ValueError("refine_rounds must be >= 0")
        for s in self.strategies:
            if s not in STRATEGY_ORDER:
                raise ValueError(f"unknown strategy: {s!r}")
        if self.selection not in ("cross_verify", "sql_self_consistency"):
            raise ValueError(f"unknown selection mode: {self.selection!r}")


@dataclass
class PipelineResult:
    task: QueryTask
    final_sql: Optional[str]
    selection_reason: str
    reference: Optional[ReferenceResult]
    pivots: list[tuple[PivotProgram, ExecutionOutcome]]
    candidates: list[SqlCandidate]
    usage: list[CompletionRecord]
    candidate_rounds: list[int] = field(default_factory=list)
    final_index: Optional[int] = None

    def to_json_dict(self) -> dict:
        """Deterministic document for audit and replay comparison.

        Wall-clock measurements are deliberately left out: they differ
        between runs and would break byte-for-byte reproducibility.
        """
        def table_doc(outcome: ExecutionOutcome) -> dict:
            rows = [list(r) for r in outcome.table.rows[:DOC_ROW_CAP]]
            return {
                "status": outcome.status,
                "columns": list(outcome.table.columns),
                "rows": rows,
                "row_count": len(outcome.table.rows),
                "error_text": outcome.diagnostic,
            }

        rounds = self.candidate_rounds or [0] * len(self.candidates)
        doc = {
            "question_id": self.task.question_id,
            "db_id": self.task.db_id,
            "final_sql": self.final_sql,
            "selection_reason": self.selection_reason,
            "reference": None,
            "pivots": [
                {
                    "strategy": p.strategy,
                    "index": p.index,
                    "source": p.source,
                    "outcome": table_doc(o),
                }
                for p, o in self.pivots
            ],
            "candidates": [
                {
                    "sql": c.sql,
                    "pivot_index": c.guiding_pivot.index if c.guiding_pivot else None,
                    "refine_round": rounds[i],
                    "outcome": table_doc(c.outcome),
                    "selected": i == self.final_index,
                }
                for i, c in enumerate(self.candidates)
            ],
            "usage": [
                {
                    "key": r.prompt_hash,
                    "prompt_tokens": r.prompt_tokens,
                    "completion_tokens": r.completion_tokens,
                }
                for r in self.usage
            ],
        }
        if self.reference is not None:
            doc["reference"] = {
                "columns": list(self.reference.table.columns),
                "rows": [list(r) for r in self.reference.table.rows[:DOC_ROW_CAP]],
                "row_count": len(self.reference.table.rows),
                "support": self.reference.support,
                "contributors": list(self.reference.contributors),
            }
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n"


Timer = Callable[[SqlCandidate], TimingStats]


def _memoized(timer: Timer) -> Timer:
    """Share one measurement among candidates with identical SQL text.

    Identical queries would otherwise get independently noisy timings and the
    argmin could flip between runs; with shared stats the earliest-candidate
    tie-break applies and selection stays deterministic.
    """
    cache: dict[str, TimingStats] = {}

    def wrapped(cand: SqlCandidate) -> TimingStats:
        if cand.sql not in cache:
            cache[cand.sql] = timer(cand)
        return cache[cand.sql]

    return wrapped


def _sc_with_timing(cands: Sequence[SqlCandidate], timer: Timer) -> Optional[SqlCandidate]:
    ref = most_frequent([c.outcome for c in cands if c.outcome is not None])
    if ref is None:
        return None
    for c in cands:
        if (c.outcome is not None and c.outcome.status == "ok"
                and c.timing is None and equivalent(c.outcome.table, ref.table)):
            c.timing = timer(c)
    return self_consistency_select(cands)


def select_final(
    candidates: Sequence[SqlCandidate],
    ref: Optional[ReferenceResult],
    selection: str,
    timer: Timer,
) -> tuple[Optional[SqlCandidate], str]:
    """Selection core shared by all pipeline variants.

    Cross-verification keeps candidates matching the reference and returns the
    fastest; self-consistency votes among the SQL results themselves. The
    fallback chain for cross_verify is SQL self-consistency, then nothing.
    """
    timer = _memoized(timer)
    if selection == "sql_self_consistency":
        winner = _sc_with_timing(candidates, timer)
        if winner is not None:
            return winner, "sql_self_consistency"
        return None, "none_valid"
    if ref is not None:
        valid = select_valid(candidates, ref)
        if valid:
            for c in valid:
                if c.timing is None:
                    c.timing = timer(c)
            return pick_fastest(valid), "cross_verified_fastest"
    winner = _sc_with_timing(candidates, timer)
    if winner is not None:
        return winner, "sc_fallback"
    return None, "none_valid"


@dataclass
class _Generated:
    linked: object
    bundle: CsvBundle
    pivots: list[tuple[PivotProgram, ExecutionOutcome]]
    candidates: list[SqlCandidate]
    usage: list[CompletionRecord]
    rounds: list[int]


def _link(task: QueryTask, db: DatabaseHandle, gateway: Gateway, cfg: PipelineConfig):
    schema = introspect_schema(db)
    if cfg.linker.mode == "llm":
        return link_schema_llm(schema, task, gateway, cfg.linker, db=db)
    return link_schema(schema, task, db, cfg.linker)


def _bundle_dir(task: QueryTask, cfg: PipelineConfig) -> Path:
    if cfg.work_dir is not None:
        path = Path(cfg.work_dir) / f"{task.db_id}_q{task.question_id}"
        return path
    return Path(tempfile.mkdtemp(prefix=f"bundle-{task.db_id}-"))


def _generate(task: QueryTask, db: DatabaseHandle, gateway: Gateway,
              executor: PivotExecutor, cfg: PipelineConfig) -> _Generated:
    linked = _link(task, db, gateway, cfg)
    bundle = export_csv(db, linked, _bundle_dir(task, cfg))
    usage: list[CompletionRecord] = []

    pivots: list[tuple[PivotProgram, ExecutionOutcome]] = []
    for strategy in cfg.strategies:
        for k in range(cfg.samples_per_strategy):
            prompt = build_pivot_prompt(task, linked, bundle, strategy, cfg.adaptation)
            record = gateway.complete(prompt, sample_index=k)
            usage.append(record)
            index = len(pivots)
            try:
                source = extract_code_block(record.reply, "pivot")
            except NoCodeBlockError as exc:
                program = PivotProgram(source=MISSING_PIVOT_SOURCE, strategy=strategy,
                                       prompt_hash=record.prompt_hash, index=index)
                outcome = ExecutionOutcome(status="error", diagnostic=str(exc))
            else:
                program = PivotProgram(source=source, strategy=strategy,
                                       prompt_hash=record.prompt_hash, index=index)
                outcome = executor.execute(program, bundle, cfg.pivot_timeout)
            pivots.append((program, outcome))

    candidates: list[SqlCandidate] = []
    for program, outcome in pivots:
        prompt = build_sql_prompt(task, linked, program, outcome, cfg.max_result_rows)
        record = gateway.complete(prompt)
        usage.append(record)
        candidates.append(_candidate_from_reply(record.reply, db, cfg, guiding=program))

    return _Generated(linked=linked, bundle=bundle, pivots=pivots,
                      candidates=candidates, usage=usage,
                      rounds=[0] * len(candidates))


def _candidate_from_reply(reply: str, db: DatabaseHandle, cfg: PipelineConfig,
                          guiding: Optional[PivotProgram] = None) -> SqlCandidate:
    try:
        sql = extract_code_block(reply, "sql")
    except NoCodeBlockError as exc:
        return SqlCandidate(sql="", guiding_pivot=guiding,
                            outcome=ExecutionOutcome(status="error", diagnostic=str(exc)))
    outcome = execute_sql(db, sql, timeout=cfg.sql_timeout,
                          max_fetch_rows=cfg.max_fetch_rows)
    return SqlCandidate(sql=sql, guiding_pivot=guiding, outcome=outcome)


def _db_timer(db: DatabaseHandle, cfg: PipelineConfig) -> Timer:
    return lambda cand: time_sql(db, cand.sql, repeats=cfg.timing_repeats,
                                 timeout=cfg.sql_timeout)


def _finish(task: QueryTask, gen: _Generated, ref: Optional[ReferenceResult],
            final: Optional[SqlCandidate], reason: str) -> PipelineResult:
    final_index = None
    if final is not None:
        for i, c in enumerate(gen.candidates):
            if c is final:
                final_index = i
                break
    return PipelineResult(
        task=task,
        final_sql=final.sql if final is not None else None,
        selection_reason=reason,
        reference=ref,
        pivots=gen.pivots,
        candidates=gen.candidates,
        usage=gen.usage,
        candidate_rounds=gen.rounds,
        final_index=final_index,
    )


def translate(task: QueryTask, db: DatabaseHandle, gateway: Gateway,
              executor: PivotExecutor, cfg: Optional[PipelineConfig] = None) -> PipelineResult:
    """Run the full two-stage pipeline for one task."""
    cfg = cfg or PipelineConfig()
    gen = _generate(task, db, gateway, executor, cfg)
    ref = most_frequent([o for _, o in gen.pivots])
    final, reason = select_final(gen.candidates, ref, cfg.selection, _db_timer(db, cfg))
    return _finish(task, gen, ref, final, reason)


def refine(task: QueryTask, db: DatabaseHandle, gateway: Gateway,
           executor: PivotExecutor, cfg: PipelineConfig) -> PipelineResult:
    """Pipeline with regeneration: when no candidate matches the reference,
    ask again with the failure and the expected result in the prompt."""
    gen = _generate(task, db, gateway, executor, cfg)
    ref = most_frequent([o for _, o in gen.pivots])
    timer = _memoized(_db_timer(db, cfg))

    if ref is None or cfg.selection == "sql_self_consistency":
        final, reason = select_final(gen.candidates, ref, cfg.selection, timer)
        return _finish(task, gen, ref, final, reason)

    current = list(gen.candidates)
    valid = select_valid(current, ref)
    rounds_done = 0
    while not valid and rounds_done < cfg.refine_rounds:
        rounds_done += 1
        fresh: list[SqlCandidate] = []
        for prior in current:
            prompt = build_refine_prompt(task, gen.linked, prior.sql,
                                         prior.outcome, ref.table, cfg.max_result_rows)
            record = gateway.complete(prompt)
            gen.usage.append(record)
            cand = _candidate_from_reply(record.reply, db, cfg,
                                         guiding=prior.guiding_pivot)
            fresh.append(cand)
        gen.candidates.extend(fresh)
        gen.rounds.extend([rounds_done] * len(fresh))
        current = fresh
        valid = select_valid(fresh, ref)

    if valid:
        for c in valid:
            if c.timing is None:
                c.timing = timer(c)
        return _finish(task, gen, ref, pick_fastest(valid), "cross_verified_fastest")
    winner = _sc_with_timing(gen.candidates, timer)
    if winner is not None:
        return _finish(task, gen, ref, winner, "sc_fallback")
    return _finish(task, gen, ref, None, "none_valid")


def vanilla_translate(task: QueryTask, db: DatabaseHandle, gateway: Gateway,
                      cfg: Optional[PipelineConfig] = None) -> PipelineResult:
    """Direct generation baseline: one prompt, one SQL, no guidance."""
    cfg = cfg or PipelineConfig()
    linked = _link(task, db, gateway, cfg)
    prompt = build_vanilla_prompt(task, linked)
    record = gateway.complete(prompt)
    cand = _candidate_from_reply(record.reply, db, cfg)
    gen = _Generated(linked=linked, bundle=None, pivots=[], candidates=[cand],
                     usage=[record], rounds=[0])
    if cand.sql:
        return _finish(task, gen, None, cand, "vanilla")
    return _finish(task, gen, None, None, "none_valid")


def vanilla_sc_translate(task: QueryTask, db: DatabaseHandle, gateway: Gateway,
                         cfg: Optional[PipelineConfig] = None,
                         n: int = 11, temperature: float = 0.5) -> PipelineResult:
    """Sampled direct generation with self-consistency over execution results."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cfg = cfg or PipelineConfig()
    linked = _link(task, db, gateway, cfg)
    prompt = build_vanilla_prompt(task, linked)
    usage: list[CompletionRecord] = []
    candidates: list[SqlCandidate] = []
    for i in range(n):
        record = gateway.complete(prompt, sample_index=i, temperature=temperature)
        usage.append(record)
        candidates.append(_candidate_from_reply(record.reply, db, cfg))
    gen = _Generated(linked=linked, bundle=None, pivots=[], candidates=candidates,
                     usage=usage, rounds=[0] * len(candidates))
    winner = _sc_with_timing(candidates, _memoized(_db_timer(db, cfg)))
    if winner is not None:
        return _finish(task, gen, None, winner, "sql_self_consistency")
    return _finish(task, gen, None, None, "none_valid")
