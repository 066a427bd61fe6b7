"""Command-line entry points: translate one question, evaluate a benchmark,
record fixtures, and re-render reports.

Exit codes: 0 success, 1 configuration or fixture error, 2 pipeline produced
no answer. Runs are resumable: a task whose result file already exists in the
output directory is not re-run, and its recorded score is reused, so a resumed
run reproduces the same report.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional

from . import evaluator, pipeline
from .db_catalog import (
    BenchmarkFormatError,
    CatalogError,
    QueryTask,
    handle_for,
    load_benchmark,
)
from .evaluator import EvalRecord, GoldExecutionError, RunnerSettings
from .llm_gateway import FixtureMissError, Gateway, ProviderConfig, usage_report
from .pipeline import (
    FixturePivotExecutor,
    PipelineConfig,
    PivotFixtureMissError,
    PivotOutcomeStore,
    RecordingPivotExecutor,
    SubprocessHarnessExecutor,
)
from .prompt_forge import STRATEGY_ORDER
from .schema_link import LinkerConfig

MODES = ("pisql", "pisql_refine", "vanilla", "vanilla_sc",
         "single_strategy:merge", "single_strategy:filter", "single_strategy:direct",
         "mixed_sc", "no_adaptation")

COMPLETIONS_FILE = "completions.jsonl"
PIVOT_OUTCOMES_FILE = "pivot_outcomes.jsonl"


class ConfigError(Exception):
    pass


def _interpolate(value):
    if isinstance(value, str):
        return os.path.expandvars(value)
    if isinstance(value, dict):
        return {k: _interpolate(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v) for v in value]
    return value


def load_config_file(path: Optional[str]) -> dict:
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            return _interpolate(json.load(fh))
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pivotsql")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; ${VAR} values are expanded")
        p.add_argument("--db-root", help="directory holding <db_id>/<db_id>.sqlite")
        p.add_argument("--benchmark", help="benchmark JSON file")
        p.add_argument("--out", help="output directory", default=None)
        p.add_argument("--mode", choices=MODES, default=None)
        p.add_argument("--replay", metavar="DIR", help="replay fixtures from DIR")
        p.add_argument("--record", metavar="DIR", help="record fixtures into DIR")
        p.add_argument("--live", action="store_true", help="call the live endpoint")
        p.add_argument("--endpoint", help="chat-completions URL (live/record)")
        p.add_argument("--model", help="model name")
        p.add_argument("--temperature", type=float, default=None)
        p.add_argument("--max-tokens", type=int, default=None)
        p.add_argument("--api-key-env", default=None,
                       help="env var holding the bearer token")
        p.add_argument("--harness-cmd", default=None,
                       help="pivot harness command (live/record pivot execution)")
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--seed", type=int, default=None, help="reserved")
        p.add_argument("--timeout-sql", type=float, default=None)
        p.add_argument("--timeout-pivot", type=float, default=None)
        p.add_argument("--timing-repeats", type=int, default=None)
        p.add_argument("--refine-rounds", type=int, default=None)
        p.add_argument("--n", type=int, default=None, help="samples for vanilla_sc")
        p.add_argument("--linker-mode", choices=("heuristic", "llm", "all"), default=None)

    t = sub.add_parser("translate", help="translate one question")
    common(t)
    t.add_argument("--question-id", type=int, default=None)
    t.add_argument("--question", help="inline question text")
    t.add_argument("--db-id", help="database id for an inline question")
    t.add_argument("--evidence", default="", help="hint for an inline question")

    e = sub.add_parser("eval", help="run a whole benchmark and score it")
    common(e)
    e.add_argument("--difficulty", choices=("simple", "moderate", "challenging", "unknown"),
                   default=None)
    e.add_argument("--limit", type=int, default=None)
    e.add_argument("--csv", action="store_true", help="also print machine-readable rows")

    r = sub.add_parser("record-fixtures", help="run tasks in record mode, no scoring")
    common(r)
    r.add_argument("--difficulty", default=None)
    r.add_argument("--limit", type=int, default=None)

    rep = sub.add_parser("report", help="re-render the report of a finished run")
    rep.add_argument("--out", required=True)
    rep.add_argument("--csv", action="store_true")
    return parser


class Settings:
    """Merged configuration: defaults, then config file, then flags."""

    def __init__(self, args: argparse.Namespace):
        file_cfg = load_config_file(getattr(args, "config", None))

        def pick(flag, key, default=None):
            value = getattr(args, flag, None)
            if value is not None:
                return value
            return file_cfg.get(key, default)

        self.db_root = pick("db_root", "db_root")
        self.benchmark = pick("benchmark", "benchmark")
        self.out = Path(pick("out", "out", "out"))
        self.mode = pick("mode", "mode", "pisql")
        self.replay = pick("replay", "replay")
        self.record = pick("record", "record")
        self.live = bool(getattr(args, "live", False) or file_cfg.get("live"))
        self.endpoint = pick("endpoint", "endpoint", "")
        self.model = pick("model", "model", "stub-model")
        self.temperature = pick("temperature", "temperature", 0.0)
        self.temperature_explicit = (getattr(args, "temperature", None) is not None
                                     or "temperature" in file_cfg)
        self.max_tokens = pick("max_tokens", "max_tokens", 4096)
        self.api_key_env = pick("api_key_env", "api_key_env", "PIVOTSQL_API_KEY")
        self.harness_cmd = pick("harness_cmd", "harness_cmd", "pivot-harness")
        self.jobs = pick("jobs", "jobs", 1)
        self.seed = pick("seed", "seed")
        self.timeout_sql = pick("timeout_sql", "timeout_sql", 30.0)
        self.timeout_pivot = pick("timeout_pivot", "timeout_pivot", 30.0)
        self.timing_repeats = pick("timing_repeats", "timing_repeats", 10)
        self.refine_rounds = pick("refine_rounds", "refine_rounds", 1)
        self.n = pick("n", "n", 11)
        self.linker_mode = pick("linker_mode", "linker_mode", "heuristic")

        modes = [m for m in (self.replay and "replay", self.record and "record",
                             self.live and "live") if m]
        if len(modes) > 1:
            raise ConfigError("choose exactly one of --replay, --record, --live")
        self.provider_mode = modes[0] if modes else "replay"
        if self.provider_mode == "replay" and not self.replay:
            raise ConfigError("one of --replay DIR, --record DIR, or --live is required")
        if self.provider_mode in ("live", "record") and not self.endpoint:
            raise ConfigError(f"{self.provider_mode} mode needs --endpoint")

    def fixtures_dir(self) -> Path:
        return Path(self.replay or self.record)

    def gateway(self) -> Gateway:
        fixture_path = None
        if self.provider_mode in ("replay", "record"):
            fixture_path = self.fixtures_dir() / COMPLETIONS_FILE
        return Gateway(ProviderConfig(
            endpoint=self.endpoint,
            model_name=self.model,
            temperature=float(self.temperature),
            max_tokens=int(self.max_tokens),
            api_key_env=self.api_key_env,
            mode=self.provider_mode,
            fixture_path=fixture_path,
        ))

    def executor(self):
        if self.provider_mode == "replay":
            return FixturePivotExecutor(
                PivotOutcomeStore(self.fixtures_dir() / PIVOT_OUTCOMES_FILE))
        live = SubprocessHarnessExecutor(self.harness_cmd.split())
        if self.provider_mode == "record":
            return RecordingPivotExecutor(
                live, PivotOutcomeStore(self.fixtures_dir() / PIVOT_OUTCOMES_FILE))
        return live

    def pipeline_config(self) -> PipelineConfig:
        strategies = STRATEGY_ORDER
        selection = "cross_verify"
        adaptation = True
        refine_rounds = 0
        if self.mode.startswith("single_strategy:"):
            which = self.mode.split(":", 1)[1]
            strategies = ({"merge": "merge_first", "filter": "filter_first",
                           "direct": "direct"}[which],)
        elif self.mode == "mixed_sc":
            selection = "sql_self_consistency"
        elif self.mode == "no_adaptation":
            adaptation = False
        elif self.mode == "pisql_refine":
            refine_rounds = max(1, int(self.refine_rounds))
        return PipelineConfig(
            strategies=strategies,
            adaptation=adaptation,
            selection=selection,
            pivot_timeout=float(self.timeout_pivot),
            sql_timeout=float(self.timeout_sql),
            timing_repeats=int(self.timing_repeats),
            refine_rounds=refine_rounds,
            linker=LinkerConfig(mode=self.linker_mode),
        )

    def manifest(self) -> dict:
        return {
            "mode": self.mode,
            "provider_mode": self.provider_mode,
            "model": self.model,
            "temperature": float(self.temperature),
            "max_tokens": int(self.max_tokens),
            "benchmark": str(self.benchmark),
            "db_root": str(self.db_root),
            "out": str(self.out),
            "fixtures": str(self.replay or self.record or ""),
            "n": int(self.n),
            "seed": self.seed,
            "timeout_sql": float(self.timeout_sql),
            "timeout_pivot": float(self.timeout_pivot),
            "timing_repeats": int(self.timing_repeats),
            "refine_rounds": int(self.refine_rounds),
            "linker_mode": self.linker_mode,
        }


def run_task(task: QueryTask, settings: Settings, gateway: Gateway, executor,
             cfg: PipelineConfig) -> pipeline.PipelineResult:
    db = handle_for(settings.db_root, task.db_id)
    if settings.mode == "vanilla":
        return pipeline.vanilla_translate(task, db, gateway, cfg)
    if settings.mode == "vanilla_sc":
        temperature = (float(settings.temperature)
                       if settings.temperature_explicit else 0.5)
        return pipeline.vanilla_sc_translate(
            task, db, gateway, cfg, n=int(settings.n), temperature=temperature)
    if settings.mode == "pisql_refine":
        return pipeline.refine(task, db, gateway, executor, cfg)
    return pipeline.translate(task, db, gateway, executor, cfg)


def _result_path(out: Path, task: QueryTask) -> Path:
    return out / "results" / f"q{task.question_id:05d}.json"


def _score_path(out: Path, task: QueryTask) -> Path:
    return out / "scores" / f"q{task.question_id:05d}.json"


def _write_manifest(settings: Settings) -> None:
    settings.out.mkdir(parents=True, exist_ok=True)
    path = settings.out / "manifest.json"
    manifest = settings.manifest()
    if path.exists():
        existing = json.loads(path.read_text(encoding="utf-8"))
        stable = ("mode", "benchmark", "db_root", "provider_mode", "model")
        for key in stable:
            if existing.get(key) != manifest.get(key):
                raise ConfigError(
                    f"output directory was created for a different run "
                    f"({key}={existing.get(key)!r} vs {manifest.get(key)!r})")
        return
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")


def _select_task(tasks: list[QueryTask], args) -> QueryTask:
    if args.question is not None:
        if not args.db_id:
            raise ConfigError("--question needs --db-id")
        return QueryTask(question_id=args.question_id or 0, db_id=args.db_id,
                         question=args.question, evidence=args.evidence)
    if args.question_id is None:
        raise ConfigError("provide --question-id or an inline --question")
    for task in tasks:
        if task.question_id == args.question_id:
            return task
    raise ConfigError(f"question_id {args.question_id} not in benchmark")


def cmd_translate(args) -> int:
    settings = Settings(args)
    tasks = []
    if settings.benchmark:
        tasks = load_benchmark(settings.benchmark)
    task = _select_task(tasks, args)
    if not settings.db_root:
        raise ConfigError("--db-root is required")
    _write_manifest(settings)
    result = run_task(task, settings, settings.gateway(), settings.executor(),
                      settings.pipeline_config())
    path = _result_path(settings.out, task)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(result.to_json(), encoding="utf-8")
    if result.final_sql is None:
        return 2
    print(result.final_sql)
    return 0


def _iter_tasks(settings: Settings, args) -> list[QueryTask]:
    if not settings.benchmark or not settings.db_root:
        raise ConfigError("--benchmark and --db-root are required")
    tasks = load_benchmark(settings.benchmark)
    difficulty = getattr(args, "difficulty", None)
    if difficulty:
        tasks = [t for t in tasks if t.difficulty == difficulty]
    limit = getattr(args, "limit", None)
    if limit:
        tasks = tasks[:limit]
    return tasks


def _run_benchmark(settings: Settings, tasks: list[QueryTask]) -> list[dict]:
    """Translate every task (skipping finished ones); return result documents."""
    gateway = settings.gateway()
    executor = settings.executor()
    cfg = settings.pipeline_config()

    def one(task: QueryTask) -> dict:
        path = _result_path(settings.out, task)
        if path.exists():
            return json.loads(path.read_text(encoding="utf-8"))
        result = run_task(task, settings, gateway, executor, cfg)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(result.to_json(), encoding="utf-8")
        return result.to_json_dict()

    jobs = max(1, int(settings.jobs))
    if jobs == 1:
        return [one(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, tasks))


def _score_tasks(settings: Settings, tasks: list[QueryTask],
                 docs: list[dict]) -> list[EvalRecord]:
    runner_cfg = RunnerSettings(timeout=float(settings.timeout_sql),
                                repeats=int(settings.timing_repeats))
    records: list[EvalRecord] = []
    for task, doc in zip(tasks, docs):
        score_path = _score_path(settings.out, task)
        if score_path.exists():
            cached = json.loads(score_path.read_text(encoding="utf-8"))
            records.append(EvalRecord(task=task,
                                      predicted_sql=cached["predicted_sql"],
                                      correct=cached["correct"],
                                      gold_time=cached["gold_time"],
                                      pred_time=cached["pred_time"],
                                      reward=cached["reward"]))
            continue
        if not task.gold_sql:
            print(f"warning: task {task.question_id} has no gold SQL; skipped",
                  file=sys.stderr)
            continue
        db = handle_for(settings.db_root, task.db_id)
        try:
            record = evaluator.score_task(task, doc.get("final_sql"), db, runner_cfg)
        except GoldExecutionError as exc:
            print(f"warning: {exc}; task excluded", file=sys.stderr)
            continue
        score_path.parent.mkdir(parents=True, exist_ok=True)
        score_path.write_text(json.dumps({
            "question_id": task.question_id,
            "predicted_sql": record.predicted_sql,
            "correct": record.correct,
            "gold_time": record.gold_time,
            "pred_time": record.pred_time,
            "reward": record.reward,
        }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        records.append(record)
    return records


def _usage_from_docs(tasks: list[QueryTask], docs: list[dict]):
    from .llm_gateway import CompletionRecord
    records, difficulties = [], []
    for task, doc in zip(tasks, docs):
        for u in doc.get("usage", []):
            records.append(CompletionRecord(prompt_hash=u["key"], reply="",
                                            prompt_tokens=u["prompt_tokens"],
                                            completion_tokens=u["completion_tokens"]))
            difficulties.append(task.difficulty)
    return usage_report(records, "by_difficulty", difficulties)


def cmd_eval(args, score: bool = True) -> int:
    settings = Settings(args)
    tasks = _iter_tasks(settings, args)
    _write_manifest(settings)
    docs = _run_benchmark(settings, tasks)
    if not score:
        print(f"recorded {len(docs)} task results into {settings.out}")
        return 0
    records = _score_tasks(settings, tasks, docs)
    rep = evaluator.report(records)
    usage = _usage_from_docs(tasks, docs)
    out_doc = {
        "report": rep.to_json_dict(),
        "usage": {
            "n": usage.n,
            "avg_input_tokens": usage.avg_input,
            "avg_output_tokens": usage.avg_output,
            "by_difficulty": {d: {"n": n, "avg_input_tokens": i, "avg_output_tokens": o}
                              for d, (n, i, o) in usage.groups.items()},
        },
    }
    (settings.out / "report.json").write_text(
        json.dumps(out_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(evaluator.format_report(rep))
    print(f"\navg tokens per call: input {usage.avg_input}, output {usage.avg_output}")
    if getattr(args, "csv", False):
        print(evaluator.report_csv(rep))
    return 0


def cmd_report(args) -> int:
    out = Path(args.out)
    report_path = out / "report.json"
    if not report_path.exists():
        raise ConfigError(f"no report.json under {out}; run eval first")
    doc = json.loads(report_path.read_text(encoding="utf-8"))
    rep_doc = doc["report"]
    rep = evaluator.EvalReport(
        n=rep_doc["n"], ex=rep_doc["ex"], ves=rep_doc["ves"], r_ves=rep_doc["r_ves"],
        per_difficulty={d: (v["n"], v["ex"], v["ves"], v["r_ves"])
                        for d, v in rep_doc["per_difficulty"].items()})
    print(evaluator.format_report(rep))
    if args.csv:
        print(evaluator.report_csv(rep))
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "translate":
            return cmd_translate(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "record-fixtures":
            return cmd_eval(args, score=False)
        if args.command == "report":
            return cmd_report(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, BenchmarkFormatError, CatalogError, FixtureMissError,
            PivotFixtureMissError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
