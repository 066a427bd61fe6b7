"""Prompt assembly for both generation stages, plus reply code extraction.

All prompt text comes from the template files shipped under ``templates/``;
the file names are a public contract so tests can assert byte-exact
inclusion. Rendering uses ``string.Template`` ($-placeholders) because the
templates themselves contain JSON braces.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources
from string import Template
from typing import Optional

from .db_catalog import CsvBundle, QueryTask, DatabaseSchema
from .schema_link import LinkedSchema
from .sql_runner import ExecutionOutcome

MERGE_FIRST = "merge_first"
FILTER_FIRST = "filter_first"
DIRECT = "direct"
# Canonical order; doubles as the tie-break order wherever strategies compete.
STRATEGY_ORDER = (MERGE_FIRST, FILTER_FIRST, DIRECT)

_STRATEGY_TEMPLATE = {
    MERGE_FIRST: "strategy_merge.txt",
    FILTER_FIRST: "strategy_filter.txt",
    DIRECT: "strategy_direct.txt",
}

DEFAULT_MAX_RESULT_ROWS = 20

_SYSTEM_PIVOT = ("You are a careful data engineer. You write small, correct, "
                 "deterministic Python programs that analyze CSV files.")
_SYSTEM_SQL = ("You are an expert SQLite engineer. You write a single correct "
               "and efficient query for each request.")
_SYSTEM_LINKER = ("You identify which database tables and columns a question "
                  "needs. You answer with one table.column per line.")


class NoCodeBlockError(Exception):
    """The model reply contained no extractable program."""


@dataclass
class PromptText:
    system: str
    user: str
    kind: str  # pivot | sql | vanilla | linker | refine
    strategy: Optional[str] = None
    adaptation: bool = False

    def __post_init__(self) -> None:
        if not self.user:
            raise ValueError("prompt user text must be non-empty")
        if self.kind == "pivot" and self.strategy not in STRATEGY_ORDER:
            raise ValueError(f"pivot prompt needs a strategy, got {self.strategy!r}")
        if self.kind != "pivot" and self.strategy is not None:
            raise ValueError(f"{self.kind} prompt must not carry a strategy")


@dataclass
class PivotProgram:
    source: str
    strategy: str
    prompt_hash: str = ""
    index: int = 0

    def __post_init__(self) -> None:
        if not self.source.strip():
            raise ValueError("pivot program source must be non-empty")


def _load_template(name: str) -> str:
    path = resources.files("pivotsql") / "templates" / name
    return path.read_text(encoding="utf-8").rstrip("\n")


_template_cache: dict[str, str] = {}


def template_text(name: str) -> str:
    if name not in _template_cache:
        _template_cache[name] = _load_template(name)
    return _template_cache[name]


def _evidence_section(task: QueryTask) -> str:
    if task.evidence:
        return f"Hint: {task.evidence}\n"
    return ""


def _csv_catalog(linked: LinkedSchema, bundle: CsvBundle) -> str:
    lines = []
    tables = bundle.manifest.get("tables", {})
    for table, columns in linked.tables.items():
        entry = tables.get(table, {})
        types = entry.get("types", [""] * len(columns))
        cols = ", ".join(
            f"{c} {t}".strip() for c, t in zip(columns, types)
        )
        rows = entry.get("rows")
        suffix = f"  ({rows} rows)" if rows is not None else ""
        lines.append(f"- {table}.csv: {cols}{suffix}")
    return "\n".join(lines)


def describe_schema(linked: LinkedSchema) -> str:
    """Render the linked tables with column types and key relationships."""
    source = linked.source
    lines = []
    fk_lines = []
    for table, columns in linked.tables.items():
        info = source.table(table) if source is not None else None
        header = f"Table {table}"
        if info is not None:
            header += f" ({info.row_count} rows)"
        lines.append(header + ":")
        declared = {c.name: c for c in info.columns} if info is not None else {}
        for col in columns:
            meta = declared.get(col)
            if meta is None:
                lines.append(f"  {col}")
                continue
            suffix = " [primary key]" if meta.is_primary_key else ""
            lines.append(f"  {col} {meta.declared_type}".rstrip() + suffix)
        if info is not None:
            for local, ftable, fcol in info.foreign_keys:
                if ftable in linked.tables:
                    fk_lines.append(f"  {table}.{local} -> {ftable}.{fcol}")
    if fk_lines:
        lines.append("Foreign keys:")
        lines.extend(fk_lines)
    return "\n".join(lines)


def serialize_result(table, max_rows: int = DEFAULT_MAX_RESULT_ROWS) -> str:
    """Pipe-separated rendering of a result table, truncated for prompts."""
    lines = ["columns: " + " | ".join(str(c) for c in table.columns)]
    shown = table.rows[:max_rows]
    for row in shown:
        lines.append(" | ".join("NULL" if v is None else str(v) for v in row))
    if len(table.rows) > max_rows:
        lines.append(f"... ({len(table.rows)} rows in total, first {max_rows} shown)")
    if not table.rows:
        lines.append("(no rows)")
    return "\n".join(lines)


def _outcome_section(outcome: ExecutionOutcome, max_rows: int) -> str:
    if outcome.status == "ok":
        return "Executing the program produced:\n" + serialize_result(outcome.table, max_rows)
    return "Executing the program failed with:\n" + outcome.diagnostic


def build_pivot_prompt(
    task: QueryTask,
    linked: LinkedSchema,
    bundle: CsvBundle,
    strategy: str,
    adaptation: bool = True,
) -> PromptText:
    """First-stage prompt: analyze the exported CSVs under one strategy."""
    if strategy not in STRATEGY_ORDER:
        raise ValueError(f"unknown strategy: {strategy!r}")
    clause = template_text("adaptation.txt") + "\n" if adaptation else ""
    user = Template(template_text("pivot_base.txt")).substitute(
        question=task.question,
        evidence_section=_evidence_section(task),
        csv_catalog=_csv_catalog(linked, bundle),
        strategy_instruction=template_text(_STRATEGY_TEMPLATE[strategy]),
        adaptation_clause=clause,
    )
    return PromptText(system=_SYSTEM_PIVOT, user=user, kind="pivot",
                      strategy=strategy, adaptation=adaptation)


def build_sql_prompt(
    task: QueryTask,
    linked: LinkedSchema,
    pivot: PivotProgram,
    outcome: ExecutionOutcome,
    max_result_rows: int = DEFAULT_MAX_RESULT_ROWS,
) -> PromptText:
    """Second-stage prompt: one SQL query guided by a pivot program and its
    execution outcome (result rows when ok, diagnostic text otherwise)."""
    user = Template(template_text("sql_base.txt")).substitute(
        question=task.question,
        evidence_section=_evidence_section(task),
        schema_description=describe_schema(linked),
        pivot_source=pivot.source,
        outcome_section=_outcome_section(outcome, max_result_rows),
    )
    return PromptText(system=_SYSTEM_SQL, user=user, kind="sql")


def build_vanilla_prompt(task: QueryTask, linked: LinkedSchema) -> PromptText:
    """Direct-generation prompt: schema and question only, no program guidance."""
    user = Template(template_text("vanilla_base.txt")).substitute(
        question=task.question,
        evidence_section=_evidence_section(task),
        schema_description=describe_schema(linked),
    )
    return PromptText(system=_SYSTEM_SQL, user=user, kind="vanilla")


def build_refine_prompt(
    task: QueryTask,
    linked: LinkedSchema,
    prior_sql: str,
    prior_outcome: ExecutionOutcome,
    reference_table,
    max_result_rows: int = DEFAULT_MAX_RESULT_ROWS,
) -> PromptText:
    """Regeneration prompt showing the failed query, its outcome, and the
    independently voted expected result."""
    if prior_outcome.status == "ok":
        prior_section = ("The previous query executed but returned a different result:\n"
                         + serialize_result(prior_outcome.table, max_result_rows))
    else:
        prior_section = "The previous query failed with:\n" + prior_outcome.diagnostic
    user = Template(template_text("refine_base.txt")).substitute(
        question=task.question,
        evidence_section=_evidence_section(task),
        schema_description=describe_schema(linked),
        prior_sql=prior_sql if prior_sql.strip() else "(no query was produced)",
        prior_outcome_section=prior_section,
        reference_section=serialize_result(reference_table, max_result_rows),
    )
    return PromptText(system=_SYSTEM_SQL, user=user, kind="refine")


def build_linker_prompt(task: QueryTask, schema: DatabaseSchema) -> PromptText:
    lines = []
    for t in schema.tables:
        cols = ", ".join(c.name for c in t.columns)
        lines.append(f"- {t.name}: {cols}")
    user = (
        "Question: " + task.question + "\n"
        + (f"Hint: {task.evidence}\n" if task.evidence else "")
        + "Tables and columns:\n" + "\n".join(lines) + "\n\n"
        "List every table.column needed to answer the question, one per line."
    )
    return PromptText(system=_SYSTEM_LINKER, user=user, kind="linker")


_FENCE_RE = re.compile(r"```[ \t]*([^\n`]*)[ \t]*\n(.*?)```", re.DOTALL)
_KIND_TAGS = {
    "pivot": {"python", "py", "python3"},
    "sql": {"sql", "sqlite", "sqlite3"},
}
_LANGUAGE_WORDS = {"python", "py", "python3", "sql", "sqlite", "sqlite3"}


def _trim_language_line(body: str) -> str:
    lines = body.split("\n", 1)
    if lines and lines[0].strip().lower() in _LANGUAGE_WORDS:
        return lines[1] if len(lines) > 1 else ""
    return body


def extract_code_block(reply: str, kind: str) -> str:
    """Pull the program out of a model reply.

    Prefers the last fenced block tagged for the requested kind, then the
    last fenced block of any tag. For SQL, a fence-less reply may still yield
    the first statement starting with SELECT or WITH; trailing duplicate
    semicolons are collapsed.
    """
    if kind not in _KIND_TAGS:
        raise ValueError(f"unknown extraction kind: {kind!r}")
    blocks = _FENCE_RE.findall(reply)
    chosen: Optional[str] = None
    tagged = [body for tag, body in blocks if tag.strip().lower() in _KIND_TAGS[kind]]
    if tagged:
        chosen = tagged[-1]
    elif blocks:
        chosen = blocks[-1][1]
    if chosen is None:
        if kind == "sql":
            m = re.search(r"(?im)^[ \t]*(SELECT|WITH)\b", reply)
            if m:
                chosen = reply[m.start():]
        if chosen is None:
            raise NoCodeBlockError(f"no {kind} code block in reply")
    body = _trim_language_line(chosen).strip()
    if kind == "sql":
        body = re.sub(r";[\s;]*$", ";", body)
    if not body:
        raise NoCodeBlockError(f"extracted {kind} block is empty")
    return body
