"""Pick the tables and columns a question actually needs.

The heuristic linker matches normalized name tokens and quoted/capitalized
question literals against sampled column values, then closes over foreign
keys. It degrades to the full schema rather than risk dropping something the
generators need: precision failures only enlarge prompts, recall failures
sink the whole pipeline.
"""
from __future__ import annotations

import re
import sqlite3
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

from .db_catalog import DatabaseHandle, DatabaseSchema, QueryTask, _open_readonly

if TYPE_CHECKING:
    from .llm_gateway import Gateway

DEFAULT_VALUE_SCAN_LIMIT = 2000

# Name tokens too generic to select a table/column on their own.
_STOP_TOKENS = {
    "the", "a", "an", "of", "in", "on", "for", "to", "and", "or", "is", "are",
    "what", "which", "how", "many", "much", "who", "whose", "when", "where",
    "list", "show", "give", "find", "number", "id", "name", "value", "with",
    "that", "than", "from", "by", "all", "per", "each", "between", "have",
    "has", "do", "does", "did", "was", "were", "be", "not", "no", "at",
}


@dataclass
class LinkerConfig:
    mode: str = "heuristic"  # heuristic | llm | all
    value_scan_limit: int = DEFAULT_VALUE_SCAN_LIMIT


@dataclass
class LinkedSchema:
    """Ordered table -> column selection plus a per-column reason tag.

    Keeps a reference to the source schema so downstream prompt builders can
    render declared types and key relationships for the linked subset.
    """

    tables: dict[str, list[str]] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)  # "table.column" -> reason
    source: Optional[DatabaseSchema] = None

    def column_count(self) -> int:
        return sum(len(cols) for cols in self.tables.values())


def _split_words(name: str) -> list[str]:
    # snake_case, kebab-case, spaces, and camelCase boundaries
    parts = re.split(r"[_\-\s]+", name)
    words = []
    for part in parts:
        words.extend(re.findall(r"[A-Z]+(?=[A-Z][a-z])|[A-Z]?[a-z]+|[A-Z]+|\d+", part))
    return [w for w in words if w]


def _stem(word: str) -> str:
    w = word.lower()
    if len(w) > 4 and w.endswith("ies"):
        return w[:-3] + "y"
    if len(w) > 3 and w.endswith("s") and not w.endswith("ss"):
        return w[:-1]
    return w


def normalize_tokens(text: str) -> set[str]:
    """Lowercased, plural-stripped word stems of an identifier or sentence."""
    return {_stem(w) for w in _split_words(text)}


def _question_literals(task: QueryTask) -> list[str]:
    """Quoted strings and capitalized runs from the question and evidence."""
    text = f"{task.question} {task.evidence}"
    literals = re.findall(r"\"([^\"]+)\"|'([^']+)'|‘([^’]+)’", text)
    found = [next(s for s in groups if s) for groups in literals if any(groups)]
    # Capitalized multi-word runs ("South Bohemia"), skipping sentence starts.
    for match in re.finditer(r"(?<![.!?]\s)(?<!^)\b([A-Z][a-z]+(?:\s+[A-Z][a-z]+)+)\b", text):
        found.append(match.group(1))
    seen: dict[str, None] = {}
    for lit in found:
        seen.setdefault(lit.strip(), None)
    return [l for l in seen if l]


def _full_selection(schema: DatabaseSchema, reason: str) -> LinkedSchema:
    linked = LinkedSchema(source=schema)
    for t in schema.tables:
        linked.tables[t.name] = t.column_names()
        for c in t.columns:
            linked.provenance[f"{t.name}.{c.name}"] = reason
    return linked


def _is_text_type(declared: str) -> bool:
    d = declared.upper()
    return "CHAR" in d or "TEXT" in d or "CLOB" in d or d == ""


def _scan_values(db: DatabaseHandle, table: str, column: str, limit: int) -> list[str]:
    conn = _open_readonly(db)
    try:
        cur = conn.execute(
            f'SELECT DISTINCT "{column}" FROM "{table}" LIMIT {int(limit)}'
        )
        return [r[0] for r in cur.fetchall() if isinstance(r[0], str)]
    except sqlite3.Error:
        return []
    finally:
        conn.close()


def _close_over_keys(schema: DatabaseSchema, picked: dict[str, dict[str, str]]) -> None:
    """Grow the selection until every picked table carries its PK and FK
    columns and every FK target table (with the referenced column) is present."""
    changed = True
    while changed:
        changed = False
        for table in list(picked):
            info = schema.table(table)
            for col in info.columns:
                if col.is_primary_key and col.name not in picked[table]:
                    picked[table][col.name] = "fk-closure"
                    changed = True
            for local, foreign_table, foreign_col in info.foreign_keys:
                if local and local not in picked[table]:
                    picked[table][local] = "fk-closure"
                    changed = True
                if foreign_table not in {t.name for t in schema.tables}:
                    continue
                if foreign_table not in picked:
                    picked[foreign_table] = {}
                    changed = True
                target = foreign_col or next(
                    (c.name for c in schema.table(foreign_table).columns if c.is_primary_key),
                    "",
                )
                if target and target not in picked[foreign_table]:
                    picked[foreign_table][target] = "fk-closure"
                    changed = True


def _ordered(schema: DatabaseSchema, picked: dict[str, dict[str, str]]) -> LinkedSchema:
    linked = LinkedSchema(source=schema)
    for t in schema.tables:
        if t.name not in picked:
            continue
        cols = [c.name for c in t.columns if c.name in picked[t.name]]
        if not cols:
            continue
        linked.tables[t.name] = cols
        for c in cols:
            linked.provenance[f"{t.name}.{c}"] = picked[t.name][c]
    return linked


def link_schema(
    schema: DatabaseSchema,
    task: QueryTask,
    db: DatabaseHandle,
    config: Optional[LinkerConfig] = None,
) -> LinkedSchema:
    """Deterministic heuristic linking: name stems, value matches, key closure.

    Falls back to the full schema when nothing matches or config.mode is
    ``all``.
    """
    config = config or LinkerConfig()
    if config.mode == "all":
        return _full_selection(schema, "all")

    question_tokens = normalize_tokens(task.question) | normalize_tokens(task.evidence)
    question_tokens -= _STOP_TOKENS
    literals = _question_literals(task)
    lowered_literals = [l.lower() for l in literals]

    picked: dict[str, dict[str, str]] = {}

    def pick(table: str, column: str, reason: str) -> None:
        picked.setdefault(table, {})
        picked[table].setdefault(column, reason)

    for t in schema.tables:
        table_tokens = normalize_tokens(t.name) - _STOP_TOKENS
        table_hit = bool(table_tokens & question_tokens)
        for col in t.columns:
            col_tokens = normalize_tokens(col.name) - _STOP_TOKENS
            if col_tokens & question_tokens:
                pick(t.name, col.name, "name-match")
            elif table_hit:
                pick(t.name, col.name, "name-match")

    if lowered_literals:
        for t in schema.tables:
            for col in t.columns:
                if not _is_text_type(col.declared_type):
                    continue
                values = _scan_values(db, t.name, col.name, config.value_scan_limit)
                lowered = {v.strip().lower() for v in values}
                if any(lit in lowered for lit in lowered_literals):
                    pick(t.name, col.name, "value-match")

    if not picked:
        return _full_selection(schema, "all")

    _close_over_keys(schema, picked)
    return _ordered(schema, picked)


def _parse_linker_reply(reply: str) -> list[tuple[str, str]]:
    pairs = re.findall(r"([A-Za-z_][\w]*)\s*\.\s*([A-Za-z_][\w]*)", reply)
    out: dict[tuple[str, str], None] = {}
    for t, c in pairs:
        out.setdefault((t, c), None)
    return list(out)


def link_schema_llm(
    schema: DatabaseSchema,
    task: QueryTask,
    gateway: "Gateway",
    config: Optional[LinkerConfig] = None,
    db: Optional[DatabaseHandle] = None,
) -> LinkedSchema:
    """Ask the model for relevant table.column pairs; intersect with the real
    schema and close over keys. Any parse failure falls back to the heuristic
    linker (which needs `db` for value scans)."""
    from .prompt_forge import build_linker_prompt

    config = config or LinkerConfig()

    def fallback() -> LinkedSchema:
        if db is not None:
            return link_schema(schema, task, db, config)
        return _full_selection(schema, "all")

    try:
        record = gateway.complete(build_linker_prompt(task, schema))
    except Exception:
        if db is None:
            raise
        return fallback()

    known = {t.name: {c.name for c in t.columns} for t in schema.tables}
    picked: dict[str, dict[str, str]] = {}
    for table, column in _parse_linker_reply(record.reply):
        if table in known and column in known[table]:
            picked.setdefault(table, {})
            picked[table].setdefault(column, "llm")
    if not picked:
        return fallback()
    _close_over_keys(schema, picked)
    return _ordered(schema, picked)
