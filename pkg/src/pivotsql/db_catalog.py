"""SQLite catalog introspection, CSV export of linked tables, benchmark loading.

Databases follow the BIRD dev layout ``<root>/<db_id>/<db_id>.sqlite`` and are
always opened read-only. CSV export uses a fixed dialect (comma, quote only
when needed, LF, UTF-8) so exports are byte-reproducible; NULL becomes an
empty unquoted field while an empty string becomes ``""``, and the bundle
manifest records declared column types so consumers can tell them apart.
"""
from __future__ import annotations

import json
import sqlite3
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional

if TYPE_CHECKING:
    from .schema_link import LinkedSchema

DIFFICULTIES = ("simple", "moderate", "challenging")


class CatalogError(Exception):
    """Database file missing, unreadable, or not a SQLite database."""


class BenchmarkFormatError(Exception):
    """Benchmark JSON violates the documented task schema."""


@dataclass(frozen=True)
class DatabaseHandle:
    path: Path
    db_id: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "path", Path(self.path))
        if not self.db_id:
            raise CatalogError("db_id must be non-empty")


def handle_for(db_root: Path | str, db_id: str) -> DatabaseHandle:
    """Resolve a database id under a BIRD-style root directory."""
    path = Path(db_root) / db_id / f"{db_id}.sqlite"
    if not path.is_file():
        raise CatalogError(f"database file not found: {path}")
    return DatabaseHandle(path=path, db_id=db_id)


@dataclass
class ColumnInfo:
    name: str
    declared_type: str
    is_primary_key: bool = False


@dataclass
class TableInfo:
    name: str
    columns: list[ColumnInfo]
    foreign_keys: list[tuple[str, str, str]]  # (local column, foreign table, foreign column)
    row_count: int

    def column_names(self) -> list[str]:
        return [c.name for c in self.columns]


@dataclass
class DatabaseSchema:
    tables: list[TableInfo]

    def table(self, name: str) -> TableInfo:
        for t in self.tables:
            if t.name == name:
                return t
        raise KeyError(name)

    def table_names(self) -> list[str]:
        return [t.name for t in self.tables]


@dataclass
class QueryTask:
    question_id: int
    db_id: str
    question: str
    evidence: str = ""
    difficulty: str = "unknown"
    gold_sql: Optional[str] = None


@dataclass
class CsvBundle:
    directory: Path
    files: dict[str, Path]
    manifest: dict
    build_elapsed: float


def _open_readonly(db: DatabaseHandle) -> sqlite3.Connection:
    if not Path(db.path).is_file():
        raise CatalogError(f"database file not found: {db.path}")
    uri = f"file:{db.path}?mode=ro"
    try:
        conn = sqlite3.connect(uri, uri=True)
        conn.execute("SELECT 1 FROM sqlite_master LIMIT 1")
    except sqlite3.DatabaseError as exc:
        raise CatalogError(f"not a readable SQLite database: {db.path}: {exc}") from exc
    conn.text_factory = str
    return conn


def introspect_schema(db: DatabaseHandle) -> DatabaseSchema:
    """Read every user table with columns, keys, and row counts, in catalog order."""
    conn = _open_readonly(db)
    try:
        names = [
            r[0] for r in conn.execute(
                "SELECT name FROM sqlite_master "
                "WHERE type = 'table' AND name NOT LIKE 'sqlite_%' ORDER BY rowid"
            )
        ]
        tables = []
        for name in names:
            try:
                cols = [
                    ColumnInfo(name=r[1], declared_type=r[2] or "", is_primary_key=r[5] > 0)
                    for r in conn.execute(f'PRAGMA table_info("{name}")')
                ]
                fks = [
                    (r[3], r[2], r[4] if r[4] is not None else "")
                    for r in conn.execute(f'PRAGMA foreign_key_list("{name}")')
                ]
                row_count = conn.execute(f'SELECT COUNT(*) FROM "{name}"').fetchone()[0]
            except sqlite3.DatabaseError as exc:
                raise CatalogError(f"corrupted catalog for table {name!r}: {exc}") from exc
            tables.append(TableInfo(name=name, columns=cols, foreign_keys=fks,
                                    row_count=row_count))
        return DatabaseSchema(tables=tables)
    finally:
        conn.close()


def _csv_field(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        text = value
        if text == "":
            return '""'
    elif isinstance(value, float):
        text = repr(value)
    elif isinstance(value, bytes):
        text = value.decode("utf-8", errors="replace")
    else:
        text = str(value)
    if any(ch in text for ch in (',', '"', '\n', '\r')):
        return '"' + text.replace('"', '""') + '"'
    return text


def export_csv(db: DatabaseHandle, linked: "LinkedSchema", out_dir: Path | str) -> CsvBundle:
    """Export each linked table's linked columns to ``<table>.csv`` under out_dir.

    Header row first, all rows, no sampling. Writes ``manifest.json`` with
    per-table columns, declared types, and row counts.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    conn = _open_readonly(db)
    files: dict[str, Path] = {}
    manifest_tables: dict[str, dict] = {}
    try:
        schema = introspect_schema(db)
        known = {t.name: t for t in schema.tables}
        for table, columns in linked.tables.items():
            if table not in known:
                raise CatalogError(f"unknown table in linked schema: {table}")
            declared = {c.name: c.declared_type for c in known[table].columns}
            missing = [c for c in columns if c not in declared]
            if missing:
                raise CatalogError(f"unknown columns in linked schema: {table}.{missing}")
            col_list = ", ".join(f'"{c}"' for c in columns)
            path = out / f"{table}.csv"
            n_rows = 0
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(",".join(_csv_field(c) for c in columns) + "\n")
                for row in conn.execute(f'SELECT {col_list} FROM "{table}"'):
                    fh.write(",".join(_csv_field(v) for v in row) + "\n")
                    n_rows += 1
            files[table] = path
            manifest_tables[table] = {
                "columns": list(columns),
                "rows": n_rows,
                "types": [declared[c] for c in columns],
            }
    finally:
        conn.close()
    elapsed = time.perf_counter() - start
    manifest = {"tables": manifest_tables, "build_elapsed_s": elapsed}
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return CsvBundle(directory=out, files=files, manifest=manifest, build_elapsed=elapsed)


def _as_difficulty(value) -> str:
    return value if value in DIFFICULTIES else "unknown"


def load_benchmark(path: Path | str) -> list[QueryTask]:
    """Load a benchmark JSON array into QueryTasks, preserving order."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise BenchmarkFormatError(f"benchmark file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise BenchmarkFormatError(f"benchmark is not valid JSON: {exc}") from exc
    if not isinstance(data, list):
        raise BenchmarkFormatError("benchmark must be a JSON array of task objects")
    tasks = []
    for i, element in enumerate(data):
        if not isinstance(element, dict):
            raise BenchmarkFormatError(f"task[{i}]: expected an object")
        for key in ("question", "db_id"):
            if key not in element or not element[key]:
                raise BenchmarkFormatError(f"task[{i}]: missing mandatory key {key!r}")
        tasks.append(QueryTask(
            question_id=int(element.get("question_id", i)),
            db_id=element["db_id"],
            question=element["question"],
            evidence=element.get("evidence") or "",
            difficulty=_as_difficulty(element.get("difficulty")),
            gold_sql=element.get("SQL") or None,
        ))
    return tasks
