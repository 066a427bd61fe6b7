"""Run one untrusted analysis program in a subprocess and capture its result.

The program runs with its working directory set to the CSV bundle (so data
files are reachable by bare name), a wall-clock limit, a scrubbed environment
with best-effort network blocking, and a fixed hash seed so its output is
reproducible. Its final stdout output must be a single JSON document; the
runner extracts the last parseable document, normalizes it into a columns +
rows table, and reports errors or timeouts with diagnostic text.

Paths inside tracebacks are rewritten to ``<program>`` so that identical
programs produce identical replies no matter where they were staged; recorded
replies stay valid across machines and temp directories.
"""
from __future__ import annotations

import json
import os
import signal
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

STDERR_TAIL_CHARS = 4000
FLOAT_SIG_DIGITS = 12


@dataclass
class HarnessRequest:
    program_path: Path
    bundle_dir: Path
    timeout: float
    workdir: Optional[Path] = None

    def __post_init__(self) -> None:
        self.program_path = Path(self.program_path)
        self.bundle_dir = Path(self.bundle_dir)
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if not self.program_path.is_file():
            raise FileNotFoundError(f"program not found: {self.program_path}")
        if not self.bundle_dir.is_dir():
            raise FileNotFoundError(f"bundle directory not found: {self.bundle_dir}")


@dataclass
class HarnessReply:
    status: str  # ok | error | timeout
    columns: list[str] = field(default_factory=list)
    rows: list[list] = field(default_factory=list)
    elapsed_ms: int = 0
    error_text: str = ""

    def to_json(self) -> str:
        return json.dumps({
            "status": self.status,
            "columns": self.columns,
            "rows": self.rows,
            "elapsed_ms": self.elapsed_ms,
            "error_text": self.error_text,
        }, sort_keys=True)


def _child_env(workdir: Path) -> dict[str, str]:
    env = {
        "PATH": os.environ.get("PATH", "/usr/bin:/bin"),
        "HOME": str(workdir),
        "TMPDIR": str(workdir),
        "LANG": "C.UTF-8",
        "PYTHONDONTWRITEBYTECODE": "1",
        "PYTHONNOUSERSITE": "1",
        "PYTHONIOENCODING": "utf-8",
        # set iteration order is part of program output; pin it
        "PYTHONHASHSEED": "0",
        # best-effort network blocking: point proxy-aware clients at a dead end
        "http_proxy": "http://127.0.0.1:9",
        "https_proxy": "http://127.0.0.1:9",
        "HTTP_PROXY": "http://127.0.0.1:9",
        "HTTPS_PROXY": "http://127.0.0.1:9",
        "no_proxy": "",
    }
    return env


def _normalize_cell(value):
    if value is None or isinstance(value, (bool, int, str)):
        return value
    if isinstance(value, float):
        return float(f"{value:.{FLOAT_SIG_DIGITS}g}")
    # nested structures and anything exotic become their JSON text
    try:
        return json.dumps(value, sort_keys=True)
    except (TypeError, ValueError):
        return str(value)


def _is_scalar(value) -> bool:
    return value is None or isinstance(value, (bool, int, float, str))


def _shape_table(doc) -> tuple[list[str], list[list]]:
    """Apply the scalar-wrapping rules and return (columns, rows).

    Raises ValueError for documents that cannot be shaped into a table.
    """
    if isinstance(doc, dict):
        if "columns" in doc and "rows" in doc:
            columns = [str(c) for c in doc["columns"]]
            rows = doc["rows"]
            if not isinstance(rows, list):
                raise ValueError("'rows' must be a list")
            shaped = []
            for row in rows:
                if not isinstance(row, list):
                    raise ValueError("each row must be a list")
                if len(row) != len(columns):
                    raise ValueError(
                        f"row arity {len(row)} does not match {len(columns)} columns")
                shaped.append([_normalize_cell(c) for c in row])
            return columns, shaped
        if "result" in doc and _is_scalar(doc["result"]):
            return ["result"], [[_normalize_cell(doc["result"])]]
        if "rows" in doc and isinstance(doc["rows"], list):
            rows = doc["rows"]
            if rows and isinstance(rows[0], list):
                width = len(rows[0])
                columns = [f"c{i}" for i in range(width)]
                return _shape_table({"columns": columns, "rows": rows})
        raise ValueError("document has neither columns+rows nor a scalar result")
    if isinstance(doc, list):
        if all(_is_scalar(v) for v in doc):
            return ["result"], [[_normalize_cell(v)] for v in doc]
        if all(isinstance(v, list) for v in doc):
            width = len(doc[0]) if doc else 0
            return _shape_table({"columns": [f"c{i}" for i in range(width)],
                                 "rows": doc})
        raise ValueError("list document mixes scalars and rows")
    if _is_scalar(doc):
        return ["result"], [[_normalize_cell(doc)]]
    raise ValueError(f"unsupported document type: {type(doc).__name__}")


# Fallback scan is bounded so pathological output cannot stall the harness.
_TAIL_SCAN_CHARS = 65536
_MAX_SCAN_ATTEMPTS = 2000


def _last_json_document(stdout: str):
    """Parse the last complete JSON document on stdout.

    Fast path: the final non-empty line is the document (the protocol) or a
    bare scalar; that handles arbitrarily large single-line results in one
    parse. Otherwise scan start positions within the tail from the end; only
    a chunk that parses cleanly through end-of-text counts, which uniquely
    identifies the final document even with prose or drafts before it.
    """
    # deeply nested input makes the decoder raise RecursionError; treat any
    # decoding blowup as "not a document"
    for line in reversed(stdout.splitlines()):
        line = line.strip()
        if not line:
            continue
        try:
            return json.loads(line)
        except (ValueError, RecursionError):
            break
    tail = stdout[-_TAIL_SCAN_CHARS:]
    starts = [i for i, ch in enumerate(tail) if ch in "{["]
    for i in reversed(starts[-_MAX_SCAN_ATTEMPTS:]):
        chunk = tail[i:].strip()
        try:
            return json.loads(chunk)
        except (ValueError, RecursionError):
            continue
    return None


def _kill_tree(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        proc.kill()


def run_pivot(req: HarnessRequest) -> HarnessReply:
    """Execute the program and shape its final stdout JSON into a reply."""
    own_workdir = req.workdir is None
    workdir = Path(req.workdir) if req.workdir else Path(tempfile.mkdtemp(prefix="pivot-run-"))
    workdir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    try:
        proc = subprocess.Popen(
            [sys.executable, str(req.program_path)],
            cwd=str(req.bundle_dir),
            env=_child_env(workdir),
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            start_new_session=True,
        )
        try:
            stdout, stderr = proc.communicate(timeout=req.timeout)
        except subprocess.TimeoutExpired:
            _kill_tree(proc)
            try:
                proc.communicate(timeout=2)
            except subprocess.TimeoutExpired:
                pass
            elapsed_ms = int((time.perf_counter() - start) * 1000)
            return HarnessReply(status="timeout", elapsed_ms=elapsed_ms,
                                error_text=f"timeout after {req.timeout:g} s")
    finally:
        if own_workdir:
            import shutil
            shutil.rmtree(workdir, ignore_errors=True)

    elapsed_ms = int((time.perf_counter() - start) * 1000)
    scrubbed_stderr = _scrub_paths(stderr, req)

    if proc.returncode != 0:
        text = scrubbed_stderr.strip()[-STDERR_TAIL_CHARS:]
        return HarnessReply(status="error", elapsed_ms=elapsed_ms,
                            error_text=text or f"exit code {proc.returncode}")

    doc = _last_json_document(stdout)
    if doc is None:
        return HarnessReply(status="error", elapsed_ms=elapsed_ms,
                            error_text="no JSON document found on stdout")
    try:
        columns, rows = _shape_table(doc)
    except ValueError as exc:
        return HarnessReply(status="error", elapsed_ms=elapsed_ms,
                            error_text=f"malformed result document: {exc}")
    return HarnessReply(status="ok", columns=columns, rows=rows,
                        elapsed_ms=elapsed_ms)


def _scrub_paths(text: str, req: HarnessRequest) -> str:
    """Replace staging paths so identical programs yield identical replies."""
    out = text.replace(str(req.program_path), "<program>")
    out = out.replace(str(req.bundle_dir), "<bundle>")
    return out
