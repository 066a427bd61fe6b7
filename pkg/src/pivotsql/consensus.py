"""Result canonicalization, equivalence, majority voting, and candidate selection.

Execution results are compared as multisets of rows: row order is ignored,
column order matters, column names do not. Floats are rounded to six decimal
places before comparison so that voting can hash results instead of doing
pairwise epsilon checks (which would not be transitive).
"""
from __future__ import annotations

import math
import unicodedata
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional, Sequence

if TYPE_CHECKING:
    from .prompt_forge import PivotProgram
    from .sql_runner import ExecutionOutcome, TimingStats

# Separators used inside canonical keys. Stable: recorded fixture files and
# their hashes depend on this encoding.
_UNIT_SEP = "\x1f"
_RECORD_SEP = "\x1e"

FLOAT_DECIMALS = 6


@dataclass
class ResultTable:
    """A rectangular execution result: column names plus rows of scalars."""

    columns: list[str] = field(default_factory=list)
    rows: list[tuple] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.rows = [tuple(r) for r in self.rows]

    @property
    def arity(self) -> int:
        if self.rows:
            return len(self.rows[0])
        return len(self.columns)

    def to_json_dict(self) -> dict:
        return {"columns": list(self.columns), "rows": [list(r) for r in self.rows]}

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ResultTable":
        return cls(columns=list(doc.get("columns", [])),
                   rows=[tuple(r) for r in doc.get("rows", [])])


@dataclass
class ReferenceResult:
    """The majority-voted result among pivot executions."""

    table: ResultTable
    support: int
    contributors: list[int]


@dataclass
class SqlCandidate:
    """One generated SQL program together with its execution outcome."""

    sql: str
    guiding_pivot: Optional["PivotProgram"] = None
    outcome: Optional["ExecutionOutcome"] = None
    timing: Optional["TimingStats"] = None


def _encode_cell(value) -> str:
    if value is None:
        return "N"
    if isinstance(value, bool):
        return "B1" if value else "B0"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return "NaN"
        if math.isinf(value):
            return "Inf" if value > 0 else "-Inf"
        rounded = round(value, FLOAT_DECIMALS)
        if rounded == int(rounded):
            # An integral float compares equal to the same-valued integer.
            return str(int(rounded))
        return repr(rounded)
    if isinstance(value, str):
        return unicodedata.normalize("NFC", value).strip()
    if isinstance(value, bytes):
        return "X" + value.hex()
    return unicodedata.normalize("NFC", str(value)).strip()


def canonicalize(table: ResultTable) -> str:
    """Return the canonical key of a result table.

    The key is the column count followed by the sorted row encodings, all
    joined by the record separator; cells within a row are joined by the unit
    separator. Two tables are equivalent iff their keys are equal.
    """
    encoded = sorted(_UNIT_SEP.join(_encode_cell(c) for c in row) for row in table.rows)
    return _RECORD_SEP.join([str(table.arity)] + encoded)


def equivalent(a: ResultTable, b: ResultTable) -> bool:
    """True iff the two tables hold the same multiset of rows."""
    return canonicalize(a) == canonicalize(b)


def most_frequent(outcomes: Sequence["ExecutionOutcome"]) -> Optional[ReferenceResult]:
    """Vote the reference result from a list of execution outcomes.

    Only outcomes with status ``ok`` vote; an error or timeout is not a
    result. Groups are formed by canonical key; the largest group wins, ties
    broken by the lexicographically smallest key. Returns None when nothing
    voted.
    """
    groups: dict[str, list[int]] = {}
    for i, outcome in enumerate(outcomes):
        if outcome.status != "ok":
            continue
        key = canonicalize(outcome.table)
        groups.setdefault(key, []).append(i)
    if not groups:
        return None
    best_key = min(groups, key=lambda k: (-len(groups[k]), k))
    contributors = groups[best_key]
    return ReferenceResult(
        table=outcomes[contributors[0]].table,
        support=len(contributors),
        contributors=contributors,
    )


def select_valid(cands: Sequence[SqlCandidate], ref: ReferenceResult) -> list[SqlCandidate]:
    """Keep candidates whose execution result matches the reference, in order."""
    return [
        c for c in cands
        if c.outcome is not None
        and c.outcome.status == "ok"
        and equivalent(c.outcome.table, ref.table)
    ]


def _rank_time(cand: SqlCandidate) -> float:
    if cand.timing is None or cand.timing.timed_out:
        return math.inf
    return cand.timing.representative


def pick_fastest(valid: Sequence[SqlCandidate]) -> SqlCandidate:
    """Return the candidate with the smallest representative execution time.

    Ties go to the earliest candidate; timed-out timings rank after all
    finite ones.
    """
    if not valid:
        raise ValueError("pick_fastest requires at least one candidate")
    best = valid[0]
    for cand in valid[1:]:
        if _rank_time(cand) < _rank_time(best):
            best = cand
    return best


def self_consistency_select(cands: Sequence[SqlCandidate]) -> Optional[SqlCandidate]:
    """Majority vote over the candidates' own execution results.

    The winning group is the most frequent result among ok candidates; within
    it the fastest member is returned (missing timings rank last, ties go to
    the earliest). Returns None when no candidate executed ok.
    """
    outcomes = [c.outcome for c in cands if c.outcome is not None]
    indexed = [c for c in cands if c.outcome is not None]
    ref = most_frequent(outcomes)
    if ref is None:
        return None
    group = [
        c for c in indexed
        if c.outcome.status == "ok" and equivalent(c.outcome.table, ref.table)
    ]
    return pick_fastest(group)
