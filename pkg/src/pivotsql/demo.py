"""Build the frozen demo suite: two toy databases, a five-question benchmark,
recorded completions, recorded pivot outcomes, and the expected decisions.

The suite exercises every selection path: a cross-verified pick between a
fast and a slow valid candidate, a pick with a single valid candidate, a
self-consistency fallback after pivot crashes, a fallback after every
candidate mismatches (recoverable via refinement), and a total failure.

Replies are authored here and recorded under the same content keys the
pipeline computes at runtime, so replay runs need no model and no pivot
interpreter. Pivot outcomes are recorded through the real harness command so
that a live-harness run reproduces the recorded prompts exactly.

Expected decisions are derived from the documented selection rules and
engine-executed results, never by running the pipeline itself. Gold queries
carry a deliberate constant-result slowdown so speed-ratio rewards sit far
from tier boundaries and the frozen metrics are stable on any machine.

Regenerate with:  python -m pivotsql.demo <out_dir>
"""
from __future__ import annotations

import argparse
import json
import shutil
import sqlite3
import sys
import tempfile
from pathlib import Path

from .consensus import canonicalize, equivalent, most_frequent
from .db_catalog import DatabaseHandle, export_csv, introspect_schema, load_benchmark
from .llm_gateway import CompletionRecord, FixtureStore, completion_key
from .pipeline import (
    MISSING_PIVOT_SOURCE,
    PivotOutcomeStore,
    RecordingPivotExecutor,
    SubprocessHarnessExecutor,
)
from .prompt_forge import (
    STRATEGY_ORDER,
    PivotProgram,
    build_pivot_prompt,
    build_refine_prompt,
    build_sql_prompt,
    build_vanilla_prompt,
    extract_code_block,
)
from .schema_link import link_schema
from .sql_runner import ExecutionOutcome, execute_sql

MODEL = "demo-model"
MAX_TOKENS = 4096
CITIES = ("Springfield", "Shelbyville", "Ogdenville", "North Haverbrook")
COUNTRIES = ("Norway", "Sweden", "Denmark", "Finland")
AUTHOR_NAMES = (
    "Sigrid Holm", "Anders Lund", "Maja Berg", "Henrik Dahl", "Ingrid Foss",
    "Lars Vik", "Astrid Moen", "Erik Strand", "Nora Lie", "Jonas Hagen",
    "Elin Bakke", "Petter Aas", "Karin Solberg", "Olav Nes", "Tove Lunde",
    "Bjorn Rud", "Hanna Eide", "Stein Roe", "Liv Haugen", "Arne Myhre",
)

RETAIL_SLOWDOWN = "(SELECT COUNT(*) FROM orders a, orders b) >= 0"
LIBRARY_SLOWDOWN = "(SELECT COUNT(*) FROM books x, books y, books z, authors w) >= 0"


# --- toy databases -----------------------------------------------------------

def build_retail(path: Path) -> None:
    conn = sqlite3.connect(path)
    conn.executescript("""
        CREATE TABLE customers (
            id INTEGER PRIMARY KEY,
            name TEXT,
            city TEXT
        );
        CREATE TABLE orders (
            id INTEGER PRIMARY KEY,
            customer_id INTEGER,
            amount REAL,
            status TEXT,
            FOREIGN KEY (customer_id) REFERENCES customers(id)
        );
    """)
    conn.executemany(
        "INSERT INTO customers VALUES (?, ?, ?)",
        [(c, f"Customer {c:02d}", CITIES[(c - 1) % 4]) for c in range(1, 41)])
    conn.executemany(
        "INSERT INTO orders VALUES (?, ?, ?, ?)",
        [(i, (i % 40) + 1, 5.0 + (i % 160) * 0.25,
          ("shipped", "pending", "cancelled")[i % 3]) for i in range(1, 801)])
    conn.commit()
    conn.close()


def build_library(path: Path) -> None:
    conn = sqlite3.connect(path)
    conn.executescript("""
        CREATE TABLE authors (
            id INTEGER PRIMARY KEY,
            name TEXT,
            country TEXT
        );
        CREATE TABLE books (
            id INTEGER PRIMARY KEY,
            title TEXT,
            author_id INTEGER,
            year INTEGER,
            pages INTEGER,
            FOREIGN KEY (author_id) REFERENCES authors(id)
        );
    """)
    conn.executemany(
        "INSERT INTO authors VALUES (?, ?, ?)",
        [(a, AUTHOR_NAMES[a - 1], COUNTRIES[(a - 1) % 4]) for a in range(1, 21)])
    conn.executemany(
        "INSERT INTO books VALUES (?, ?, ?, ?, ?)",
        [(i + 1, f"Book {i + 1:02d}", (i % 20) + 1, 1950 + (i % 70),
          80 + (i * 37) % 400) for i in range(60)])
    conn.commit()
    conn.close()


# --- authored programs and queries -------------------------------------------

Q0_PIVOTS = {
    "merge_first": '''\
import csv
import json

with open("customers.csv", newline="", encoding="utf-8") as fh:
    customers = {row["id"]: row for row in csv.DictReader(fh)}

joined = []
with open("orders.csv", newline="", encoding="utf-8") as fh:
    for row in csv.DictReader(fh):
        row["city"] = customers.get(row["customer_id"], {}).get("city")
        joined.append(row)

shipped = [row for row in joined if row["status"] == "shipped"]
print(json.dumps({"columns": ["n_shipped"], "rows": [[len(shipped)]]}))
''',
    "filter_first": '''\
import csv
import json

count = 0
with open("orders.csv", newline="", encoding="utf-8") as fh:
    for row in csv.DictReader(fh):
        if row["status"] == "shipped":
            count += 1

print(json.dumps({"columns": ["n_shipped"], "rows": [[count]]}))
''',
    "direct": '''\
import csv
import json

with open("orders.csv", newline="", encoding="utf-8") as fh:
    statuses = [row["status"] for row in csv.DictReader(fh)]

print(json.dumps({"result": statuses.count("shipped")}))
''',
}

Q0_SQL = {
    "merge_first": "SELECT COUNT(*) FROM orders WHERE status = 'shipped';",
    "filter_first": ("SELECT COUNT(*) FROM orders WHERE status = 'shipped' "
                     f"AND {RETAIL_SLOWDOWN};"),
    "direct": "SELECT COUNT(*) FROM orders WHERE status = 'pending';",
}

Q1_PIVOTS = {
    "merge_first": '''\
import csv
import json

with open("customers.csv", newline="", encoding="utf-8") as fh:
    customers = {row["id"]: row for row in csv.DictReader(fh)}

total = 0.0
with open("orders.csv", newline="", encoding="utf-8") as fh:
    for row in csv.DictReader(fh):
        customer = customers.get(row["customer_id"])
        if customer is None:
            continue
        if row["status"] == "shipped" and customer["city"] == "Springfield":
            total += float(row["amount"])

print(json.dumps({"columns": ["total_amount"], "rows": [[round(total, 2)]]}))
''',
    "filter_first": '''\
import csv
import json

with open("customers.csv", newline="", encoding="utf-8") as fh:
    springfield_ids = {row["id"] for row in csv.DictReader(fh)
                       if row["city"] == "Springfield"}

total = 0.0
with open("orders.csv", newline="", encoding="utf-8") as fh:
    for row in csv.DictReader(fh):
        if row["status"] == "shipped" and row["customer_id"] in springfield_ids:
            total += float(row["amount"])

print(json.dumps({"columns": ["total_amount"], "rows": [[round(total, 2)]]}))
''',
    # forgets the city filter; votes for a different result
    "direct": '''\
import csv
import json

total = 0.0
with open("orders.csv", newline="", encoding="utf-8") as fh:
    for row in csv.DictReader(fh):
        if row["status"] == "shipped":
            total += float(row["amount"])

print(json.dumps({"result": round(total, 2)}))
''',
}

Q1_SQL = {
    "merge_first": ("SELECT SUM(o.amount) FROM orders o "
                    "JOIN customers c ON o.customer_id = c.id "
                    "WHERE o.status = 'shipped' AND c.city = 'Springfield';"),
    "filter_first": ("SELECT SUM(o.amount) FROM orders o "
                     "JOIN customers c ON o.customer_id = c.id "
                     "WHERE o.status = 'shipped' AND c.city = 'Shelbyville';"),
    "direct": "SELECT SUM(amount) FROM orders WHERE status = 'shipped';",
}

Q2_PIVOTS = {
    "merge_first": '''\
import csv
import json

with open("authors.csv", newline="", encoding="utf-8") as fh:
    authors = {row["id"]: row for row in csv.DictReader(fh)}

count = 0
with open("books.csv", newline="", encoding="utf-8") as fh:
    for row in csv.DictReader(fh):
        author = authors.get(row["author_id"], {})
        if author["nation"] == "Norway":
            count += 1

print(json.dumps({"result": count}))
''',
    "filter_first": '''\
import csv
import json

norwegian_ids = set()
with open("authors.csv", newline="", encoding="utf-8") as fh:
    for row in csv.DictReader(fh):
        if row["nation"] == "Norway":
            norwegian_ids.add(row["id"])

with open("books.csv", newline="", encoding="utf-8") as fh:
    n = sum(1 for row in csv.DictReader(fh) if row["author_id"] in norwegian_ids)

print(json.dumps({"result": n}))
''',
    "direct": '''\
import csv
import json

with open("authors.csv", newline="", encoding="utf-8") as fh:
    rows = list(csv.DictReader(fh))

norway = [row["id"] for row in rows if row["nation"] == "Norway"]
with open("books.csv", newline="", encoding="utf-8") as fh:
    books = [row for row in csv.DictReader(fh) if row["author_id"] in set(norway)]

print(json.dumps({"result": len(books)}))
''',
}

Q2_SQL = {
    "merge_first": ("SELECT COUNT(*) FROM books b "
                    "JOIN authors a ON b.author_id = a.id "
                    "WHERE a.country = 'Norway';"),
    "filter_first": ("SELECT COUNT(*) FROM books b "
                     "JOIN authors a ON b.author_id = a.id "
                     f"WHERE a.country = 'Norway' AND {LIBRARY_SLOWDOWN};"),
    "direct": "SELECT COUNT(*) FROM authors WHERE country = 'Norway';",
}

Q3_PIVOTS = {
    "merge_first": '''\
import csv
import json

with open("authors.csv", newline="", encoding="utf-8") as fh:
    names = {row["id"]: row["name"] for row in csv.DictReader(fh)}

joined = []
with open("books.csv", newline="", encoding="utf-8") as fh:
    for row in csv.DictReader(fh):
        joined.append((names[row["author_id"]], int(row["pages"])))

totals = {}
for name, pages in joined:
    totals[name] = totals.get(name, 0) + pages

best = max(sorted(totals), key=lambda name: totals[name])
print(json.dumps({"columns": ["name"], "rows": [[best]]}))
''',
    "filter_first": '''\
import csv
import json

page_sums = {}
with open("books.csv", newline="", encoding="utf-8") as fh:
    for row in csv.DictReader(fh):
        key = row["author_id"]
        page_sums[key] = page_sums.get(key, 0) + int(row["pages"])

best_id = max(sorted(page_sums), key=lambda k: page_sums[k])

with open("authors.csv", newline="", encoding="utf-8") as fh:
    winner = next(row["name"] for row in csv.DictReader(fh) if row["id"] == best_id)

print(json.dumps({"columns": ["name"], "rows": [[winner]]}))
''',
    "direct": '''\
import csv
import json

books = []
with open("books.csv", newline="", encoding="utf-8") as fh:
    books = list(csv.DictReader(fh))
with open("authors.csv", newline="", encoding="utf-8") as fh:
    authors = list(csv.DictReader(fh))

best_name, best_total = None, -1
for author in authors:
    total = sum(int(b["pages"]) for b in books if b["author_id"] == author["id"])
    if total > best_total:
        best_name, best_total = author["name"], total

print(json.dumps({"columns": ["name"], "rows": [[best_name]]}))
''',
}

Q3_SQL = {
    # extra aggregate column: mismatches the one-column reference
    "merge_first": ("SELECT a.name, SUM(b.pages) AS total_pages FROM authors a "
                    "JOIN books b ON b.author_id = a.id "
                    "GROUP BY a.id ORDER BY total_pages DESC LIMIT 1;"),
    # ranks by the longest single book instead of the total
    "filter_first": ("SELECT a.name FROM authors a "
                     "JOIN books b ON b.author_id = a.id "
                     "GROUP BY a.id ORDER BY MAX(b.pages) DESC, a.id LIMIT 1;"),
    # returns the page total instead of the name
    "direct": ("SELECT SUM(b.pages) FROM books b "
               "GROUP BY b.author_id ORDER BY SUM(b.pages) DESC LIMIT 1;"),
}

Q3_REFINED_SQL = ("SELECT a.name FROM authors a JOIN books b ON b.author_id = a.id "
                  "GROUP BY a.id, a.name ORDER BY SUM(b.pages) DESC LIMIT 1;")

VANILLA_SQL = {
    0: "SELECT COUNT(*) FROM orders WHERE status = 'shipped';",
    1: ("SELECT SUM(o.amount) FROM orders o JOIN customers c "
        "ON o.customer_id = c.id WHERE o.status = 'shipped' "
        "AND c.city = 'Springfield';"),
    # joins on the wrong key
    2: ("SELECT COUNT(*) FROM books b JOIN authors a ON b.id = a.id "
        "WHERE a.country = 'Norway';"),
    3: Q3_SQL["merge_first"],
}

GOLD_SQL = {
    0: f"SELECT COUNT(*) FROM orders WHERE status = 'shipped' AND {RETAIL_SLOWDOWN};",
    1: ("SELECT SUM(o.amount) FROM orders o JOIN customers c ON o.customer_id = c.id "
        "WHERE o.status = 'shipped' AND c.city = 'Springfield' "
        f"AND {RETAIL_SLOWDOWN};"),
    2: ("SELECT COUNT(*) FROM books b JOIN authors a ON b.author_id = a.id "
        f"WHERE a.country = 'Norway' AND {LIBRARY_SLOWDOWN};"),
    3: ("SELECT a.name FROM authors a JOIN books b ON b.author_id = a.id "
        "WHERE " + LIBRARY_SLOWDOWN + " "
        "GROUP BY a.id, a.name ORDER BY SUM(b.pages) DESC LIMIT 1;"),
    4: "SELECT COUNT(*) FROM customers WHERE city = 'Ogdenville';",
}

PROSE_REPLY = ("I looked at the schema but I am not confident enough to produce "
               "a reliable answer for this one. Payment clearing is not recorded "
               "anywhere I can see, so any computation would be a guess.")


def benchmark_tasks() -> list[dict]:
    return [
        {"question_id": 0, "db_id": "retail", "difficulty": "simple",
         "question": "How many orders have status 'shipped'?",
         "evidence": "status values are lowercase",
         "SQL": GOLD_SQL[0]},
        {"question_id": 1, "db_id": "retail", "difficulty": "moderate",
         "question": "What is the total amount of shipped orders placed by "
                     "customers in Springfield?",
         "evidence": "",
         "SQL": GOLD_SQL[1]},
        {"question_id": 2, "db_id": "library", "difficulty": "simple",
         "question": "How many books were written by authors from 'Norway'?",
         "evidence": "country names are stored in English",
         "SQL": GOLD_SQL[2]},
        {"question_id": 3, "db_id": "library", "difficulty": "challenging",
         "question": "Which author wrote the most pages in total? Report the "
                     "author's name.",
         "evidence": "sum the pages of each author's books",
         "SQL": GOLD_SQL[3]},
        {"question_id": 4, "db_id": "retail", "difficulty": "challenging",
         "question": "For each city, what fraction of orders were cancelled "
                     "before the payment cleared?",
         "evidence": "",
         "SQL": GOLD_SQL[4]},
    ]


def pivot_reply(program: str, note: str) -> str:
    return f"{note}\n\n```python\n{program}```\n\nThe final line prints the answer document."


def sql_reply(query: str) -> str:
    return f"Based on the program and its outcome:\n\n```sql\n{query}\n```"


class DemoBuilder:
    def __init__(self, out_dir: Path, harness_cmd: list[str]):
        self.out = Path(out_dir)
        self.harness_cmd = harness_cmd
        self.tmp = Path(tempfile.mkdtemp(prefix="demo-build-"))
        self.completions: FixtureStore | None = None
        self.pivot_store: PivotOutcomeStore | None = None

    # -- fixture plumbing ---------------------------------------------------

    def record_completion(self, prompt, reply: str, sample_index: int = 0,
                          temperature: float = 0.0) -> str:
        key = completion_key(MODEL, temperature, MAX_TOKENS, sample_index,
                             prompt.system, prompt.user)
        if self.completions.get(key) is None:
            self.completions.put(CompletionRecord(
                prompt_hash=key, reply=reply,
                prompt_tokens=len(prompt.user) // 4,
                completion_tokens=len(reply) // 4,
                elapsed=0.5))
        return key

    def run_pivot(self, source: str, bundle, db: DatabaseHandle):
        executor = RecordingPivotExecutor(
            SubprocessHarnessExecutor(self.harness_cmd), self.pivot_store)
        program = PivotProgram(source=source, strategy="direct")
        return executor.execute(program, bundle, timeout=30.0)

    # -- per-question authoring ----------------------------------------------

    def build(self) -> None:
        if self.out.exists():
            shutil.rmtree(self.out)
        (self.out / "databases" / "retail").mkdir(parents=True)
        (self.out / "databases" / "library").mkdir(parents=True)
        (self.out / "fixtures").mkdir()
        (self.out / "expected").mkdir()
        build_retail(self.out / "databases" / "retail" / "retail.sqlite")
        build_library(self.out / "databases" / "library" / "library.sqlite")
        (self.out / "benchmark.json").write_text(
            json.dumps(benchmark_tasks(), indent=2) + "\n", encoding="utf-8")

        self.completions = FixtureStore(self.out / "fixtures" / "completions.jsonl")
        self.pivot_store = PivotOutcomeStore(self.out / "fixtures" / "pivot_outcomes.jsonl")

        tasks = load_benchmark(self.out / "benchmark.json")
        handles = {
            "retail": DatabaseHandle(
                path=self.out / "databases" / "retail" / "retail.sqlite",
                db_id="retail"),
            "library": DatabaseHandle(
                path=self.out / "databases" / "library" / "library.sqlite",
                db_id="library"),
        }

        contexts = {}
        for task in tasks:
            db = handles[task.db_id]
            schema = introspect_schema(db)
            linked = link_schema(schema, task, db)
            bundle = export_csv(db, linked, self.tmp / f"bundle-q{task.question_id}")
            contexts[task.question_id] = (task, db, linked, bundle)

        pivots_by_q = {
            0: Q0_PIVOTS,
            1: Q1_PIVOTS,
            2: Q2_PIVOTS,
            3: Q3_PIVOTS,
        }
        sql_by_q = {0: Q0_SQL, 1: Q1_SQL, 2: Q2_SQL, 3: Q3_SQL}
        notes = {
            "merge_first": "Joining the tables first, then filtering.",
            "filter_first": "Filtering each file first, then combining.",
            "direct": "Here is a straightforward solution.",
        }

        expectations: dict[str, dict] = {m: {} for m in (
            "pisql", "pisql_refine", "vanilla", "vanilla_sc", "mixed_sc",
            "single_strategy:merge")}

        for qid in (0, 1, 2, 3):
            task, db, linked, bundle = contexts[qid]
            candidates = []
            pivot_outcomes = []
            for strategy in STRATEGY_ORDER:
                source_text = pivots_by_q[qid][strategy]
                reply = pivot_reply(source_text, notes[strategy])
                prompt = build_pivot_prompt(task, linked, bundle, strategy, True)
                self.record_completion(prompt, reply)
                source = extract_code_block(reply, "pivot")
                outcome = self.run_pivot(source, bundle, db)
                pivot_outcomes.append(outcome)
                program = PivotProgram(source=source, strategy=strategy,
                                       index=len(pivot_outcomes) - 1)
                sql_text = sql_by_q[qid][strategy]
                sql_prompt = build_sql_prompt(task, linked, program, outcome)
                self.record_completion(sql_prompt, sql_reply(sql_text))
                sql_outcome = execute_sql(db, sql_text)
                assert sql_outcome.status == "ok", (qid, strategy, sql_outcome.diagnostic)
                candidates.append((sql_text, sql_outcome))

            self._author_vanilla(task, linked, qid)
            self._check_and_expect(qid, task, db, linked, bundle,
                                   pivot_outcomes, candidates, expectations)

        self._author_q4(contexts[4], expectations)
        self._author_no_adaptation(contexts[0])

        expectations["eval"] = {
            "pisql": {"ex": 60.0, "r_ves": 75.0,
                      "per_difficulty": {"simple": [2, 100.0, 125.0],
                                         "moderate": [1, 100.0, 125.0],
                                         "challenging": [2, 0.0, 0.0]}},
            "pisql_refine": {"ex": 80.0, "r_ves": 100.0},
            "vanilla": {"ex": 40.0, "r_ves": 50.0},
            "vanilla_sc": {"ex": 60.0, "r_ves": 75.0},
        }
        (self.out / "expected" / "selections.json").write_text(
            json.dumps(expectations, indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
        shutil.rmtree(self.tmp, ignore_errors=True)

    def _author_vanilla(self, task, linked, qid: int) -> None:
        prompt = build_vanilla_prompt(task, linked)
        reply = sql_reply(VANILLA_SQL[qid]) if qid in VANILLA_SQL else PROSE_REPLY
        self.record_completion(prompt, reply)
        self._author_vanilla_sc(prompt, qid)

    def _vanilla_sc_replies(self, qid: int) -> list[str]:
        if qid == 0:
            fast = Q0_SQL["merge_first"]
            slow = Q0_SQL["filter_first"]
            wrong = Q0_SQL["direct"]
            return ([sql_reply(fast)] * 6 + [sql_reply(slow)] * 3
                    + [sql_reply(wrong)] * 2)
        if qid == 1:
            return ([sql_reply(Q1_SQL["merge_first"])] * 7
                    + [sql_reply(Q1_SQL["direct"])] * 4)
        if qid == 2:
            return ([sql_reply(Q2_SQL["merge_first"])] * 6
                    + [sql_reply(Q2_SQL["direct"])] * 5)
        if qid == 3:
            return [sql_reply(Q3_SQL["merge_first"])] * 11
        return [PROSE_REPLY] * 11

    def _author_vanilla_sc(self, prompt, qid: int) -> None:
        for i, reply in enumerate(self._vanilla_sc_replies(qid)):
            self.record_completion(prompt, reply, sample_index=i, temperature=0.5)

    def _author_q4(self, context, expectations) -> None:
        task, db, linked, bundle = context
        for strategy in STRATEGY_ORDER:
            prompt = build_pivot_prompt(task, linked, bundle, strategy, True)
            self.record_completion(prompt, PROSE_REPLY)
        placeholder = PivotProgram(source=MISSING_PIVOT_SOURCE, strategy="merge_first")
        failure = ExecutionOutcome(status="error",
                                   diagnostic="no pivot code block in reply")
        sql_prompt = build_sql_prompt(task, linked, placeholder, failure)
        self.record_completion(sql_prompt, PROSE_REPLY)
        self._author_vanilla(task, linked, 4)

        for mode in ("pisql", "pisql_refine", "mixed_sc", "single_strategy:merge",
                     "vanilla", "vanilla_sc"):
            expectations[mode]["4"] = {"reason": "none_valid", "final_sql": None,
                                       "correct": False}

    def _author_no_adaptation(self, context) -> None:
        task, db, linked, bundle = context
        for strategy in STRATEGY_ORDER:
            reply = pivot_reply(Q0_PIVOTS[strategy], "Solving without restrictions.")
            prompt = build_pivot_prompt(task, linked, bundle, strategy, False)
            self.record_completion(prompt, reply)
        # the SQL prompts are identical to the adaptation run: same extracted
        # programs, same outcomes, so their fixtures already exist

    # -- expectations derived from the documented rules ----------------------

    def _check_and_expect(self, qid, task, db, linked, bundle,
                          pivot_outcomes, candidates, expectations) -> None:
        """Sanity-check the authored artifacts and derive expected decisions
        by direct application of the selection rules."""
        gold = execute_sql(db, task.gold_sql)
        assert gold.status == "ok", (qid, gold.diagnostic)

        ok_keys = [canonicalize(o.table) for o in pivot_outcomes if o.status == "ok"]
        cand_tables = [out.table for _, out in candidates]
        cand_keys = [canonicalize(t) for t in cand_tables]

        if qid == 0:
            assert len(set(ok_keys)) == 1 and len(ok_keys) == 3
            assert cand_keys[0] == cand_keys[1] == ok_keys[0] != cand_keys[2]
            assert equivalent(cand_tables[0], gold.table)
            final = candidates[0][0]  # both valid; first is far faster
            expectations["pisql"]["0"] = {
                "reason": "cross_verified_fastest", "final_sql": final,
                "support": 3, "correct": True}
            expectations["pisql_refine"]["0"] = expectations["pisql"]["0"]
            expectations["mixed_sc"]["0"] = {
                "reason": "sql_self_consistency", "final_sql": final, "correct": True}
            expectations["single_strategy:merge"]["0"] = {
                "reason": "cross_verified_fastest", "final_sql": final,
                "support": 1, "correct": True}
            expectations["vanilla"]["0"] = {
                "reason": "vanilla", "final_sql": VANILLA_SQL[0], "correct": True}
            expectations["vanilla_sc"]["0"] = {
                "reason": "sql_self_consistency", "final_sql": Q0_SQL["merge_first"],
                "correct": True}

        elif qid == 1:
            assert ok_keys[0] == ok_keys[1] != ok_keys[2]
            assert cand_keys[0] == ok_keys[0]
            assert cand_keys[1] != ok_keys[0] and cand_keys[2] != ok_keys[0]
            assert len(set(cand_keys)) == 3
            assert equivalent(cand_tables[0], gold.table)
            expectations["pisql"]["1"] = {
                "reason": "cross_verified_fastest",
                "final_sql": candidates[0][0], "support": 2, "correct": True}
            expectations["pisql_refine"]["1"] = expectations["pisql"]["1"]
            # three singleton groups: the smallest canonical key wins the vote
            win = min(range(3), key=lambda i: cand_keys[i])
            expectations["mixed_sc"]["1"] = {
                "reason": "sql_self_consistency",
                "final_sql": candidates[win][0],
                "correct": bool(equivalent(cand_tables[win], gold.table))}
            expectations["single_strategy:merge"]["1"] = {
                "reason": "cross_verified_fastest",
                "final_sql": candidates[0][0], "support": 1, "correct": True}
            expectations["vanilla"]["1"] = {
                "reason": "vanilla", "final_sql": VANILLA_SQL[1], "correct": True}
            expectations["vanilla_sc"]["1"] = {
                "reason": "sql_self_consistency",
                "final_sql": Q1_SQL["merge_first"], "correct": True}

        elif qid == 2:
            assert all(o.status == "error" for o in pivot_outcomes)
            assert all("KeyError" in o.diagnostic for o in pivot_outcomes)
            assert cand_keys[0] == cand_keys[1] != cand_keys[2]
            assert equivalent(cand_tables[0], gold.table)
            final = candidates[0][0]  # majority group, faster member
            expectations["pisql"]["2"] = {
                "reason": "sc_fallback", "final_sql": final, "correct": True}
            expectations["pisql_refine"]["2"] = expectations["pisql"]["2"]
            expectations["mixed_sc"]["2"] = {
                "reason": "sql_self_consistency", "final_sql": final, "correct": True}
            expectations["single_strategy:merge"]["2"] = {
                "reason": "sc_fallback", "final_sql": final, "correct": True}
            expectations["vanilla"]["2"] = {
                "reason": "vanilla", "final_sql": VANILLA_SQL[2], "correct": False}
            expectations["vanilla_sc"]["2"] = {
                "reason": "sql_self_consistency",
                "final_sql": Q2_SQL["merge_first"], "correct": True}

        elif qid == 3:
            assert len(set(ok_keys)) == 1 and len(ok_keys) == 3
            assert len(set(cand_keys)) == 3
            assert all(k != ok_keys[0] for k in cand_keys)
            refined = execute_sql(db, Q3_REFINED_SQL)
            assert refined.status == "ok"
            assert canonicalize(refined.table) == ok_keys[0]
            assert equivalent(refined.table, gold.table)
            # base run: three singleton groups, smallest canonical key wins
            win = min(range(3), key=lambda i: cand_keys[i])
            assert win == 2, "page-total candidate should hold the smallest key"
            expectations["pisql"]["3"] = {
                "reason": "sc_fallback", "final_sql": candidates[win][0],
                "support": 3, "correct": False}
            expectations["mixed_sc"]["3"] = {
                "reason": "sql_self_consistency",
                "final_sql": candidates[win][0], "correct": False}
            expectations["single_strategy:merge"]["3"] = {
                "reason": "sc_fallback", "final_sql": candidates[0][0],
                "correct": False}
            expectations["pisql_refine"]["3"] = {
                "reason": "cross_verified_fastest", "final_sql": Q3_REFINED_SQL,
                "support": 3, "correct": True}
            expectations["vanilla"]["3"] = {
                "reason": "vanilla", "final_sql": VANILLA_SQL[3], "correct": False}
            expectations["vanilla_sc"]["3"] = {
                "reason": "sql_self_consistency",
                "final_sql": Q3_SQL["merge_first"], "correct": False}

            # refine fixtures: one regeneration per base candidate; only the
            # second one comes back correct
            ref = most_frequent(pivot_outcomes)
            refine_sql = [Q3_SQL["merge_first"], Q3_REFINED_SQL, Q3_SQL["direct"]]
            for (prior_sql, prior_outcome), new_sql in zip(candidates, refine_sql):
                prompt = build_refine_prompt(task, linked, prior_sql,
                                             prior_outcome, ref.table)
                self.record_completion(prompt, sql_reply(new_sql))


def build_demo_suite(out_dir: Path | str, harness_cmd: list[str] | None = None) -> None:
    cmd = harness_cmd or [sys.executable, "-m", "pivot_harness.cli"]
    DemoBuilder(Path(out_dir), cmd).build()


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="python -m pivotsql.demo")
    parser.add_argument("out_dir")
    parser.add_argument("--harness", default=None,
                        help="harness command (default: python -m pivot_harness.cli)")
    args = parser.parse_args(argv)
    cmd = args.harness.split() if args.harness else None
    build_demo_suite(args.out_dir, cmd)
    print(f"demo suite written to {args.out_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
