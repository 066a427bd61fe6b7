import math

import pytest

from pivotsql import pipeline as pl
from pivotsql.consensus import ResultTable, SqlCandidate, equivalent, most_frequent
from pivotsql.db_catalog import QueryTask
from pivotsql.llm_gateway import CompletionRecord, completion_key
from pivotsql.pipeline import (
    FixturePivotExecutor,
    PipelineConfig,
    PivotFixtureMissError,
    PivotOutcomeStore,
    RecordingPivotExecutor,
    outcome_key,
    outcome_to_reply,
    reply_to_outcome,
    select_final,
    translate,
    refine,
    vanilla_translate,
    vanilla_sc_translate,
)
from pivotsql.sql_runner import ExecutionOutcome, TimingStats


def task(question="How many male clients are there?", qid=1):
    return QueryTask(question_id=qid, db_id="finance_mini", question=question,
                     evidence="male means gender = 'M'")


class ScriptedGateway:
    """Maps (kind, strategy or pivot marker) to canned replies."""

    def __init__(self, pivot_replies=None, sql_replies=None,
                 vanilla_reply=None, refine_replies=None, sc_replies=None):
        self.pivot_replies = pivot_replies or {}
        self.sql_replies = sql_replies or {}
        self.vanilla_reply = vanilla_reply
        self.refine_replies = refine_replies or []
        self.sc_replies = sc_replies or []
        self.refine_calls = 0
        self.calls = []

    def complete(self, prompt, sample_index=0, temperature=None, max_tokens=None):
        self.calls.append(prompt.kind)
        if prompt.kind == "pivot":
            reply = self.pivot_replies[prompt.strategy]
        elif prompt.kind == "sql":
            reply = next(r for marker, r in self.sql_replies.items()
                         if marker in prompt.user)
        elif prompt.kind == "refine":
            reply = self.refine_replies[min(self.refine_calls, len(self.refine_replies) - 1)]
            self.refine_calls += 1
        elif prompt.kind in ("vanilla",):
            if self.sc_replies:
                reply = self.sc_replies[sample_index % len(self.sc_replies)]
            else:
                reply = self.vanilla_reply
        else:
            reply = ""
        key = completion_key("stub", temperature or 0.0, 4096, sample_index,
                             prompt.system, prompt.user)
        return CompletionRecord(prompt_hash=key, reply=reply,
                                prompt_tokens=len(prompt.user) // 4,
                                completion_tokens=len(reply) // 4)


class MarkerExecutor:
    """Dispatches on a marker comment inside the pivot source."""

    def __init__(self, outcomes):
        self.outcomes = outcomes

    def execute(self, program, bundle, timeout):
        for marker, outcome in self.outcomes.items():
            if marker in program.source:
                return outcome
        raise AssertionError(f"no scripted outcome for program: {program.source!r}")


def ok_table(*values):
    return ExecutionOutcome(status="ok",
                            table=ResultTable(columns=["v"], rows=[(v,) for v in values]))


def pivot_reply(marker):
    return f"Plan first.\n```python\n# marker: {marker}\nprint('...')\n```"


def cfg(**kwargs):
    defaults = dict(timing_repeats=2, pivot_timeout=5, sql_timeout=5)
    defaults.update(kwargs)
    return PipelineConfig(**defaults)


@pytest.fixture()
def timed(monkeypatch):
    """Replace wall-clock timing with a per-SQL scripted table."""
    table = {}

    def fake_time_sql(db, sql, repeats=10, timeout=30):
        ms = table.get(sql)
        if ms is None:
            return TimingStats(samples=[0.001], representative=0.001)
        if math.isinf(ms):
            return TimingStats(samples=[], representative=math.inf, timed_out=True)
        return TimingStats(samples=[ms / 1000], representative=ms / 1000)

    monkeypatch.setattr(pl, "time_sql", fake_time_sql)
    return table


class TestTranslate:
    def test_cross_verified_fastest_hand_simulated(self, toy_db, timed):
        # pivots vote [A, A, B]; SQL results [A, A, C]; times [20, 8, -]
        gateway = ScriptedGateway(
            pivot_replies={
                "merge_first": pivot_reply("A1"),
                "filter_first": pivot_reply("A2"),
                "direct": pivot_reply("B"),
            },
            sql_replies={
                "# marker: A1": "```sql\nSELECT 10 AS n;\n```",
                "# marker: A2": "```sql\nSELECT 10 AS answer\n```",
                "# marker: B": "```sql\nSELECT 30;\n```",
            },
        )
        executor = MarkerExecutor({
            "# marker: A1": ok_table(10),
            "# marker: A2": ok_table(10),
            "# marker: B": ok_table(20),
        })
        timed["SELECT 10 AS n;"] = 20
        timed["SELECT 10 AS answer"] = 8
        result = translate(task(), toy_db, gateway, executor, cfg())
        assert result.selection_reason == "cross_verified_fastest"
        assert result.final_sql == "SELECT 10 AS answer"
        assert result.final_index == 1
        assert result.reference.support == 2
        assert result.reference.contributors == [0, 1]
        assert len(result.candidates) == 3

    def test_all_pivots_error_falls_back_to_sc(self, toy_db, timed):
        boom = ExecutionOutcome(status="error", diagnostic="ZeroDivisionError: boom")
        gateway = ScriptedGateway(
            pivot_replies={s: pivot_reply(m) for s, m in
                           [("merge_first", "X"), ("filter_first", "Y"), ("direct", "Z")]},
            sql_replies={
                "# marker: X": "```sql\nSELECT 5;\n```",
                "# marker: Y": "```sql\nSELECT 5 AS other;\n```",
                "# marker: Z": "```sql\nSELECT 6;\n```",
            },
        )
        executor = MarkerExecutor({"# marker: X": boom, "# marker: Y": boom,
                                   "# marker: Z": boom})
        timed["SELECT 5;"] = 3
        timed["SELECT 5 AS other;"] = 1
        result = translate(task(), toy_db, gateway, executor, cfg())
        assert result.selection_reason == "sc_fallback"
        assert result.reference is None
        # group [5, 5] wins; its faster member is chosen
        assert result.final_sql == "SELECT 5 AS other;"

    def test_every_completion_unparseable_is_none_valid(self, toy_db, timed):
        gateway = ScriptedGateway(
            pivot_replies={s: "Sorry, I have no idea." for s in
                           ("merge_first", "filter_first", "direct")},
            sql_replies={"no program was produced": "I still have no idea."},
        )
        executor = MarkerExecutor({})
        result = translate(task(), toy_db, gateway, executor, cfg())
        assert result.selection_reason == "none_valid"
        assert result.final_sql is None
        assert result.final_index is None
        # every pivot attempt still produced exactly one SQL candidate attempt
        assert len(result.candidates) == 3
        assert all(c.outcome.status == "error" for c in result.candidates)

    def test_failed_pivot_error_text_reaches_sql_prompt(self, toy_db, timed):
        seen = {}

        class SpyGateway(ScriptedGateway):
            def complete(self, prompt, sample_index=0, temperature=None, max_tokens=None):
                if prompt.kind == "sql":
                    seen.setdefault("sql_user", prompt.user)
                return super().complete(prompt, sample_index, temperature, max_tokens)

        trace = "Traceback (most recent call last):\nKeyError: 'gender'"
        gateway = SpyGateway(
            pivot_replies={s: pivot_reply("ERR") for s in
                           ("merge_first", "filter_first", "direct")},
            sql_replies={"# marker: ERR": "```sql\nSELECT 1;\n```"},
        )
        executor = MarkerExecutor({
            "# marker: ERR": ExecutionOutcome(status="error", diagnostic=trace)})
        translate(task(), toy_db, gateway, executor, cfg())
        assert trace in seen["sql_user"]

    def test_candidate_count_matches_strategy_samples(self, toy_db, timed):
        gateway = ScriptedGateway(
            pivot_replies={"merge_first": pivot_reply("A"), "filter_first": pivot_reply("A")},
            sql_replies={"# marker: A": "```sql\nSELECT 10;\n```"},
        )
        executor = MarkerExecutor({"# marker: A": ok_table(10)})
        config = cfg(strategies=("merge_first", "filter_first"), samples_per_strategy=2)
        result = translate(task(), toy_db, gateway, executor, config)
        assert len(result.candidates) == 4
        assert len(result.pivots) == 4


class TestRefine:
    def make_gateway(self, refine_replies):
        return ScriptedGateway(
            pivot_replies={s: pivot_reply("A") for s in
                           ("merge_first", "filter_first", "direct")},
            sql_replies={"# marker: A": "```sql\nSELECT 99;\n```"},
            refine_replies=refine_replies,
        )

    def executor(self):
        return MarkerExecutor({"# marker: A": ok_table(10)})

    def test_refinement_recovers_match(self, toy_db, timed):
        gateway = self.make_gateway(["```sql\nSELECT 10;\n```"])
        result = refine(task(), toy_db, gateway, self.executor(), cfg(refine_rounds=1))
        assert result.selection_reason == "cross_verified_fastest"
        assert result.final_sql == "SELECT 10;"
        # base candidates plus one refine round
        assert len(result.candidates) == 6
        assert result.candidate_rounds == [0, 0, 0, 1, 1, 1]

    def test_ref_absent_skips_refinement(self, toy_db, timed):
        boom = ExecutionOutcome(status="error", diagnostic="crash")
        gateway = ScriptedGateway(
            pivot_replies={s: pivot_reply("E") for s in
                           ("merge_first", "filter_first", "direct")},
            sql_replies={"# marker: E": "```sql\nSELECT 7;\n```"},
            refine_replies=["```sql\nSELECT 10;\n```"],
        )
        executor = MarkerExecutor({"# marker: E": boom})
        result = refine(task(), toy_db, gateway, executor, cfg(refine_rounds=3))
        assert gateway.refine_calls == 0
        assert result.selection_reason == "sc_fallback"

    def test_rounds_exhausted_falls_back(self, toy_db, timed):
        gateway = self.make_gateway(["```sql\nSELECT 98;\n```"])
        result = refine(task(), toy_db, gateway, self.executor(), cfg(refine_rounds=2))
        assert result.selection_reason == "sc_fallback"
        assert gateway.refine_calls == 6  # 3 per round, 2 rounds
        assert result.final_sql in ("SELECT 99;", "SELECT 98;")


class TestVanilla:
    def test_well_formed_reply(self, toy_db, timed):
        gateway = ScriptedGateway(vanilla_reply="```sql\nSELECT COUNT(*) FROM client;\n```")
        result = vanilla_translate(task(), toy_db, gateway, cfg())
        assert result.selection_reason == "vanilla"
        assert result.final_sql == "SELECT COUNT(*) FROM client;"
        assert result.candidates[0].outcome.status == "ok"

    def test_unparseable_reply(self, toy_db, timed):
        gateway = ScriptedGateway(vanilla_reply="I refuse.")
        result = vanilla_translate(task(), toy_db, gateway, cfg())
        assert result.selection_reason == "none_valid"
        assert result.final_sql is None

    def test_deterministic(self, toy_db, timed):
        gateway = ScriptedGateway(vanilla_reply="```sql\nSELECT 2;\n```")
        a = vanilla_translate(task(), toy_db, gateway, cfg())
        b = vanilla_translate(task(), toy_db, gateway, cfg())
        assert a.to_json() == b.to_json()


class TestVanillaSc:
    def test_majority_vote_over_samples(self, toy_db, timed):
        # 11 samples alternate between two results: 6 of "SELECT 1", 5 of "SELECT 2"
        replies = ["```sql\nSELECT 1;\n```", "```sql\nSELECT 2;\n```"]
        gateway = ScriptedGateway(sc_replies=replies)
        result = vanilla_sc_translate(task(), toy_db, gateway, cfg(), n=11,
                                      temperature=0.5)
        assert result.selection_reason == "sql_self_consistency"
        assert result.final_sql == "SELECT 1;"
        assert len(result.candidates) == 11

    def test_n1_equals_vanilla_choice(self, toy_db, timed):
        gateway = ScriptedGateway(vanilla_reply="```sql\nSELECT 4;\n```",
                                  sc_replies=["```sql\nSELECT 4;\n```"])
        sc = vanilla_sc_translate(task(), toy_db, gateway, cfg(), n=1, temperature=0.5)
        vanilla = vanilla_translate(task(), toy_db, gateway, cfg())
        assert sc.final_sql == vanilla.final_sql

    def test_all_error_none_valid(self, toy_db, timed):
        gateway = ScriptedGateway(sc_replies=["no sql here, sorry"])
        result = vanilla_sc_translate(task(), toy_db, gateway, cfg(), n=3,
                                      temperature=0.5)
        assert result.selection_reason == "none_valid"


class TestSelectFinal:
    def stub_timer(self, times):
        def timer(cand):
            ms = times.get(cand.sql, 1.0)
            return TimingStats(samples=[ms / 1000], representative=ms / 1000)
        return timer

    def test_sc_mode_ignores_pivot_reference(self):
        a = ResultTable(columns=["v"], rows=[(1,)])
        b = ResultTable(columns=["v"], rows=[(2,)])
        cands = [
            SqlCandidate("q1", outcome=ExecutionOutcome(status="ok", table=a)),
            SqlCandidate("q2", outcome=ExecutionOutcome(status="ok", table=a)),
            SqlCandidate("q3", outcome=ExecutionOutcome(status="ok", table=b)),
        ]
        timer = self.stub_timer({"q1": 5, "q2": 9, "q3": 1})
        picks = []
        for ref_table in (a, b, None):
            for c in cands:
                c.timing = None
            ref = (most_frequent([ExecutionOutcome(status="ok", table=ref_table)])
                   if ref_table is not None else None)
            final, reason = select_final(cands, ref, "sql_self_consistency", timer)
            picks.append((final.sql, reason))
        assert picks == [("q1", "sql_self_consistency")] * 3

    def test_cross_verify_requires_match(self):
        a = ResultTable(columns=["v"], rows=[(1,)])
        b = ResultTable(columns=["v"], rows=[(2,)])
        cands = [SqlCandidate("q1", outcome=ExecutionOutcome(status="ok", table=b))]
        ref = most_frequent([ExecutionOutcome(status="ok", table=a)])
        final, reason = select_final(cands, ref, "cross_verify", self.stub_timer({}))
        assert reason == "sc_fallback"
        assert final.sql == "q1"

    def test_identical_sql_texts_share_timing_and_pick_earliest(self):
        # noisy timer: later measurements get ever-smaller durations; without
        # per-text memoization the argmin would land on the last duplicate
        a = ResultTable(columns=["v"], rows=[(1,)])
        ref = most_frequent([ExecutionOutcome(status="ok", table=a)])
        ticks = iter([9.0, 5.0, 1.0])

        def noisy_timer(cand):
            ms = next(ticks)
            return TimingStats(samples=[ms / 1000], representative=ms / 1000)

        cands = [SqlCandidate("SELECT 1;",
                              outcome=ExecutionOutcome(status="ok", table=a))
                 for _ in range(3)]
        final, reason = select_final(cands, ref, "cross_verify", noisy_timer)
        assert reason == "cross_verified_fastest"
        assert final is cands[0]
        assert all(c.timing.representative == 0.009 for c in cands)


class TestPivotStores:
    def make_bundle(self, tmp_path):
        from pivotsql.db_catalog import CsvBundle
        return CsvBundle(directory=tmp_path, files={},
                         manifest={"tables": {"t": {"columns": ["a"], "rows": 1,
                                                    "types": ["INTEGER"]}}},
                         build_elapsed=0.0)

    def test_round_trip_outcome(self):
        out = ExecutionOutcome(status="ok",
                               table=ResultTable(columns=["a"], rows=[(1, )]),
                               elapsed=0.5, diagnostic="")
        again = reply_to_outcome(outcome_to_reply(out))
        assert again.status == "ok"
        assert equivalent(again.table, out.table)
        assert again.elapsed == 0.5

    def test_record_then_replay(self, tmp_path):
        from pivotsql.prompt_forge import PivotProgram
        bundle = self.make_bundle(tmp_path)
        program = PivotProgram(source="print(1)", strategy="direct")
        store = PivotOutcomeStore(tmp_path / "pivots.jsonl")
        recorder = RecordingPivotExecutor(
            MarkerExecutor({"print(1)": ok_table(42)}), store)
        live = recorder.execute(program, bundle, 5)
        replay = FixturePivotExecutor(PivotOutcomeStore(tmp_path / "pivots.jsonl"))
        replayed = replay.execute(program, bundle, 5)
        assert equivalent(replayed.table, live.table)

    def test_fixture_miss(self, tmp_path):
        from pivotsql.prompt_forge import PivotProgram
        bundle = self.make_bundle(tmp_path)
        replay = FixturePivotExecutor(PivotOutcomeStore(tmp_path / "pivots.jsonl"))
        with pytest.raises(PivotFixtureMissError):
            replay.execute(PivotProgram(source="print(9)", strategy="direct"), bundle, 5)

    def test_key_depends_on_data_shape(self, tmp_path):
        a = self.make_bundle(tmp_path)
        from pivotsql.db_catalog import CsvBundle
        b = CsvBundle(directory=tmp_path, files={},
                      manifest={"tables": {"t": {"columns": ["a"], "rows": 2,
                                                 "types": ["INTEGER"]}}},
                      build_elapsed=0.0)
        assert outcome_key("print(1)", a) != outcome_key("print(1)", b)
        assert outcome_key("print(1)", a) == outcome_key("print(1)", a)
