import hashlib
import math

import pytest

from pivotsql import sql_runner
from pivotsql.sql_runner import execute_sql, summarize_samples, time_sql


def file_hash(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


class TestExecuteSql:
    def test_identity_query(self, toy_db):
        out = execute_sql(toy_db, "SELECT 1")
        assert out.status == "ok"
        assert out.table.rows == [(1,)]
        assert out.diagnostic == ""

    def test_syntax_error(self, toy_db):
        out = execute_sql(toy_db, "SELEC 1")
        assert out.status == "error"
        assert "syntax" in out.diagnostic.lower()
        assert out.table.rows == []

    def test_timeout_on_cross_join_bomb(self, toy_db):
        bomb = ("SELECT COUNT(*) FROM account a, account b, account c, "
                "account d, account e, account f, account g "
                "WHERE a.id + b.id + c.id + d.id + e.id + f.id + g.id > 0")
        out = execute_sql(toy_db, bomb, timeout=1.0)
        assert out.status == "timeout"
        assert out.elapsed >= 0.9

    def test_write_rejected(self, toy_db):
        out = execute_sql(toy_db, "DELETE FROM client")
        assert out.status == "error"

    def test_row_cap(self, toy_db):
        out = execute_sql(toy_db, "SELECT a.id FROM account a, account b",
                          max_fetch_rows=100)
        assert out.status == "error"
        assert "result-too-large" in out.diagnostic

    def test_deterministic_results(self, toy_db):
        sql = "SELECT gender, COUNT(*) FROM client GROUP BY gender ORDER BY gender"
        first = execute_sql(toy_db, sql)
        second = execute_sql(toy_db, sql)
        assert first.table.rows == second.table.rows

    def test_read_only_file_untouched(self, toy_db):
        before = file_hash(toy_db.path)
        execute_sql(toy_db, "SELECT * FROM district")
        execute_sql(toy_db, "SELEC nonsense")
        execute_sql(toy_db, "DELETE FROM client")
        assert file_hash(toy_db.path) == before


class TestTiming:
    def test_summary_drops_min_and_max(self):
        assert summarize_samples([5, 6, 7, 8, 100]) == 7

    def test_summary_short_lists_plain_mean(self):
        assert summarize_samples([9]) == 9
        assert summarize_samples([2, 4]) == 3
        assert summarize_samples([2, 4, 6]) == 4

    def test_summary_within_bounds(self):
        import random
        rng = random.Random(3)
        for _ in range(300):
            samples = [rng.uniform(0.1, 50) for _ in range(rng.randint(1, 12))]
            rep = summarize_samples(samples)
            assert min(samples) <= rep <= max(samples)

    def test_injected_samples(self, toy_db, monkeypatch):
        feed = iter([5.0, 6.0, 7.0, 8.0, 100.0])
        monkeypatch.setattr(sql_runner, "time_once", lambda db, sql, timeout: next(feed))
        stats = time_sql(toy_db, "SELECT 1", repeats=5)
        assert stats.representative == 7.0
        assert not stats.timed_out

    def test_single_repeat(self, toy_db, monkeypatch):
        monkeypatch.setattr(sql_runner, "time_once", lambda db, sql, timeout: 9.0)
        stats = time_sql(toy_db, "SELECT 1", repeats=1)
        assert stats.representative == 9.0

    def test_timeout_flag(self, toy_db, monkeypatch):
        feed = iter([1.0, math.inf])
        monkeypatch.setattr(sql_runner, "time_once", lambda db, sql, timeout: next(feed))
        stats = time_sql(toy_db, "SELECT 1", repeats=5)
        assert stats.timed_out
        assert math.isinf(stats.representative)

    def test_real_timing_runs(self, toy_db):
        stats = time_sql(toy_db, "SELECT COUNT(*) FROM client", repeats=4, timeout=5)
        assert len(stats.samples) == 4
        assert stats.representative > 0
