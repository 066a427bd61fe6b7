import sqlite3
from pathlib import Path

import pytest

from pivotsql.db_catalog import DatabaseHandle


def make_toy_db(path: Path) -> None:
    """Three-table retail-style database with FKs and assorted value types."""
    conn = sqlite3.connect(path)
    conn.executescript("""
        CREATE TABLE district (
            id INTEGER PRIMARY KEY,
            A3 TEXT,
            A4 TEXT
        );
        CREATE TABLE client (
            id INTEGER PRIMARY KEY,
            gender TEXT,
            district_id INTEGER,
            FOREIGN KEY (district_id) REFERENCES district(id)
        );
        CREATE TABLE account (
            id INTEGER PRIMARY KEY,
            client_id INTEGER,
            balance REAL,
            opened TEXT,
            FOREIGN KEY (client_id) REFERENCES client(id)
        );
    """)
    districts = [(i, f"region {i}", str(100 + i)) for i in range(1, 77)]
    districts.append((77, "South Bohemia", "177"))
    conn.executemany("INSERT INTO district VALUES (?, ?, ?)", districts)
    clients = [(i, "M" if i % 3 else "F", (i % 77) + 1) for i in range(1, 31)]
    conn.executemany("INSERT INTO client VALUES (?, ?, ?)", clients)
    accounts = []
    for i in range(1, 41):
        accounts.append((i, (i % 30) + 1, round(i * 10.5, 2), f"2020-01-{(i % 28) + 1:02d}"))
    accounts.append((41, 1, None, None))
    conn.executemany("INSERT INTO account VALUES (?, ?, ?, ?)", accounts)
    # A couple of awkward values: empty string vs NULL, embedded comma/quote.
    conn.execute("INSERT INTO district VALUES (78, '', 'has,comma')")
    conn.execute("""INSERT INTO district VALUES (79, 'quote"inside', NULL)""")
    conn.commit()
    conn.close()


@pytest.fixture(scope="session")
def toy_db(tmp_path_factory) -> DatabaseHandle:
    root = tmp_path_factory.mktemp("toydb")
    db_dir = root / "finance_mini"
    db_dir.mkdir()
    path = db_dir / "finance_mini.sqlite"
    make_toy_db(path)
    return DatabaseHandle(path=path, db_id="finance_mini")


@pytest.fixture()
def no_network(monkeypatch):
    """Fail the test if anything opens a network socket."""
    import socket

    def guard(*args, **kwargs):
        raise AssertionError("network access attempted during a replay-only test")

    monkeypatch.setattr(socket, "socket", guard)
    monkeypatch.setattr(socket, "create_connection", guard)
