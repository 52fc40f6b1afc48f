import sqlite3

import pytest

from pptfl.results_db import ROUND_COLUMNS, create_tables, load_attacks, load_rounds, save_results


def round_row(r, **overrides):
    row = {"round": r, "total_weight": 12.5, "checkpoint": f"checkpoints/round_{r}.bin", "transmissions": 8,
           "retries": 0, "reroutes": 0, "dropouts": 1, "rejected_joins": 0, "aggregated": 5, "aborted": 0,
           "transcript_hash": "ab" * 32}
    row.update(overrides)
    return row


@pytest.fixture
def db(tmp_path):
    return tmp_path / "results.db"


def test_create_tables_is_idempotent(db):
    create_tables(db)
    create_tables(db)
    conn = sqlite3.connect(db)
    names = {r[0] for r in conn.execute("SELECT name FROM sqlite_master WHERE type = 'table'")}
    conn.close()
    assert {"rounds", "attacks"} <= names


def test_save_and_load(db):
    rounds = [round_row(0), round_row(1, aborted=1, checkpoint=None, total_weight=None)]
    attacks = [{"scenario": "s", "adversary_kind": "curious", "success": 0, "deposits_moved": 0}]
    save_results(db, "s", rounds, attacks)
    assert load_rounds(db, "s") == rounds
    assert load_attacks(db, "s") == attacks


def test_saving_again_replaces_rows(db):
    save_results(db, "s", [round_row(0), round_row(1)], [])
    save_results(db, "s", [round_row(0, transmissions=4)], [])
    save_results(db, "other", [round_row(0)], [])
    assert [r["transmissions"] for r in load_rounds(db, "s")] == [4]
    assert len(load_rounds(db, "other")) == 1


def test_constraint_violation_rolls_back(db):
    save_results(db, "s", [round_row(0)], [])
    with pytest.raises(sqlite3.IntegrityError):
        save_results(db, "s", [round_row(0, aborted=7)], [])
    assert load_rounds(db, "s") == [round_row(0)]


def test_columns_cover_round_rows():
    assert set(ROUND_COLUMNS) == set(round_row(0))
