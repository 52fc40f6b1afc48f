"""
SQLite mirror of a scenario's round and attack tables (results.db).
"""

import logging
import sqlite3

logger = logging.getLogger(__name__)

ROUND_COLUMNS = ("round", "total_weight", "checkpoint", "transmissions", "retries", "reroutes", "dropouts",
                 "rejected_joins", "aggregated", "aborted", "transcript_hash")
ATTACK_COLUMNS = ("scenario", "adversary_kind", "success", "deposits_moved")


def create_tables(db_path):
    """Create the results tables if they do not exist yet."""
    conn = sqlite3.connect(db_path)
    c = conn.cursor()
    try:
        c.execute('''
            CREATE TABLE IF NOT EXISTS rounds (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                scenario TEXT NOT NULL,
                round INTEGER NOT NULL,
                total_weight REAL,
                checkpoint TEXT,
                transmissions INTEGER NOT NULL,
                retries INTEGER NOT NULL,
                reroutes INTEGER NOT NULL,
                dropouts INTEGER NOT NULL,
                rejected_joins INTEGER NOT NULL,
                aggregated INTEGER NOT NULL,
                aborted INTEGER NOT NULL CHECK (aborted IN (0, 1)),
                transcript_hash TEXT NOT NULL,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
            )
        ''')
        c.execute('''
            CREATE TABLE IF NOT EXISTS attacks (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                scenario TEXT NOT NULL,
                adversary_kind TEXT NOT NULL,
                success INTEGER NOT NULL CHECK (success IN (0, 1)),
                deposits_moved INTEGER NOT NULL,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
            )
        ''')
        c.execute("CREATE INDEX IF NOT EXISTS idx_rounds_scenario ON rounds(scenario, round)")
        conn.commit()
    finally:
        conn.close()


def save_results(db_path, scenario, rounds, attacks):
    """Replace the stored rows of `scenario` with the given round and attack rows (dicts)."""
    create_tables(db_path)
    conn = sqlite3.connect(db_path)
    c = conn.cursor()
    try:
        c.execute("DELETE FROM rounds WHERE scenario = ?", (scenario,))
        c.execute("DELETE FROM attacks WHERE scenario = ?", (scenario,))
        c.executemany(
            f"INSERT INTO rounds (scenario, {', '.join(ROUND_COLUMNS)}) "
            f"VALUES (?, {', '.join('?' for _ in ROUND_COLUMNS)})",
            [(scenario, *(row[col] for col in ROUND_COLUMNS)) for row in rounds])
        c.executemany(
            f"INSERT INTO attacks ({', '.join(ATTACK_COLUMNS)}) VALUES ({', '.join('?' for _ in ATTACK_COLUMNS)})",
            [tuple(row[col] for col in ATTACK_COLUMNS) for row in attacks])
        conn.commit()
        logger.debug("stored %d rounds and %d attacks for %s", len(rounds), len(attacks), scenario)
    except sqlite3.Error as e:
        conn.rollback()
        logger.error("could not store results for %s: %s", scenario, e)
        raise
    finally:
        conn.close()


def load_rounds(db_path, scenario):
    conn = sqlite3.connect(db_path)
    conn.row_factory = sqlite3.Row
    try:
        rows = conn.execute(f"SELECT {', '.join(ROUND_COLUMNS)} FROM rounds WHERE scenario = ? ORDER BY id",
                            (scenario,)).fetchall()
    finally:
        conn.close()
    return [dict(row) for row in rows]


def load_attacks(db_path, scenario):
    conn = sqlite3.connect(db_path)
    conn.row_factory = sqlite3.Row
    try:
        rows = conn.execute(f"SELECT {', '.join(ATTACK_COLUMNS)} FROM attacks WHERE scenario = ? ORDER BY id",
                            (scenario,)).fetchall()
    finally:
        conn.close()
    return [dict(row) for row in rows]
