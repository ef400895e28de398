"""Smoke tests for the run registry."""

import pytest
from sqlalchemy import inspect
from sqlmodel import SQLModel

from app.database import ENGINE, create_tables, recent_runs, save_run
from app.models import RunRecord


@pytest.mark.sqlmodel
def test_registry_tables_created():
    """Only the run registry table is created."""
    create_tables()

    db_tables = set(inspect(ENGINE).get_table_names())
    assert "run_records" in db_tables
    # documents are table=False and must not leak into the schema
    assert set(SQLModel.metadata.tables) == {"run_records"}

    columns = {column["name"] for column in inspect(ENGINE).get_columns("run_records")}
    assert {"config_digest", "experiment", "seed", "n_flagged", "status"} <= columns


@pytest.mark.sqlmodel
def test_run_record_round_trip(new_db):
    """A saved run comes back with its full 64-bit seed."""
    saved = save_run(
        RunRecord(config_digest="abc123", experiment="verify", seed=2**63 - 1, toolkit_version="0.1.0", n_rows=3)
    )
    assert saved.id is not None

    runs = recent_runs()
    assert [run.config_digest for run in runs] == ["abc123"]
    assert runs[0].seed == 2**63 - 1
