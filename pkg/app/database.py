import os
from sqlmodel import SQLModel, create_engine, Session, select, desc

from app.models import RunRecord

DATABASE_URL = os.environ.get("APP_DATABASE_URL", "sqlite:///gac_runs.db")


def _connect_args(url: str) -> dict:
    if url.startswith("sqlite"):
        return {"check_same_thread": False}
    return {"connect_timeout": 15, "options": "-c statement_timeout=1000"}


ENGINE = create_engine(DATABASE_URL, connect_args=_connect_args(DATABASE_URL))


def create_tables():
    SQLModel.metadata.create_all(ENGINE)


def get_session():
    return Session(ENGINE)


def reset_db():
    """Wipe all tables in the database. Use with caution - for testing only!"""
    SQLModel.metadata.drop_all(ENGINE)
    SQLModel.metadata.create_all(ENGINE)


def save_run(record: RunRecord) -> RunRecord:
    with get_session() as session:
        session.add(record)
        session.commit()
        session.refresh(record)
        return record


def recent_runs(limit: int = 20) -> list[RunRecord]:
    with get_session() as session:
        return list(session.exec(select(RunRecord).order_by(desc(RunRecord.started_at)).limit(limit)).all())
