from sqlmodel import SQLModel, Field
from sqlalchemy import BigInteger
from datetime import datetime
from typing import Optional


class RunRecord(SQLModel, table=True):
    """One harness run: what was computed, from which config, and how it went."""

    __tablename__ = "run_records"  # type: ignore[assignment]

    id: Optional[int] = Field(default=None, primary_key=True)
    config_digest: str = Field(max_length=64, index=True)
    experiment: str = Field(max_length=50)
    seed: int = Field(sa_type=BigInteger, description="Master seed (u64 values above 2**63 are stored modulo 2**64)")
    toolkit_version: str = Field(max_length=20)
    started_at: datetime = Field(default_factory=datetime.utcnow)
    wall_clock_seconds: float = Field(default=0.0)
    n_rows: int = Field(default=0)
    n_flagged: int = Field(default=0)
    output_path: str = Field(default="", max_length=500)
    status: str = Field(default="ok", max_length=20)


class CutoffDocument(SQLModel, table=False):
    """Schema for a saved cutoff certificate."""

    d_bar: int
    certified: bool
    witness_x: list[float]
    witness_theta: list[float]
    matched_orders: list[tuple[int, float]]
    first_distinguishing_order_value: float
    objective: float
    notes: list[str] = Field(default_factory=list)


class FitDocument(SQLModel, table=False):
    """Schema for a saved EM fit."""

    x_hat: list[float]
    theta_hat: list[float]
    final_loglik: float
    iterations: int
    converged: bool
    singular: bool = False
    restart: int = 0
    loglik_trace: list[float] = Field(default_factory=list)


class BatchHeader(SQLModel, table=False):
    """Fixed header of a binary observation batch file."""

    magic: bytes = b"GACB"
    version: int = 1
    n_samples: int = Field(ge=1)
    dim: int = Field(ge=1)
    seed: int = Field(ge=0)
