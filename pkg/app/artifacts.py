"""Files a run leaves behind: CSV tables, binary observation batches and JSON documents."""

import os
import struct
from logging import getLogger
from pathlib import Path
from typing import Optional, TypeVar

import numpy as np
import polars as pl
from sqlmodel import SQLModel

from app.channel import ObservationBatch
from app.errors import ToolkitError
from app.estimators import FitResult
from app.models import BatchHeader, CutoffDocument, FitDocument
from app.moments import CutoffReport, MomentTensor

logger = getLogger(__name__)

BATCH_MAGIC = b"GACB"
BATCH_VERSION = 1
BATCH_HEADER = struct.Struct("<4sHQQQ")

D = TypeVar("D", bound=SQLModel)


def output_dir() -> Path:
    return Path(os.environ.get("GAC_OUTPUT_DIR", "outputs"))


def ensure_output_directory(path: Optional[Path] = None) -> Path:
    """Create the output directory if it doesn't exist."""
    directory = path or output_dir()
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def write_csv(path: Path, rows: list[dict], header: dict[str, str]) -> Path:
    """Write rows after a ``# key: value`` comment block; the body is produced by polars."""
    path.parent.mkdir(parents=True, exist_ok=True)
    comment = "".join(f"# {key}: {value}\n" for key, value in header.items())
    body = pl.DataFrame(rows, infer_schema_length=None).write_csv() if rows else ""
    path.write_text(comment + body)
    logger.info("wrote %d rows to %s", len(rows), path)
    return path


def read_csv(path: Path) -> tuple[dict[str, str], pl.DataFrame]:
    """Header comment block and body of a CSV written by write_csv."""
    header: dict[str, str] = {}
    with path.open() as handle:
        for line in handle:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition(": ")
            header[key] = value
    return header, pl.read_csv(path, comment_prefix="#")


def csv_body(path: Path) -> str:
    """The CSV text without its header comment block."""
    return "".join(line for line in path.read_text().splitlines(keepends=True) if not line.startswith("#"))


def write_batch(path: Path, batch: ObservationBatch) -> Path:
    """Binary batch file: little-endian header (magic, version, N, K, seed) then row-major float64."""
    header = BatchHeader(n_samples=batch.n_samples, dim=batch.dim, seed=batch.seed)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as handle:
        handle.write(BATCH_HEADER.pack(BATCH_MAGIC, BATCH_VERSION, header.n_samples, header.dim, header.seed))
        handle.write(np.ascontiguousarray(batch.observations, dtype="<f8").tobytes())
    return path


def read_batch_header(path: Path) -> BatchHeader:
    with path.open("rb") as handle:
        raw = handle.read(BATCH_HEADER.size)
    if len(raw) != BATCH_HEADER.size:
        raise ToolkitError(f"{path} is too short for a batch header")
    magic, version, n_samples, dim, seed = BATCH_HEADER.unpack(raw)
    if magic != BATCH_MAGIC:
        raise ToolkitError(f"{path} is not a batch file (magic {magic!r})")
    if version != BATCH_VERSION:
        raise ToolkitError(f"{path} has unsupported batch version {version}")
    return BatchHeader(magic=magic, version=version, n_samples=n_samples, dim=dim, seed=seed)


def read_batch(path: Path, model_digest: str = "") -> ObservationBatch:
    header = read_batch_header(path)
    data = np.fromfile(path, dtype="<f8", offset=BATCH_HEADER.size)
    if data.size != header.n_samples * header.dim:
        raise ToolkitError(f"{path} holds {data.size} values, header promises {header.n_samples}x{header.dim}")
    return ObservationBatch(
        observations=data.reshape(header.n_samples, header.dim), seed=header.seed, model_digest=model_digest
    )


def export_batch_csv(batch: ObservationBatch, path: Path) -> Path:
    """Observations as columns y0..y{K-1}, plus the hidden group index when it is known."""
    columns = {f"y{k}": batch.observations[:, k] for k in range(batch.dim)}
    if batch.group_assignments is not None:
        columns["group_index"] = batch.group_assignments
    path.parent.mkdir(parents=True, exist_ok=True)
    pl.DataFrame(columns).write_csv(path)
    return path


def tensor_rows(tensor: MomentTensor) -> list[dict]:
    return [
        {"order": tensor.order, "multi_index": ",".join(str(i) for i in index), "value": value}
        for index, value in tensor.rows()
    ]


def write_tensor_csv(path: Path, tensor: MomentTensor, header: dict[str, str]) -> Path:
    return write_csv(path, tensor_rows(tensor), header)


def cutoff_document(report: CutoffReport) -> CutoffDocument:
    return CutoffDocument(
        d_bar=report.d_bar,
        certified=report.certified,
        witness_x=report.witness_x.tolist(),
        witness_theta=report.witness_theta.weights.tolist(),
        matched_orders=list(report.matched_orders),
        first_distinguishing_order_value=report.first_distinguishing_order_value,
        objective=report.objective,
        notes=list(report.notes),
    )


def fit_document(fit: FitResult) -> FitDocument:
    return FitDocument(
        x_hat=fit.x_hat.tolist(),
        theta_hat=fit.theta_hat.weights.tolist(),
        final_loglik=fit.final_loglik,
        iterations=fit.iterations,
        converged=fit.converged,
        singular=fit.singular,
        restart=fit.restart,
        loglik_trace=list(fit.loglik_trace),
    )


def write_document(path: Path, document: SQLModel) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(document.model_dump_json(indent=2))
    return path


def read_document(path: Path, schema: type[D]) -> D:
    return schema.model_validate_json(path.read_text())
