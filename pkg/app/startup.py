import logging

from app.artifacts import ensure_output_directory
from app.database import create_tables

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format=LOG_FORMAT)
    # suppress sqlalchemy engine logs below warning level
    logging.getLogger("sqlalchemy.engine.Engine").setLevel(logging.WARNING)


def startup(verbose: bool = False) -> None:
    # called once per process before the first experiment
    configure_logging(verbose)
    create_tables()
    ensure_output_directory()
