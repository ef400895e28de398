import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

# the engine reads APP_DATABASE_URL at import time, so point it at a scratch sqlite file first
_SCRATCH = Path(tempfile.mkdtemp(prefix="gac-tests-"))
os.environ.setdefault("APP_DATABASE_URL", f"sqlite:///{_SCRATCH / 'runs.db'}")
os.environ.setdefault("GAC_OUTPUT_DIR", str(_SCRATCH / "outputs"))

from app.channel import ChannelModel, Projection, coordinate_projection  # noqa: E402
from app.database import reset_db  # noqa: E402
from app.group import FiniteGroup, GroupDistribution, cyclic_shift_group, uniform_distribution  # noqa: E402


@dataclass(frozen=True, eq=False)
class Example:
    x: np.ndarray
    alternative: np.ndarray
    group: FiniteGroup
    theta: GroupDistribution
    projection: Projection

    def model(self, sigma: float) -> ChannelModel:
        return ChannelModel(self.x, self.theta, self.projection, sigma)

    def alternative_model(self, sigma: float) -> ChannelModel:
        return ChannelModel(self.alternative, self.theta, self.projection, sigma)


@pytest.fixture()
def example1() -> Example:
    """x = (0, 1, 2) under cyclic shifts, first two coordinates observed; alternative x* = (0, 2, 1)."""
    group = cyclic_shift_group(3)
    return Example(
        x=np.array([0.0, 1.0, 2.0]),
        alternative=np.array([0.0, 2.0, 1.0]),
        group=group,
        theta=uniform_distribution(group),
        projection=coordinate_projection(3, [0, 1]),
    )


@pytest.fixture()
def example2() -> Example:
    """x = (1, 2) under the swap, first coordinate observed; alternative (0, 3) shares M¹."""
    group = cyclic_shift_group(2)
    return Example(
        x=np.array([1.0, 2.0]),
        alternative=np.array([0.0, 3.0]),
        group=group,
        theta=uniform_distribution(group),
        projection=coordinate_projection(2, [0]),
    )


@pytest.fixture()
def new_db():
    """Reset database for each test."""
    reset_db()
    yield
    reset_db()
