from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from app.schemas.config import SimConfig
from app.services.grid_field import ComplexField, Grid, make_grid
from app.services.ground_state import ground_state_for
from app.services.modulation import ModulationContext, ModulationParams, push_forward

Q1_MASS = np.sqrt(3.0) * np.pi / 2.0
FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def grid1d() -> Grid:
    return make_grid(1, 20.0, 512)


@pytest.fixture
def q1d(grid1d: Grid) -> ComplexField:
    return ground_state_for(grid1d).field()


@pytest.fixture(scope="session")
def ctx1d() -> ModulationContext:
    return ModulationContext(1)


@pytest.fixture(scope="session")
def ansatz():
    """Builds lam^{-d/2} Qb((x - x0)/lam) e^{i gamma} on a given grid."""

    def build(ctx: ModulationContext, grid: Grid, lam: float, b: float, x0=None, gamma: float = 0.0) -> ComplexField:
        x0 = tuple(x0) if x0 is not None else (0.0,) * grid.d
        params = ModulationParams(lam=lam, b=b, x_c=x0, gamma=gamma)
        return push_forward(ctx.profile(b), grid, params)

    return build


@pytest.fixture
def quiet_config():
    """Small deterministic config builder; keyword sections are merged over the base."""

    def build(**sections) -> SimConfig:
        raw = {
            "grid": {"d": 1, "L": 20.0, "N": 512},
            "time": {"dt0": 1e-3, "horizon": 0.02, "sample_every": 10},
            "noise": {"amplitude": 0.0},
            "initial": {"preset": "soliton", "lambda0": 1.0},
            "thresholds": {"margin": 1.0},
        }
        for name, values in sections.items():
            raw.setdefault(name, {}).update(values)
        return SimConfig.model_validate(raw)

    return build


@pytest.fixture(scope="session")
def fixture_json():
    """Loads a JSON file from tests/fixtures."""

    def load(name: str) -> dict:
        return json.loads((FIXTURES / name).read_text(encoding="utf-8"))

    return load
