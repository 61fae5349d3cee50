"""Fixtures compartidas: sistema con rumbo, costos del ejemplo y mallas gruesas."""

import sys
from pathlib import Path

import numpy as np
import pytest

REPO_ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(REPO_ROOT / "scripts"))

from obsctrl.cost import CostSpec, DecayRule, FixedZeta  # noqa: E402
from obsctrl.model import holonomic_bearing, linear_system  # noqa: E402
from obsctrl.ode import IntegratorConfig  # noqa: E402

SCENARIOS = REPO_ROOT / "scenarios"


@pytest.fixture
def bearing():
    return holonomic_bearing()


@pytest.fixture
def x0():
    return np.array([-1.0, 2.0])


@pytest.fixture
def spec():
    return CostSpec(Q=np.eye(2), R=np.eye(2), Qf=0.1 * np.eye(2), epsilon=0.01, zeta_policy=FixedZeta(10.0))


@pytest.fixture
def decay_spec():
    return CostSpec(Q=np.eye(2), R=np.eye(2), Qf=0.1 * np.eye(2), epsilon=0.01, zeta_policy=DecayRule(1.0))


@pytest.fixture
def coarse():
    return IntegratorConfig(dt=1e-2)


@pytest.fixture
def scalar_system():
    return linear_system([[-1.0]], [[1.0]], [[1.0]])


@pytest.fixture
def double_integrator():
    return linear_system([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], [[1.0, 0.0]])


@pytest.fixture
def scenarios_dir():
    return SCENARIOS
