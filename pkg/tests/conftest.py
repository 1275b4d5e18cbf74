"""Shared fixtures for dcpower tests."""

from __future__ import annotations

import json

import pytest

from dcpower.config import load_raw_config
from dcpower.game_core import solve_gamma_star, target_sir
from dcpower.models import EfficiencyModel, SystemParams


# ---------------------------------------------------------------------------
# Numerical setup shared across modules: L = M = 100, R = 100 kb/s,
# σ² = 5e-16 W, N = 100
# ---------------------------------------------------------------------------

@pytest.fixture(scope="session")
def model():
    return EfficiencyModel(100)


@pytest.fixture(scope="session")
def params():
    return SystemParams()


@pytest.fixture(scope="session")
def gamma_star(model):
    return solve_gamma_star(model)


@pytest.fixture(scope="session")
def class_a(model, gamma_star):
    """Delay-sensitive class: one transmission, 99% success."""
    return target_sir(1, 0.99, model, gamma_star=gamma_star, name="A")


@pytest.fixture(scope="session")
def class_b(model, gamma_star):
    """Loose class: three transmissions, 90% success; its target is γ*."""
    return target_sir(3, 0.90, model, gamma_star=gamma_star, name="B")


@pytest.fixture
def raw_config():
    """A fresh copy of the shipped default config."""
    return load_raw_config()


@pytest.fixture
def write_config(tmp_path):
    """Write a config dict to a temp JSON file and return its path."""

    def _write(raw, name="config.json"):
        path = tmp_path / name
        path.write_text(json.dumps(raw))
        return path

    return _write


@pytest.fixture
def small_config(raw_config, write_config, tmp_path):
    """Default config shrunk for fast CLI runs, writing into tmp_path/out."""
    raw_config["scenario"].update({
        "counts": {"A": 0, "B": 4},
        "trials": 3,
        "split_grid": {"start": 0.0, "stop": 1.0, "step": 0.25},
        "beta_grid": {"start": 0.5, "stop": 0.99, "step": 0.07},
    })
    raw_config["system"]["processing_gain"] = 32
    raw_config["output"]["directory"] = str(tmp_path / "out")
    return write_config(raw_config)
