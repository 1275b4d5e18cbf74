"""Experiment configuration: JSON loading, validation and the canonical hash."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError, DomainError
from .game_core import solve_gamma_star, target_sir
from .models import DelayClass, GainModel, ReceiverKind, SystemParams

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "DCPOWER_SEED"

# Sections that decide table contents; output settings are left out of the hash.
HASHED_SECTIONS = ("system", "classes", "scenario")

DEFAULT_GAP_BAND = {"mf": 0.10, "de": 0.05, "mmse": 0.05}


@dataclass(frozen=True)
class ClassSpec:
    name: str
    D: int
    beta: float


@dataclass(frozen=True)
class Grid:
    start: float
    stop: float
    step: float

    def values(self) -> np.ndarray:
        """Points start, start + step, ... up to and including stop, never past it."""
        count = int(math.floor((self.stop - self.start) / self.step + 1e-9)) + 1
        return np.round(self.start + self.step * np.arange(count), 12)


@dataclass(frozen=True)
class ScenarioConfig:
    receivers: tuple[ReceiverKind, ...] = (ReceiverKind.MF, ReceiverKind.DE, ReceiverKind.MMSE)
    total_alphas: tuple[float, ...] = (0.1, 0.9)
    split_grid: Grid = Grid(0.0, 1.0, 0.05)
    beta_grid: Grid = Grid(0.5, 0.995, 0.005)
    delays: tuple[int, ...] = (1, 2, 3)
    counts: dict[str, int] = field(default_factory=dict)
    trials: int = 200
    seed: int = 0
    workers: int = 1
    tolerance: float = 1e-10
    max_iters: int = 10_000
    gap_band: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_GAP_BAND))
    censor_limit: float = 0.10

    def band_for(self, rx: ReceiverKind) -> float:
        return self.gap_band[rx.value]


@dataclass(frozen=True)
class OutputConfig:
    directory: Path = Path("results")
    formats: tuple[str, ...] = ("csv",)


@dataclass(frozen=True)
class ExperimentConfig:
    system: SystemParams
    classes: tuple[ClassSpec, ...]
    scenario: ScenarioConfig
    output: OutputConfig
    raw: dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @property
    def config_hash(self) -> str:
        return config_hash(self.raw)

    def delay_classes(self) -> tuple[DelayClass, ...]:
        model = self.system.efficiency_model
        gamma_star = solve_gamma_star(model)
        return tuple(target_sir(c.D, c.beta, model, gamma_star=gamma_star, name=c.name) for c in self.classes)

    def class_counts(self) -> tuple[int, ...]:
        return tuple(self.scenario.counts.get(c.name, 0) for c in self.classes)


def config_hash(raw: dict[str, Any]) -> str:
    """SHA-256 of the system, classes and scenario sections in canonical JSON."""
    hashed = {name: raw.get(name) for name in HASHED_SECTIONS}
    canonical = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def default_config_path() -> Path:
    return Path(str(resources.files("dcpower").joinpath("default.json")))


# ---------------------------------------------------------------------------
# Parsing helpers
# ---------------------------------------------------------------------------

def _section(raw: dict, name: str) -> dict:
    value = raw.get(name, {})
    if not isinstance(value, dict):
        raise ConfigError(f"'{name}' must be a JSON object, got {type(value).__name__}")
    return value


def _number(block: dict, key: str, default: Any, kind: type = float) -> Any:
    value = block.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"'{key}' must be a number, got {value!r}")
    if kind is int:
        if int(value) != value:
            raise ConfigError(f"'{key}' must be an integer, got {value!r}")
        return int(value)
    return float(value)


def _grid(block: dict, key: str, default: Grid) -> Grid:
    spec = block.get(key)
    if spec is None:
        return default
    if not isinstance(spec, dict):
        raise ConfigError(f"'{key}' must be an object with start/stop/step")
    grid = Grid(
        _number(spec, "start", default.start),
        _number(spec, "stop", default.stop),
        _number(spec, "step", default.step),
    )
    if not grid.step > 0 or grid.stop < grid.start:
        raise ConfigError(f"'{key}' must be nonempty and strictly increasing, got {spec}")
    return grid


def parse_receivers(names: list[str] | str) -> tuple[ReceiverKind, ...]:
    if isinstance(names, str):
        names = [names]
    if "all" in names:
        return tuple(ReceiverKind)
    try:
        return tuple(ReceiverKind(n.lower()) for n in names)
    except ValueError as exc:
        raise ConfigError(f"unknown receiver in {names}; use mf, de, mmse or all") from exc


def _system(raw: dict) -> SystemParams:
    block = _section(raw, "system")
    defaults = SystemParams()
    gain_block = _section(block, "gain_model")
    try:
        gain_model = GainModel(
            kind=gain_block.get("kind", "unit"),
            kappa=_number(gain_block, "kappa", 1.0),
            distance=_number(gain_block, "distance", 100.0),
        )
        return SystemParams(
            info_bits=_number(block, "info_bits", defaults.info_bits, int),
            packet_bits=_number(block, "packet_bits", defaults.packet_bits, int),
            rate=_number(block, "rate", defaults.rate),
            noise_power=_number(block, "noise_power", defaults.noise_power),
            processing_gain=_number(block, "processing_gain", defaults.processing_gain, int),
            p_max=_number(block, "p_max", defaults.p_max),
            gain_model=gain_model,
        )
    except DomainError as exc:
        raise ConfigError(f"invalid system block: {exc}") from exc


def _classes(raw: dict) -> tuple[ClassSpec, ...]:
    entries = raw.get("classes")
    if not isinstance(entries, list) or not entries:
        raise ConfigError("'classes' must be a nonempty list of {name, D, beta} objects")
    classes = []
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise ConfigError(f"class #{i} must be an object, got {type(entry).__name__}")
        spec = ClassSpec(
            name=str(entry.get("name", f"class{i}")),
            D=_number(entry, "D", None, int),
            beta=_number(entry, "beta", None),
        )
        if spec.D < 1 or not 0 < spec.beta < 1:
            raise ConfigError(f"class {spec.name!r} needs D >= 1 and 0 < beta < 1")
        classes.append(spec)
    names = [c.name for c in classes]
    if len(set(names)) != len(names):
        raise ConfigError(f"class names must be unique, got {names}")
    return tuple(classes)


def _scenario(raw: dict, class_names: set[str]) -> ScenarioConfig:
    block = _section(raw, "scenario")
    defaults = ScenarioConfig()
    alphas = tuple(float(a) for a in block.get("total_alphas", defaults.total_alphas))
    if not alphas or any(a <= 0 for a in alphas) or list(alphas) != sorted(set(alphas)):
        raise ConfigError(f"'total_alphas' must be positive and strictly increasing, got {alphas}")
    delays = tuple(int(d) for d in block.get("delays", defaults.delays))
    if not delays or any(d < 1 for d in delays):
        raise ConfigError(f"'delays' must be positive integers, got {delays}")
    counts = block.get("counts", {})
    if not isinstance(counts, dict) or any(name not in class_names for name in counts):
        raise ConfigError(f"'counts' must map class names {sorted(class_names)} to user counts")
    counts = {name: _number(counts, name, 0, int) for name in counts}
    if any(v < 0 for v in counts.values()):
        raise ConfigError("user counts must be nonnegative")

    scenario = ScenarioConfig(
        receivers=parse_receivers(block.get("receivers", ["all"])),
        total_alphas=alphas,
        split_grid=_grid(block, "split_grid", defaults.split_grid),
        beta_grid=_grid(block, "beta_grid", defaults.beta_grid),
        delays=delays,
        counts=counts,
        trials=_number(block, "trials", defaults.trials, int),
        seed=_number(block, "seed", defaults.seed, int),
        workers=_number(block, "workers", defaults.workers, int),
        tolerance=_number(block, "tolerance", defaults.tolerance),
        max_iters=_number(block, "max_iters", defaults.max_iters, int),
        gap_band=_gap_band(block),
        censor_limit=_number(block, "censor_limit", defaults.censor_limit),
    )
    if scenario.trials < 1 or scenario.workers < 1 or scenario.max_iters < 1:
        raise ConfigError("trials, workers and max_iters must be positive")
    if scenario.split_grid.start < 0 or scenario.split_grid.stop > 1:
        raise ConfigError("'split_grid' must lie within [0, 1]")
    if scenario.beta_grid.start <= 0 or scenario.beta_grid.stop >= 1:
        raise ConfigError("'beta_grid' must lie strictly inside (0, 1)")
    if scenario.seed < 0:
        raise ConfigError(f"'seed' must be nonnegative, got {scenario.seed}")
    return scenario


def _gap_band(block: dict) -> dict[str, float]:
    """Allowed relative gap to the large-system value, per receiver."""
    value = block.get("gap_band", DEFAULT_GAP_BAND)
    if isinstance(value, dict):
        unknown = set(value) - {rx.value for rx in ReceiverKind}
        if unknown:
            raise ConfigError(f"'gap_band' has unknown receivers {sorted(unknown)}")
        bands = {rx.value: _number(value, rx.value, DEFAULT_GAP_BAND[rx.value]) for rx in ReceiverKind}
    else:
        band = _number(block, "gap_band", 0.05)
        bands = {rx.value: band for rx in ReceiverKind}
    if any(b <= 0 for b in bands.values()):
        raise ConfigError(f"'gap_band' must be positive, got {value!r}")
    return bands


def _output(raw: dict) -> OutputConfig:
    block = _section(raw, "output")
    formats = tuple(block.get("formats", ["csv"]))
    if not formats or any(f not in ("csv", "dat") for f in formats):
        raise ConfigError(f"'formats' must be a nonempty subset of ['csv', 'dat'], got {list(formats)}")
    return OutputConfig(directory=Path(block.get("directory", "results")), formats=formats)


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------

def parse_config(raw: dict[str, Any]) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"config must be a JSON object, got {type(raw).__name__}")
    classes = _classes(raw)
    return ExperimentConfig(
        system=_system(raw),
        classes=classes,
        scenario=_scenario(raw, {c.name for c in classes}),
        output=_output(raw),
        raw=raw,
    )


def load_raw_config(path: Path | None = None) -> dict[str, Any]:
    path = default_config_path() if path is None else Path(path)
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    logger.debug("Loaded config from %s", path)
    return raw


def apply_overrides(
    raw: dict[str, Any],
    *,
    seed: int | None = None,
    out: Path | None = None,
    receiver: str | None = None,
    trials: int | None = None,
    fmt: str | None = None,
) -> dict[str, Any]:
    """Return a copy of ``raw`` with CLI overrides folded in.

    The seed comes from ``seed``, then the DCPOWER_SEED environment variable,
    then the file itself.
    """
    merged = json.loads(json.dumps(raw))
    scenario = merged.setdefault("scenario", {})
    output = merged.setdefault("output", {})

    env_seed = os.environ.get(SEED_ENV_VAR)
    if seed is None and env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer, got {env_seed!r}") from exc
    if seed is not None:
        scenario["seed"] = seed
    if receiver is not None:
        scenario["receivers"] = [receiver]
    if trials is not None:
        scenario["trials"] = trials
    if out is not None:
        output["directory"] = str(out)
    if fmt is not None:
        output["formats"] = [fmt]
    return merged


def load_config(path: Path | None = None, **overrides: Any) -> ExperimentConfig:
    """Load, override and validate an experiment config (the shipped default when ``path`` is None)."""
    return parse_config(apply_overrides(load_raw_config(path), **overrides))
