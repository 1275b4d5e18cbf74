"""Shared data models for the power control game, its large-system limit and the simulator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DomainError


@dataclass(frozen=True)
class EfficiencyModel:
    """Packet success probability f(γ) = (1 − e^{−γ})^M for M-bit packets."""

    packet_bits: int

    def __post_init__(self) -> None:
        if int(self.packet_bits) != self.packet_bits or self.packet_bits < 1:
            raise DomainError(f"packet_bits must be a positive integer, got {self.packet_bits!r}")


@dataclass(frozen=True)
class DelayClass:
    """A (D, β) delay requirement and the SIR targets derived from it.

    Instances are built by ``game_core.target_sir``; the derived fields are
    not re-validated here.
    """

    D: int
    beta: float
    eta: float
    gamma_tilde: float
    gamma_tilde_star: float
    name: str = ""


@dataclass(frozen=True)
class GainModel:
    """Channel amplitude model.

    ``unit`` gives h = 1 for every user. ``path_loss`` gives h² = κ/d⁴ with
    d defaulting to ``distance`` metres.
    """

    kind: str = "unit"
    kappa: float = 1.0
    distance: float = 100.0

    def __post_init__(self) -> None:
        if self.kind not in ("unit", "path_loss"):
            raise DomainError(f"gain model kind must be 'unit' or 'path_loss', got {self.kind!r}")
        if self.kappa <= 0 or self.distance <= 0:
            raise DomainError("gain model kappa and distance must be positive")

    def amplitude(self, distance: float | None = None) -> float:
        if self.kind == "unit":
            return 1.0
        d = self.distance if distance is None else distance
        if d <= 0:
            raise DomainError(f"distance must be positive, got {d}")
        return math.sqrt(self.kappa) / (d * d)


@dataclass(frozen=True)
class SystemParams:
    info_bits: int = 100
    packet_bits: int = 100
    rate: float = 1.0e5
    noise_power: float = 5.0e-16
    processing_gain: int = 100
    p_max: float = 1.0e-12
    gain_model: GainModel = field(default_factory=GainModel)

    def __post_init__(self) -> None:
        for name in ("info_bits", "packet_bits", "processing_gain"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise DomainError(f"{name} must be a positive integer, got {value!r}")
        for name in ("rate", "noise_power", "p_max"):
            value = getattr(self, name)
            if not value > 0:
                raise DomainError(f"{name} must be strictly positive, got {value!r}")
        if self.info_bits > self.packet_bits:
            raise DomainError(
                f"info_bits ({self.info_bits}) cannot exceed packet_bits ({self.packet_bits})"
            )

    @property
    def efficiency_model(self) -> EfficiencyModel:
        return EfficiencyModel(self.packet_bits)

    @property
    def goodput_factor(self) -> float:
        """(L/M)·R, the throughput of a packet stream at f(γ) = 1."""
        return self.info_bits / self.packet_bits * self.rate


class ReceiverKind(str, Enum):
    MF = "mf"
    DE = "de"
    MMSE = "mmse"

    @property
    def label(self) -> str:
        return {"mf": "matched filter", "de": "decorrelator", "mmse": "MMSE"}[self.value]


class Feasibility(NamedTuple):
    feasible: bool
    margin: float


@dataclass(frozen=True)
class LoadProfile:
    """Per-class load fractions α⁽ᶜ⁾ = lim K⁽ᶜ⁾/N."""

    classes: tuple[DelayClass, ...]
    alphas: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(self.classes))
        object.__setattr__(self, "alphas", tuple(float(a) for a in self.alphas))
        if not self.classes:
            raise DomainError("a load profile needs at least one class")
        if len(self.classes) != len(self.alphas):
            raise DomainError(
                f"got {len(self.classes)} classes but {len(self.alphas)} load fractions"
            )
        if any(a < 0 or not math.isfinite(a) for a in self.alphas):
            raise DomainError(f"load fractions must be finite and nonnegative, got {self.alphas}")

    @classmethod
    def from_mix(
        cls,
        classes: Sequence[DelayClass],
        total_alpha: float,
        fractions: Sequence[float],
    ) -> LoadProfile:
        return cls(tuple(classes), tuple(total_alpha * f for f in fractions))

    @property
    def total_alpha(self) -> float:
        return math.fsum(self.alphas)


@dataclass(frozen=True)
class EquilibriumReport:
    """Large-system equilibrium for every class of a load profile (h = 1 unless given)."""

    receiver: ReceiverKind
    feasible: bool
    margin: float
    powers: tuple[float, ...]
    utilities: tuple[float, ...]
    over_cap: tuple[int, ...] = ()


@dataclass(eq=False)
class NetworkRealization:
    """One finite-system snapshot: spreading sequences (columns), gains and powers."""

    params: SystemParams
    classes: tuple[DelayClass, ...]
    class_indices: np.ndarray
    sequences: np.ndarray
    gains: np.ndarray
    powers: np.ndarray
    seed: int
    trial: int = 0

    @property
    def processing_gain(self) -> int:
        return self.sequences.shape[0]

    @property
    def num_users(self) -> int:
        return self.sequences.shape[1]

    @property
    def noise_power(self) -> float:
        return self.params.noise_power

    @property
    def p_max(self) -> float:
        return self.params.p_max

    @cached_property
    def targets(self) -> np.ndarray:
        """Per-user equilibrium targets γ̃*_k."""
        return np.array([self.classes[c].gamma_tilde_star for c in self.class_indices])

    @cached_property
    def thresholds(self) -> np.ndarray:
        """Per-user delay thresholds γ̃_k."""
        return np.array([self.classes[c].gamma_tilde for c in self.class_indices])

    @cached_property
    def correlation(self) -> np.ndarray:
        """Cross-correlation matrix SᵀS; sequences are fixed after generation."""
        return self.sequences.T @ self.sequences

    def delay_class(self, k: int) -> DelayClass:
        return self.classes[int(self.class_indices[k])]


@dataclass
class EquilibriumTrace:
    iterations: int
    changes: list[float]
    sirs: np.ndarray
    powers: np.ndarray
    converged: bool
    capped: tuple[int, ...] = ()
