"""Large-system (K, N → ∞, K/N → α) equilibrium of the multi-class game.

All closed forms are written in terms of the receiver's *interference load*
ℓ: Σα⁽ᶜ⁾γ̃*⁽ᶜ⁾ for the matched filter, α for the decorrelator and
Σα⁽ᶜ⁾γ̃*⁽ᶜ⁾/(1+γ̃*⁽ᶜ⁾) for MMSE. The load is feasible when ℓ < 1 and the
feasibility margin is 1 − ℓ.
"""

from __future__ import annotations

import logging
import math
from dataclasses import replace
from typing import Sequence

from .errors import DomainError, InfeasibleLoadError
from .game_core import efficiency, solve_gamma_star
from .models import (
    DelayClass,
    EfficiencyModel,
    EquilibriumReport,
    Feasibility,
    LoadProfile,
    ReceiverKind,
    SystemParams,
)

logger = logging.getLogger(__name__)

# Margins below this are treated as infeasible: powers blow up at the pole.
NEAR_BOUNDARY_MARGIN = 1e-9


def _per_user_load(rx: ReceiverKind, target: float) -> float:
    """Interference load one unit of α at SIR ``target`` puts on the receiver."""
    if rx is ReceiverKind.MF:
        return target
    if rx is ReceiverKind.DE:
        return 1.0
    if rx is ReceiverKind.MMSE:
        return target / (1.0 + target)
    raise DomainError(f"unknown receiver {rx!r}")


def _interference_load(load: LoadProfile, rx: ReceiverKind) -> float:
    return math.fsum(
        a * _per_user_load(rx, c.gamma_tilde_star) for c, a in zip(load.classes, load.alphas)
    )


def feasibility(load: LoadProfile, rx: ReceiverKind) -> Feasibility:
    """Whether every class can reach γ̃*⁽ᶜ⁾ under ``rx``; margin = 1 − load.

    The condition is strict, and margins under 1e-9 are reported infeasible.
    """
    margin = 1.0 - _interference_load(load, rx)
    if 0 < margin < NEAR_BOUNDARY_MARGIN:
        logger.warning("%s load is within %.1e of the feasibility boundary", rx.label, margin)
    return Feasibility(margin >= NEAR_BOUNDARY_MARGIN, margin)


def _require_feasible(load: LoadProfile, rx: ReceiverKind) -> float:
    feasible, margin = feasibility(load, rx)
    if not feasible:
        raise InfeasibleLoadError(
            f"{rx.label} cannot support total load α={load.total_alpha:.6g} "
            f"(feasibility margin {margin:.6g})",
            margin,
        )
    return margin


def _check_gain(h: float) -> None:
    if not h > 0:
        raise DomainError(f"channel gain must be positive, got {h!r}")


def equilibrium_power(
    params: SystemParams,
    load: LoadProfile,
    rx: ReceiverKind,
    class_index: int,
    h: float = 1.0,
) -> float:
    """Minimum power for a class-``class_index`` user to reach γ̃*⁽ᶜ⁾.

    p = γ̃*σ² / (h²·margin). The value is not capped; exceeding p_max is
    logged as a warning.
    """
    _check_gain(h)
    margin = _require_feasible(load, rx)
    target = load.classes[class_index].gamma_tilde_star
    power = target * params.noise_power / (h * h * margin)
    if power > params.p_max:
        logger.warning(
            "%s equilibrium power %.4g W for class %d exceeds p_max %.4g W",
            rx.label, power, class_index, params.p_max,
        )
    return power


def equilibrium_utility(
    params: SystemParams,
    load: LoadProfile,
    rx: ReceiverKind,
    class_index: int,
    h: float = 1.0,
    model: EfficiencyModel | None = None,
) -> float:
    """Utility at the Nash equilibrium: (LR/(Mσ²))·h²·margin·f(γ̃*)/γ̃*."""
    _check_gain(h)
    margin = _require_feasible(load, rx)
    model = model or params.efficiency_model
    target = load.classes[class_index].gamma_tilde_star
    return (
        params.goodput_factor / params.noise_power
        * h * h * margin
        * efficiency(model, target) / target
    )


def equilibrium_report(
    params: SystemParams,
    load: LoadProfile,
    rx: ReceiverKind,
    gains: Sequence[float] | None = None,
) -> EquilibriumReport:
    """Powers and utilities of every class, zeros when the load is infeasible."""
    gains = [1.0] * len(load.classes) if gains is None else list(gains)
    feasible, margin = feasibility(load, rx)
    if not feasible:
        zeros = (0.0,) * len(load.classes)
        return EquilibriumReport(rx, False, margin, zeros, zeros)

    powers = tuple(equilibrium_power(params, load, rx, c, h) for c, h in enumerate(gains))
    utilities = tuple(equilibrium_utility(params, load, rx, c, h) for c, h in enumerate(gains))
    over_cap = tuple(c for c, p in enumerate(powers) if p > params.p_max)
    return EquilibriumReport(rx, True, margin, powers, utilities, over_cap)


def unconstrained_load(load: LoadProfile, gamma_star: float) -> LoadProfile:
    """The same α⁽ᶜ⁾ with every class targeting γ* (no delay constraints)."""
    loose = tuple(replace(c, gamma_tilde_star=gamma_star) for c in load.classes)
    return LoadProfile(loose, load.alphas)


def unconstrained_utility(
    params: SystemParams,
    total_alpha: float,
    rx: ReceiverKind,
    gamma_star: float,
    h: float = 1.0,
    model: EfficiencyModel | None = None,
) -> float:
    """Equilibrium utility when nobody is delay constrained (every target at γ*)."""
    _check_gain(h)
    model = model or params.efficiency_model
    margin = 1.0 - total_alpha * _per_user_load(rx, gamma_star)
    if margin < NEAR_BOUNDARY_MARGIN:
        raise InfeasibleLoadError(
            f"{rx.label} cannot support unconstrained load α={total_alpha:.6g}", margin,
        )
    return (
        params.goodput_factor / params.noise_power
        * h * h * margin
        * efficiency(model, gamma_star) / gamma_star
    )


def utility_loss_ratio(
    params: SystemParams,
    load: LoadProfile,
    rx: ReceiverKind,
    class_index: int,
    gamma_star: float | None = None,
) -> float:
    """u⁽ᶜ⁾ under ``load`` divided by the utility with every class at γ*.

    The gain cancels, so the ratio is computed at h = 1. The baseline is
    checked first so an infeasible baseline raises even when ``load`` is
    itself infeasible.
    """
    if gamma_star is None:
        gamma_star = solve_gamma_star(params.efficiency_model)
    baseline = unconstrained_load(load, gamma_star)
    _require_feasible(baseline, rx)
    return (
        equilibrium_utility(params, load, rx, class_index)
        / equilibrium_utility(params, baseline, rx, class_index)
    )


def capacity(
    classes: Sequence[DelayClass],
    mix_fractions: Sequence[float],
    rx: ReceiverKind,
) -> float:
    """Largest total α the receiver can support for a fixed class mix.

    This is the supremum of the feasible α; the load at exactly this α is
    itself infeasible.
    """
    if len(classes) != len(mix_fractions):
        raise DomainError("need one mix fraction per class")
    if any(f < 0 for f in mix_fractions) or not math.isclose(math.fsum(mix_fractions), 1.0, abs_tol=1e-9):
        raise DomainError(f"mix fractions must be nonnegative and sum to 1, got {list(mix_fractions)}")
    per_unit = math.fsum(f * _per_user_load(rx, c.gamma_tilde_star) for c, f in zip(classes, mix_fractions))
    return 1.0 / per_unit
