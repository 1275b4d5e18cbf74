"""Efficiency function, delay-to-SIR translation, γ* and the users' utilities."""

from __future__ import annotations

import logging
import math
from typing import Sequence

from scipy import optimize

from .errors import DomainError, SolverError
from .models import DelayClass, EfficiencyModel, Feasibility, SystemParams

logger = logging.getLogger(__name__)

# Search interval for γ* and the Newton polish applied after bisection.
GAMMA_STAR_BRACKET = (1e-6, 100.0)
_BISECT_XTOL = 1e-12
_NEWTON_POLISH_STEPS = 3


def to_db(sir: float) -> float:
    return 10.0 * math.log10(sir)


def from_db(db: float) -> float:
    return 10.0 ** (db / 10.0)


def _check_gamma(gamma: float) -> None:
    if not gamma >= 0:
        raise DomainError(f"SIR must be nonnegative, got {gamma!r}")


def _check_probability(name: str, value: float) -> None:
    if not 0.0 < value < 1.0:
        raise DomainError(f"{name} must lie strictly between 0 and 1, got {value!r}")


def _check_transmissions(D: int) -> None:
    if int(D) != D or D < 1:
        raise DomainError(f"D must be a positive integer, got {D!r}")


# ---------------------------------------------------------------------------
# Efficiency function
# ---------------------------------------------------------------------------

def efficiency(model: EfficiencyModel, gamma: float) -> float:
    """Packet success probability f(γ) = (1 − e^{−γ})^M.

    f(0) is exactly 0 for every M.
    """
    _check_gamma(gamma)
    return (-math.expm1(-gamma)) ** model.packet_bits


def efficiency_derivative(model: EfficiencyModel, gamma: float) -> float:
    """f'(γ) = M·e^{−γ}·(1 − e^{−γ})^{M−1}."""
    _check_gamma(gamma)
    m = model.packet_bits
    return m * math.exp(-gamma) * (-math.expm1(-gamma)) ** (m - 1)


def _efficiency_complement(model: EfficiencyModel, gamma: float) -> float:
    # 1 − f(γ) without cancellation when f is close to 1
    if gamma == 0:
        return 1.0
    return -math.expm1(model.packet_bits * math.log1p(-math.exp(-gamma)))


def invert_efficiency(model: EfficiencyModel, eta: float, method: str = "analytic") -> float:
    """Smallest SIR with f(γ) = η.

    ``method="analytic"`` uses γ = −ln(1 − η^{1/M}); ``method="bisect"``
    solves f(γ) = η numerically and serves as an independent cross-check.
    """
    _check_probability("eta", eta)
    if method == "analytic":
        # 1 − η^{1/M} = −expm1(ln η / M)
        return -math.log(-math.expm1(math.log(eta) / model.packet_bits))
    if method != "bisect":
        raise DomainError(f"unknown inversion method {method!r}")

    hi = 1.0
    while efficiency(model, hi) < eta:
        hi *= 2.0
    root = optimize.bisect(
        lambda g: efficiency(model, g) - eta, 0.0, hi, xtol=1e-15, rtol=1e-15, maxiter=400,
    )
    logger.debug("invert_efficiency(M=%d, eta=%.17g) by bisection -> %.17g", model.packet_bits, eta, root)
    return root


# ---------------------------------------------------------------------------
# Delay requirements
# ---------------------------------------------------------------------------

def eta(D: int, beta: float) -> float:
    """Minimum per-transmission success probability η = 1 − (1−β)^{1/D}."""
    _check_transmissions(D)
    _check_probability("beta", beta)
    return -math.expm1(math.log1p(-beta) / D)


def transmission_pmf(model: EfficiencyModel, gamma: float, m: int) -> float:
    """Pr{X = m}: exactly m transmissions are needed, Pr = f(1−f)^{m−1}."""
    _check_transmissions(m)
    _check_gamma(gamma)
    return efficiency(model, gamma) * _efficiency_complement(model, gamma) ** (m - 1)


def expected_transmissions(model: EfficiencyModel, gamma: float) -> float:
    """E{X} = 1/f(γ)."""
    if not gamma > 0:
        raise DomainError(f"SIR must be positive, got {gamma!r}")
    return 1.0 / efficiency(model, gamma)


def delay_outage_probability(model: EfficiencyModel, gamma: float, D: int) -> float:
    """Pr{X > D} = (1 − f(γ))^D."""
    if not gamma > 0:
        raise DomainError(f"SIR must be positive, got {gamma!r}")
    _check_transmissions(D)
    return _efficiency_complement(model, gamma) ** D


# ---------------------------------------------------------------------------
# Unconstrained optimum γ*
# ---------------------------------------------------------------------------

def _stationarity(model: EfficiencyModel, gamma: float) -> float:
    # (f − γf')/f = 1 − γ·f'/f, with f'/f = M/expm1(γ). Same sign as f − γf'
    # but free of the underflow of f at small γ for large M.
    return 1.0 - model.packet_bits * gamma / math.expm1(gamma)


def _stationarity_slope(model: EfficiencyModel, gamma: float) -> float:
    em1 = math.expm1(gamma)
    return model.packet_bits * (gamma * math.exp(gamma) - em1) / (em1 * em1)


def stationarity_residual(model: EfficiencyModel, gamma: float) -> float:
    """g(γ) = f(γ) − γf'(γ); negative below γ*, positive above it."""
    return efficiency(model, gamma) - gamma * efficiency_derivative(model, gamma)


def solve_gamma_star(model: EfficiencyModel) -> float:
    """The unique positive root γ* of f(γ) = γ f'(γ).

    Bisection on [1e-6, 100] down to a 1e-12 bracket, then three Newton
    steps that are only accepted while they stay inside the bracket.
    """
    lo, hi = GAMMA_STAR_BRACKET
    g_lo = _stationarity(model, lo)
    g_hi = _stationarity(model, hi)
    if g_lo * g_hi >= 0:
        raise SolverError(
            f"f(γ) − γf'(γ) does not change sign on [{lo}, {hi}] for M={model.packet_bits}; "
            "the efficiency function is not sigmoidal"
        )

    root = optimize.bisect(lambda g: _stationarity(model, g), lo, hi, xtol=_BISECT_XTOL, maxiter=200)
    left, right = root - _BISECT_XTOL, root + _BISECT_XTOL
    for _ in range(_NEWTON_POLISH_STEPS):
        step = _stationarity(model, root) / _stationarity_slope(model, root)
        candidate = root - step
        if not left <= candidate <= right:
            break
        root = candidate

    logger.debug(
        "gamma* for M=%d: %.15g (residual %.3g)",
        model.packet_bits, root, stationarity_residual(model, root),
    )
    return root


# ---------------------------------------------------------------------------
# Per-class targets
# ---------------------------------------------------------------------------

def target_sir(
    D: int,
    beta: float,
    model: EfficiencyModel,
    *,
    gamma_star: float | None = None,
    name: str = "",
) -> DelayClass:
    """Derive η, γ̃ and γ̃* = max(γ̃, γ*) for a (D, β) requirement."""
    eta_value = eta(D, beta)
    gamma_tilde = invert_efficiency(model, eta_value)
    if gamma_star is None:
        gamma_star = solve_gamma_star(model)
    return DelayClass(
        D=int(D),
        beta=float(beta),
        eta=eta_value,
        gamma_tilde=gamma_tilde,
        gamma_tilde_star=max(gamma_tilde, gamma_star),
        name=name,
    )


make_delay_class = target_sir


# ---------------------------------------------------------------------------
# Utilities
# ---------------------------------------------------------------------------

def utility(params: SystemParams, model: EfficiencyModel, gamma: float, p: float) -> float:
    """Energy efficiency u = (L/M)·R·f(γ)/p in bits/Joule."""
    if not p > 0:
        raise DomainError(f"transmit power must be positive, got {p!r}")
    return params.goodput_factor * efficiency(model, gamma) / p


def constrained_utility(
    params: SystemParams,
    model: EfficiencyModel,
    delay_class: DelayClass,
    gamma: float,
    p: float,
    *,
    sir_rtol: float = 0.0,
) -> float:
    """Delay-constrained utility: u when γ ≥ γ̃, otherwise 0 (and 0 at p = 0).

    ``sir_rtol`` relaxes the threshold to γ̃·(1 − sir_rtol) for SIRs that come
    out of an iterative solve.
    """
    if p < 0:
        raise DomainError(f"transmit power must be nonnegative, got {p!r}")
    _check_gamma(gamma)
    if p == 0 or gamma < delay_class.gamma_tilde * (1.0 - sir_rtol):
        return 0.0
    return utility(params, model, gamma, p)


def mf_admission_check(targets: Sequence[float], processing_gain: int) -> Feasibility:
    """Matched-filter admission test Σ_k 1/(1 + N/γ_k) < 1.

    ``targets`` are per-user SIRs; pass γ̃_k for the delay-only test or γ̃*_k
    for equilibrium feasibility.
    """
    total = math.fsum(1.0 / (1.0 + processing_gain / g) for g in targets)
    margin = 1.0 - total
    return Feasibility(margin > 0, margin)
