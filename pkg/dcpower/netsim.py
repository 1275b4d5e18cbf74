"""Finite-system CDMA uplink: random spreading, linear-receiver SIRs and best-response dynamics.

SIRs use exact second-order statistics (noise covariance σ²I, unit-power
symbols); bits and noise samples are never drawn.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

from . import large_system
from .errors import ConvergenceError, DomainError, ReceiverInapplicableError
from .game_core import constrained_utility, mf_admission_check
from .models import (
    DelayClass,
    EquilibriumTrace,
    LoadProfile,
    NetworkRealization,
    ReceiverKind,
    SystemParams,
)

logger = logging.getLogger(__name__)

DEFAULT_PERTURBATIONS = (0.5, 0.9, 0.99, 1.01, 1.1, 2.0)
CONDITION_LIMIT = 1e12


def user_rng(seed: int, trial: int, user: int) -> np.random.Generator:
    """Philox stream keyed by (seed, trial, user).

    A user's spreading sequence depends only on its own key, not on K or on
    the order users are generated in.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, trial, user])))


# ---------------------------------------------------------------------------
# Realizations
# ---------------------------------------------------------------------------

def generate_network(
    params: SystemParams,
    classes: Sequence[DelayClass],
    class_indices: Sequence[int],
    seed: int,
    *,
    trial: int = 0,
    distances: Sequence[float] | None = None,
    initial_powers: Sequence[float] | None = None,
) -> NetworkRealization:
    """Draw a synchronous random-spreading uplink with K = len(class_indices) users.

    Chips are ±1/√N with equal probability. Powers start at the
    zero-interference power σ²γ̃*_k/h_k² (capped at p_max) unless
    ``initial_powers`` is given.
    """
    n = params.processing_gain
    k_users = len(class_indices)
    if k_users < 1:
        raise DomainError("a network needs at least one user")
    if any(not 0 <= c < len(classes) for c in class_indices):
        raise DomainError(f"class index out of range for {len(classes)} classes")

    chips = np.empty((n, k_users))
    for k in range(k_users):
        signs = user_rng(seed, trial, k).integers(0, 2, size=n) * 2 - 1
        chips[:, k] = signs / math.sqrt(n)

    if distances is None:
        gains = np.full(k_users, params.gain_model.amplitude())
    else:
        if len(distances) != k_users:
            raise DomainError(f"got {len(distances)} distances for {k_users} users")
        gains = np.array([params.gain_model.amplitude(d) for d in distances])

    net = NetworkRealization(
        params=params,
        classes=tuple(classes),
        class_indices=np.asarray(class_indices, dtype=int),
        sequences=chips,
        gains=gains,
        powers=np.zeros(k_users),
        seed=seed,
        trial=trial,
    )
    if initial_powers is None:
        net.powers = zero_interference_powers(net)
    else:
        powers = np.asarray(initial_powers, dtype=float)
        if powers.shape != (k_users,) or np.any(powers < 0) or np.any(powers > params.p_max):
            raise DomainError("initial powers must be K values in [0, p_max]")
        net.powers = powers.copy()
    logger.debug("Generated network seed=%d trial=%d N=%d K=%d", seed, trial, n, k_users)
    return net


def zero_interference_powers(net: NetworkRealization) -> np.ndarray:
    return np.minimum(net.noise_power * net.targets / net.gains**2, net.p_max)


# ---------------------------------------------------------------------------
# Receivers
# ---------------------------------------------------------------------------

def _decorrelator_diag(net: NetworkRealization) -> np.ndarray:
    """Diagonal of (SᵀS)^{-1}; independent of the powers."""
    cached = net.__dict__.get("_decorrelator_diag")
    if cached is not None:
        return cached
    if net.num_users > net.processing_gain:
        raise ReceiverInapplicableError(
            f"decorrelator needs K <= N, got K={net.num_users}, N={net.processing_gain}"
        )
    corr = net.correlation
    cond = np.linalg.cond(corr)
    if not cond < CONDITION_LIMIT:
        raise ReceiverInapplicableError(f"SᵀS is singular or ill-conditioned (cond={cond:.3g})")
    lu = linalg.lu_factor(corr)
    diag = np.diag(linalg.lu_solve(lu, np.eye(net.num_users))).copy()
    net.__dict__["_decorrelator_diag"] = diag
    return diag


def effective_gains(
    net: NetworkRealization,
    rx: ReceiverKind,
    powers: np.ndarray | None = None,
) -> np.ndarray:
    """c_k = γ_k/p_k: the SIR each user gets per Watt given everyone else's power.

    Linear receivers make γ_k linear in p_k, so c_k depends only on p_{j≠k}.
    """
    p = net.powers if powers is None else np.asarray(powers, dtype=float)
    sigma2 = net.noise_power
    h2 = net.gains**2
    received = p * h2 / sigma2

    if rx is ReceiverKind.MF:
        rho2 = net.correlation**2
        interference = rho2 @ received - np.diag(rho2) * received
        return h2 / (sigma2 * (1.0 + interference))

    if rx is ReceiverKind.DE:
        return h2 / (sigma2 * _decorrelator_diag(net))

    if rx is ReceiverKind.MMSE:
        s = net.sequences
        # Condition bound of S·diag(q)·Sᵀ + I from its trace.
        if not 1.0 + received.sum() < CONDITION_LIMIT:
            raise ReceiverInapplicableError("MMSE covariance is too ill-conditioned to factor")
        cov = (s * received) @ s.T + np.eye(net.processing_gain)
        factor = linalg.cho_factor(cov, lower=True)
        y = np.einsum("ij,ij->j", s, linalg.cho_solve(factor, s))
        # Remove each user's own term: s_kᵀΣ_{-k}^{-1}s_k = y_k/(1 − q_k y_k).
        return h2 * y / (sigma2 * (1.0 - received * y))

    raise DomainError(f"unknown receiver {rx!r}")


def sir_all(
    net: NetworkRealization,
    rx: ReceiverKind,
    powers: np.ndarray | None = None,
) -> np.ndarray:
    p = net.powers if powers is None else np.asarray(powers, dtype=float)
    return p * effective_gains(net, rx, p)


def _user_effective_gain(net: NetworkRealization, rx: ReceiverKind, k: int, p: np.ndarray) -> float:
    sigma2 = net.noise_power
    h2 = net.gains**2
    received = p * h2 / sigma2

    if rx is ReceiverKind.MF:
        rho2 = net.correlation[k] ** 2
        interference = float(rho2 @ received - rho2[k] * received[k])
        return float(h2[k] / (sigma2 * (1.0 + interference)))

    if rx is ReceiverKind.DE:
        return float(h2[k] / (sigma2 * _decorrelator_diag(net)[k]))

    if rx is ReceiverKind.MMSE:
        others = np.arange(net.num_users) != k
        if not 1.0 + received[others].sum() < CONDITION_LIMIT:
            raise ReceiverInapplicableError("MMSE covariance is too ill-conditioned to factor")
        s = net.sequences
        cov = (s[:, others] * received[others]) @ s[:, others].T + np.eye(net.processing_gain)
        y = float(s[:, k] @ linalg.cho_solve(linalg.cho_factor(cov, lower=True), s[:, k]))
        return float(h2[k] * y / sigma2)

    raise DomainError(f"unknown receiver {rx!r}")


def sir(net: NetworkRealization, rx: ReceiverKind, k: int) -> float:
    """Output SIR of user k under the current powers, without computing the others.

    MF: p_k h_k² / (σ² + Σ_{j≠k} p_j h_j² ρ_kj²); DE: p_k h_k² / (σ² [(SᵀS)^{-1}]_kk);
    MMSE: p_k h_k² s_kᵀ(Σ_{j≠k} p_j h_j² s_j s_jᵀ + σ²I)^{-1} s_k.
    """
    p = net.powers.astype(float)
    return float(p[k]) * _user_effective_gain(net, rx, k, p)


# ---------------------------------------------------------------------------
# Best response
# ---------------------------------------------------------------------------

def interference_function(
    net: NetworkRealization,
    rx: ReceiverKind,
    powers: np.ndarray | None = None,
) -> np.ndarray:
    """T(p)_k = min(γ̃*_k / c_k(p), p_max): every user's best response at once."""
    p = net.powers if powers is None else np.asarray(powers, dtype=float)
    return np.minimum(net.targets / effective_gains(net, rx, p), net.p_max)


def best_response_step(net: NetworkRealization, rx: ReceiverKind, k: int) -> float:
    """Power that puts user k exactly on γ̃*_k with everyone else frozen, capped at p_max.

    A user at zero power has no measurable SIR and restarts from the
    zero-interference power.
    """
    p_k = float(net.powers[k])
    if p_k == 0:
        return float(min(net.noise_power * net.targets[k] / net.gains[k] ** 2, net.p_max))
    gamma_k = sir(net, rx, k)
    return float(min(p_k * net.targets[k] / gamma_k, net.p_max))


def _write_trace(writer, iteration: int, powers: np.ndarray, sirs: np.ndarray) -> None:
    for k, (p, g) in enumerate(zip(powers, sirs)):
        writer.writerow([iteration, k, repr(float(p)), repr(float(g))])


def find_equilibrium(
    net: NetworkRealization,
    rx: ReceiverKind,
    tol: float = 1e-10,
    max_iters: int = 10_000,
    *,
    trace_path: Path | None = None,
) -> EquilibriumTrace:
    """Synchronous best-response sweeps to the unique Nash equilibrium.

    Stops once max_k |Δp_k|/p_k <= tol. ``iterations`` counts the sweeps that
    moved the powers by more than ``tol``. On success the realization's
    powers are set to the equilibrium.
    """
    powers = net.powers.astype(float).copy()
    changes: list[float] = []
    trace_file = open(trace_path, "w", newline="") if trace_path is not None else None
    writer = csv.writer(trace_file) if trace_file is not None else None
    if writer is not None:
        writer.writerow(["iter", "user", "power", "sir"])
        _write_trace(writer, 0, powers, sir_all(net, rx, powers))

    try:
        converged = False
        for iteration in range(1, max_iters + 1):
            updated = interference_function(net, rx, powers)
            zero = powers == 0
            updated[zero] = np.minimum(
                net.noise_power * net.targets[zero] / net.gains[zero] ** 2, net.p_max,
            )
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = np.where(zero, np.where(updated == 0, 0.0, np.inf), np.abs(updated - powers) / powers)
            change = float(rel.max())
            if change <= tol:
                converged = True
                break
            changes.append(change)
            powers = updated
            if writer is not None:
                _write_trace(writer, iteration, powers, sir_all(net, rx, powers))
    finally:
        if trace_file is not None:
            trace_file.close()

    sirs = sir_all(net, rx, powers)
    capped = tuple(int(k) for k in np.flatnonzero(powers >= net.p_max))
    trace = EquilibriumTrace(
        iterations=len(changes),
        changes=changes,
        sirs=sirs,
        powers=powers,
        converged=converged,
        capped=capped,
    )
    if not converged:
        raise ConvergenceError(
            f"best response did not converge in {max_iters} sweeps "
            f"(last change {changes[-1]:.3g})",
            trace,
        )
    logger.debug(
        "%s equilibrium after %d sweep(s), %d capped user(s)", rx.label, trace.iterations, len(capped),
    )
    net.powers = powers.copy()
    return trace


# ---------------------------------------------------------------------------
# Nash verification
# ---------------------------------------------------------------------------

def _user_utility(
    net: NetworkRealization,
    k: int,
    gamma: float,
    power: float,
    sir_rtol: float,
) -> float:
    params = net.params
    return constrained_utility(
        params, params.efficiency_model, net.delay_class(k), gamma, power, sir_rtol=sir_rtol,
    )


def user_utilities(net: NetworkRealization, rx: ReceiverKind, *, sir_rtol: float = 1e-9) -> np.ndarray:
    """Delay-constrained utility of every user at the current powers."""
    sirs = sir_all(net, rx)
    return np.array([
        _user_utility(net, k, float(sirs[k]), float(net.powers[k]), sir_rtol)
        for k in range(net.num_users)
    ])


def verify_nash(
    net: NetworkRealization,
    rx: ReceiverKind,
    k: int,
    perturbations: Sequence[float] = DEFAULT_PERTURBATIONS,
    *,
    rtol: float = 1e-9,
    effective: np.ndarray | None = None,
) -> bool:
    """True when no unilateral power change by user k raises its constrained utility.

    Deviations are clipped to the strategy set [0, p_max]. ``rtol`` applies
    both to the utility comparison and to the γ ≥ γ̃ test at the equilibrium
    point, whose SIR comes out of an iterative solve.

    User k's SIR is p_k·c_k with c_k fixed by the other users' powers, so one
    ``effective_gains`` evaluation covers every deviation. Pass ``effective``
    to reuse it across users at the same power profile.
    """
    if effective is None:
        effective = effective_gains(net, rx)
    c_k = float(effective[k])
    base_power = float(net.powers[k])
    base = _user_utility(net, k, base_power * c_k, base_power, rtol)
    for delta in perturbations:
        power = min(base_power * delta, net.p_max)
        # Deviations are judged against the strict threshold.
        deviated = _user_utility(net, k, power * c_k, power, 0.0)
        if deviated > base * (1.0 + rtol):
            logger.debug("user %d improves from %.6g to %.6g with factor %g", k, base, deviated, delta)
            return False
    return True


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

@dataclass
class TrialOutcome:
    trial: int
    utilities: np.ndarray | None = None
    iterations: int = 0
    nash_checked: int = 0
    nash_passed: int = 0
    censored: str | None = None


@dataclass
class ClassSummary:
    index: int
    name: str
    users: int
    alpha: float
    mean: float
    std: float
    predicted: float
    gap: float


@dataclass
class MonteCarloResult:
    receiver: ReceiverKind
    trials: int
    classes: list[ClassSummary]
    censored: dict[int, str] = field(default_factory=dict)
    trial_means: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))
    nash_checked: int = 0
    nash_passed: int = 0
    iterations: list[int] = field(default_factory=list)

    @property
    def censored_fraction(self) -> float:
        return len(self.censored) / self.trials if self.trials else 0.0

    @property
    def nash_pass_rate(self) -> float:
        return self.nash_passed / self.nash_checked if self.nash_checked else 1.0

    @property
    def max_gap(self) -> float:
        gaps = [c.gap for c in self.classes if math.isfinite(c.gap)]
        return max(gaps) if gaps else math.nan

    def trial_gaps(self, class_index: int) -> np.ndarray:
        """Per-trial relative gap between the class mean and the large-system value."""
        summary = next(c for c in self.classes if c.index == class_index)
        return np.abs(self.trial_means[:, class_index] - summary.predicted) / summary.predicted


def _class_indices(counts: Sequence[int]) -> list[int]:
    return [c for c, count in enumerate(counts) for _ in range(count)]


def _run_trial(
    params: SystemParams,
    classes: tuple[DelayClass, ...],
    counts: tuple[int, ...],
    rx: ReceiverKind,
    seed: int,
    trial: int,
    tol: float,
    max_iters: int,
    check_nash: bool,
) -> TrialOutcome:
    net = generate_network(params, classes, _class_indices(counts), seed, trial=trial)
    if rx is ReceiverKind.MF and not mf_admission_check(net.targets, net.processing_gain).feasible:
        return TrialOutcome(trial, censored="admission")
    try:
        trace = find_equilibrium(net, rx, tol=tol, max_iters=max_iters)
    except ReceiverInapplicableError:
        return TrialOutcome(trial, censored="admission")
    except ConvergenceError:
        return TrialOutcome(trial, censored="no-convergence")

    rtol = max(tol * 10, 1e-9)
    if np.any(trace.sirs < net.thresholds * (1.0 - rtol)):
        return TrialOutcome(trial, iterations=trace.iterations, censored="below-target")

    outcome = TrialOutcome(trial, utilities=user_utilities(net, rx, sir_rtol=rtol), iterations=trace.iterations)
    if check_nash:
        effective = effective_gains(net, rx)
        for k in range(net.num_users):
            outcome.nash_checked += 1
            outcome.nash_passed += verify_nash(net, rx, k, rtol=rtol, effective=effective)
    return outcome


def monte_carlo_utilities(
    params: SystemParams,
    classes: Sequence[DelayClass],
    counts: Sequence[int],
    rx: ReceiverKind,
    trials: int,
    seed: int,
    *,
    tol: float = 1e-10,
    max_iters: int = 10_000,
    check_nash: bool = True,
    workers: int = 1,
) -> MonteCarloResult:
    """Average equilibrium utilities per class over independent realizations.

    Trials that fail admission, miss a delay threshold at p_max or do not
    converge are censored: counted and reported, never averaged. Classes are
    reported at α⁽ᶜ⁾ = K⁽ᶜ⁾/N; the large-system prediction for a class is
    evaluated at the load its users see, which leaves the user itself out.
    Both loads agree as N grows, and K = 1 reproduces the single-user value.
    """
    classes = tuple(classes)
    counts = tuple(int(c) for c in counts)
    if len(counts) != len(classes) or any(c < 0 for c in counts) or sum(counts) < 1:
        raise DomainError(f"counts {counts} must give a nonnegative user count per class, K >= 1")
    if trials < 1:
        raise DomainError(f"trials must be positive, got {trials}")

    args = [(params, classes, counts, rx, seed, t, tol, max_iters, check_nash) for t in range(trials)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_trial, *zip(*args)))
    else:
        outcomes = [_run_trial(*a) for a in args]
    outcomes.sort(key=lambda o: o.trial)

    censored = {o.trial: o.censored for o in outcomes if o.censored}
    if censored:
        logger.warning("%s: %d of %d trial(s) censored", rx.label, len(censored), trials)

    indices = np.array(_class_indices(counts))
    kept = [o for o in outcomes if o.censored is None]
    trial_means = np.full((len(kept), len(classes)), np.nan)
    for row, o in enumerate(kept):
        for c in range(len(classes)):
            if counts[c]:
                trial_means[row, c] = o.utilities[indices == c].mean()

    n = params.processing_gain
    summaries = []
    for c, cls in enumerate(classes):
        if counts[c] == 0:
            continue
        # a user sees K⁽ᶜ⁾ − 1 interferers of its own class
        seen = LoadProfile(classes, tuple((count - (j == c)) / n for j, count in enumerate(counts)))
        try:
            predicted = large_system.equilibrium_utility(params, seen, rx, c, h=params.gain_model.amplitude())
        except ValueError:
            predicted = math.nan
        per_user = np.concatenate([o.utilities[indices == c] for o in kept]) if kept else np.array([])
        mean = float(per_user.mean()) if per_user.size else math.nan
        std = float(per_user.std()) if per_user.size else math.nan
        gap = abs(mean - predicted) / predicted if math.isfinite(predicted) and predicted > 0 else math.nan
        summaries.append(ClassSummary(c, cls.name or f"class{c}", counts[c], counts[c] / n, mean, std, predicted, gap))

    return MonteCarloResult(
        receiver=rx,
        trials=trials,
        classes=summaries,
        censored=censored,
        trial_means=trial_means,
        nash_checked=sum(o.nash_checked for o in outcomes),
        nash_passed=sum(o.nash_passed for o in outcomes),
        iterations=[o.iterations for o in kept],
    )
