"""Experiment orchestration behind the CLI subcommands.

Each ``run_*`` function turns an :class:`ExperimentConfig` into one or more
:class:`ResultTable` objects; writing them is left to the caller.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import large_system, netsim
from .config import ExperimentConfig
from .errors import ConfigError, InfeasibleLoadError, ReceiverInapplicableError
from .game_core import (
    efficiency,
    mf_admission_check,
    solve_gamma_star,
    stationarity_residual,
    target_sir,
    to_db,
)
from .models import LoadProfile, ReceiverKind
from .output import ResultTable, build_metadata

logger = logging.getLogger(__name__)


def _table(cfg: ExperimentConfig, name: str, columns: list[str], **extra) -> ResultTable:
    return ResultTable(name, columns, metadata=build_metadata(cfg.config_hash, cfg.scenario.seed, **extra))


# ---------------------------------------------------------------------------
# γ*
# ---------------------------------------------------------------------------

def run_gamma_star(cfg: ExperimentConfig) -> ResultTable:
    model = cfg.system.efficiency_model
    gamma_star = solve_gamma_star(model)
    table = _table(
        cfg, "gamma_star",
        ["packet_bits", "gamma_star", "gamma_star_db", "efficiency", "residual"],
    )
    table.add_row(
        model.packet_bits,
        gamma_star,
        to_db(gamma_star),
        efficiency(model, gamma_star),
        abs(stationarity_residual(model, gamma_star)),
    )
    return table


# ---------------------------------------------------------------------------
# Target SIR against the delay requirement
# ---------------------------------------------------------------------------

def run_fig1(cfg: ExperimentConfig) -> ResultTable:
    """γ̃* over the (D, β) grid, in linear units and dB."""
    model = cfg.system.efficiency_model
    gamma_star = solve_gamma_star(model)
    table = _table(
        cfg, "fig1",
        ["D", "beta", "eta", "gamma_tilde", "gamma_tilde_star", "gamma_tilde_star_db", "floored"],
    )
    for d in cfg.scenario.delays:
        for beta in cfg.scenario.beta_grid.values():
            cls = target_sir(d, float(beta), model, gamma_star=gamma_star)
            table.add_row(
                d,
                cls.beta,
                cls.eta,
                cls.gamma_tilde,
                cls.gamma_tilde_star,
                to_db(cls.gamma_tilde_star),
                cls.gamma_tilde <= gamma_star,
            )
    return table


# ---------------------------------------------------------------------------
# Utility loss against the class split
# ---------------------------------------------------------------------------

def run_fig23(cfg: ExperimentConfig, receivers: Sequence[ReceiverKind] | None = None) -> list[ResultTable]:
    """u⁽ᶜ⁾/u over the split α_A/α at each total α, one table per receiver.

    The first class is the swept one. Infeasible points are ``None``; a class
    with no users at a point is ``nan``.
    """
    if len(cfg.classes) != 2:
        raise ConfigError(f"fig23 sweeps a two-class split, got {len(cfg.classes)} classes")
    params = cfg.system
    classes = cfg.delay_classes()
    gamma_star = solve_gamma_star(params.efficiency_model)
    h = params.gain_model.amplitude()
    names = [c.name for c in cfg.classes]
    columns = ["total_alpha", "split", "feasible", "margin", "utility_unconstrained"]
    columns += [f"ratio_{n}" for n in names] + [f"utility_{n}" for n in names]

    tables = []
    for rx in receivers or cfg.scenario.receivers:
        table = _table(cfg, f"fig23_{rx.value}", columns, receiver=rx.value)
        for total in cfg.scenario.total_alphas:
            try:
                baseline = large_system.unconstrained_utility(params, total, rx, gamma_star, h)
            except InfeasibleLoadError:
                baseline = None
            for split in cfg.scenario.split_grid.values():
                load = LoadProfile.from_mix(classes, total, (float(split), 1.0 - float(split)))
                feasible, margin = large_system.feasibility(load, rx)
                if baseline is None or not feasible:
                    table.add_row(total, float(split), False, margin, baseline, *([None] * 4))
                    continue
                ratios, utilities = [], []
                for c, alpha in enumerate(load.alphas):
                    if alpha == 0:
                        ratios.append(math.nan)
                        utilities.append(math.nan)
                        continue
                    u = large_system.equilibrium_utility(params, load, rx, c, h)
                    utilities.append(u)
                    ratios.append(u / baseline)
                table.add_row(total, float(split), True, margin, baseline, *ratios, *utilities)
        if all(row[2] is False for row in table.rows):
            logger.info("%s is infeasible at every point of the fig23 sweep", rx.label)
        tables.append(table)
    return tables


# ---------------------------------------------------------------------------
# Capacity
# ---------------------------------------------------------------------------

def _mix(cfg: ExperimentConfig) -> tuple[tuple[int, ...], list[float]]:
    counts = cfg.class_counts()
    total = sum(counts)
    if total < 1:
        raise ConfigError("'scenario.counts' must give at least one user")
    return counts, [c / total for c in counts]


def run_capacity(cfg: ExperimentConfig, receivers: Sequence[ReceiverKind] | None = None) -> ResultTable:
    """Largest supportable α per receiver for the configured class mix.

    The matched-filter row also carries the finite-system admission sum
    Σ1/(1 + N/γ̃*_k) for the configured K and N.
    """
    classes = cfg.delay_classes()
    counts, fractions = _mix(cfg)
    gamma_star = solve_gamma_star(cfg.system.efficiency_model)
    baseline = large_system.unconstrained_load(LoadProfile(classes, fractions), gamma_star).classes
    n = cfg.system.processing_gain
    alpha = sum(counts) / n

    table = _table(
        cfg, "capacity",
        ["receiver", "alpha", "alpha_max", "alpha_max_unconstrained", "capacity_ratio",
         "feasible", "admission_sum"],
    )
    for rx in receivers or cfg.scenario.receivers:
        alpha_max = large_system.capacity(classes, fractions, rx)
        alpha_loose = large_system.capacity(baseline, fractions, rx)
        admission = math.nan
        if rx is ReceiverKind.MF:
            targets = [classes[c].gamma_tilde_star for c, count in enumerate(counts) for _ in range(count)]
            admission = 1.0 - mf_admission_check(targets, n).margin
        table.add_row(
            rx.value, alpha, alpha_max, alpha_loose, alpha_max / alpha_loose, alpha < alpha_max, admission,
        )
    return table


# ---------------------------------------------------------------------------
# Finite-system validation
# ---------------------------------------------------------------------------

@dataclass
class ValidationReport:
    table: ResultTable
    results: list[netsim.MonteCarloResult] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures


def run_validate(cfg: ExperimentConfig, receivers: Sequence[ReceiverKind] | None = None) -> ValidationReport:
    """Monte Carlo equilibria against the large-system prediction.

    A receiver fails when a class gap exceeds its band, when more than
    ``censor_limit`` of the trials are censored, or when any user can
    improve by a unilateral deviation.
    """
    scenario = cfg.scenario
    classes = cfg.delay_classes()
    counts = cfg.class_counts()
    if sum(counts) < 1:
        raise ConfigError("'scenario.counts' must give at least one user")

    table = _table(
        cfg, "validate",
        ["receiver", "class", "users", "alpha", "mc_mean", "mc_std", "predicted", "gap", "band",
         "within_band", "nash_pass_rate", "censored_fraction", "mean_iterations", "max_iterations"],
        trials=scenario.trials,
    )
    report = ValidationReport(table)
    for rx in receivers or scenario.receivers:
        result = netsim.monte_carlo_utilities(
            cfg.system, classes, counts, rx, scenario.trials, scenario.seed,
            tol=scenario.tolerance, max_iters=scenario.max_iters, workers=scenario.workers,
        )
        report.results.append(result)
        band = scenario.band_for(rx)
        logger.info("%s: largest class gap %.4g against band %.4g", rx.label, result.max_gap, band)
        iters = np.array(result.iterations) if result.iterations else np.array([0])
        for cls in result.classes:
            within = math.isfinite(cls.gap) and cls.gap <= band
            table.add_row(
                rx.value, cls.name, cls.users, cls.alpha, cls.mean, cls.std, cls.predicted, cls.gap, band,
                within, result.nash_pass_rate, result.censored_fraction,
                float(iters.mean()), int(iters.max()),
            )
            if not within:
                report.failures.append(
                    f"{rx.value}: class {cls.name} gap {cls.gap:.4g} exceeds band {band:.4g}"
                )
        if result.censored_fraction > scenario.censor_limit:
            report.failures.append(
                f"{rx.value}: {result.censored_fraction:.1%} of trials censored "
                f"(limit {scenario.censor_limit:.1%})"
            )
        if result.nash_pass_rate < 1.0:
            report.failures.append(
                f"{rx.value}: {result.nash_checked - result.nash_passed} of "
                f"{result.nash_checked} Nash checks failed"
            )
    for failure in report.failures:
        logger.warning("Validation failure: %s", failure)
    return report


# ---------------------------------------------------------------------------
# Single realization
# ---------------------------------------------------------------------------

def run_simulate(
    cfg: ExperimentConfig,
    receivers: Sequence[ReceiverKind] | None = None,
    *,
    trace_dir: Path | None = None,
) -> list[ResultTable]:
    """One seeded realization solved for each receiver, reported per user.

    Receivers that cannot run on this realization (decorrelator with K > N
    or a singular correlation matrix) are skipped with a warning. With
    ``trace_dir`` every sweep is dumped to ``trace_<receiver>.csv``.
    """
    classes = cfg.delay_classes()
    counts = cfg.class_counts()
    if sum(counts) < 1:
        raise ConfigError("'scenario.counts' must give at least one user")
    indices = [c for c, count in enumerate(counts) for _ in range(count)]
    seed = cfg.scenario.seed

    tables = []
    for rx in receivers or cfg.scenario.receivers:
        net = netsim.generate_network(cfg.system, classes, indices, seed)
        trace_path = trace_dir / f"trace_{rx.value}.csv" if trace_dir is not None else None
        try:
            trace = netsim.find_equilibrium(
                net, rx, tol=cfg.scenario.tolerance, max_iters=cfg.scenario.max_iters, trace_path=trace_path,
            )
        except ReceiverInapplicableError as exc:
            logger.warning("Skipping %s: %s", rx.label, exc)
            continue

        utilities = netsim.user_utilities(net, rx)
        table = _table(
            cfg, f"simulate_{rx.value}",
            ["user", "class", "gain", "power", "sir", "sir_db", "target", "utility", "capped"],
            receiver=rx.value, iterations=trace.iterations,
        )
        for k in range(net.num_users):
            table.add_row(
                k,
                net.delay_class(k).name,
                float(net.gains[k]),
                float(net.powers[k]),
                float(trace.sirs[k]),
                to_db(float(trace.sirs[k])),
                float(net.targets[k]),
                float(utilities[k]),
                k in trace.capped,
            )
        tables.append(table)
    return tables
