"""Tests for dcpower.netsim: realizations, receiver SIRs, best response and Monte Carlo."""

from __future__ import annotations

import csv
from unittest.mock import patch

import numpy as np
import pytest

from dcpower.config import load_config
from dcpower.errors import ConvergenceError, DomainError, ReceiverInapplicableError
from dcpower.game_core import constrained_utility, efficiency
from dcpower.models import GainModel, NetworkRealization, ReceiverKind, SystemParams
from dcpower.netsim import (
    best_response_step,
    effective_gains,
    find_equilibrium,
    generate_network,
    interference_function,
    monte_carlo_utilities,
    sir,
    sir_all,
    user_rng,
    user_utilities,
    verify_nash,
    zero_interference_powers,
)

MF, DE, MMSE = ReceiverKind.MF, ReceiverKind.DE, ReceiverKind.MMSE


@pytest.fixture
def net(params, class_a, class_b):
    """N = 100 with 2 class-A and 6 class-B users."""
    return generate_network(params, (class_a, class_b), [0] * 2 + [1] * 6, seed=7)


def _random_powers(net, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(1e-15, 5e-14, net.num_users)


def _fixed_network(params, classes, class_indices, sequences, powers=None):
    """A realization with hand-picked unit-norm sequences (columns) and unit gains."""
    sequences = np.asarray(sequences, dtype=float)
    k_users = sequences.shape[1]
    net = NetworkRealization(
        params=params,
        classes=tuple(classes),
        class_indices=np.asarray(class_indices),
        sequences=sequences,
        gains=np.ones(k_users),
        powers=np.zeros(k_users),
        seed=0,
    )
    net.powers = zero_interference_powers(net) if powers is None else np.asarray(powers, dtype=float)
    return net


# ---------------------------------------------------------------------------
# Realizations
# ---------------------------------------------------------------------------

class TestGenerateNetwork:
    def test_chips_are_normalized_signs(self, net):
        n = net.processing_gain
        assert np.allclose(np.abs(net.sequences), 1 / np.sqrt(n))
        assert np.allclose(np.diag(net.correlation), 1.0)

    def test_same_seed_same_network(self, params, class_b):
        first = generate_network(params, (class_b,), [0] * 5, seed=3, trial=2)
        second = generate_network(params, (class_b,), [0] * 5, seed=3, trial=2)
        assert np.array_equal(first.sequences, second.sequences)

    def test_sequences_do_not_depend_on_user_count(self, params, class_b):
        small = generate_network(params, (class_b,), [0] * 3, seed=11)
        large = generate_network(params, (class_b,), [0] * 8, seed=11)
        assert np.array_equal(small.sequences, large.sequences[:, :3])

    def test_trials_differ(self, params, class_b):
        first = generate_network(params, (class_b,), [0] * 4, seed=1, trial=0)
        second = generate_network(params, (class_b,), [0] * 4, seed=1, trial=1)
        assert not np.array_equal(first.sequences, second.sequences)

    def test_user_rng_is_keyed(self):
        a = user_rng(5, 1, 2).integers(0, 1 << 30, size=4)
        b = user_rng(5, 1, 2).integers(0, 1 << 30, size=4)
        c = user_rng(5, 1, 3).integers(0, 1 << 30, size=4)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_starts_at_zero_interference_power(self, net):
        expected = net.noise_power * net.targets / net.gains**2
        assert np.allclose(net.powers, expected)
        assert np.allclose(zero_interference_powers(net), expected)

    def test_path_loss_gains(self, class_b):
        params = SystemParams(gain_model=GainModel("path_loss", kappa=0.1, distance=100.0))
        net = generate_network(params, (class_b,), [0, 0], seed=0, distances=[50.0, 200.0])
        assert net.gains == pytest.approx([np.sqrt(0.1) / 50**2, np.sqrt(0.1) / 200**2])

    def test_initial_powers_validated(self, params, class_b):
        with pytest.raises(DomainError):
            generate_network(params, (class_b,), [0, 0], seed=0, initial_powers=[1e-14])
        with pytest.raises(DomainError):
            generate_network(params, (class_b,), [0, 0], seed=0, initial_powers=[1e-14, 1.0])

    def test_bad_class_index(self, params, class_b):
        with pytest.raises(DomainError):
            generate_network(params, (class_b,), [0, 1], seed=0)
        with pytest.raises(DomainError):
            generate_network(params, (class_b,), [], seed=0)


# ---------------------------------------------------------------------------
# Receivers
# ---------------------------------------------------------------------------

class TestReceivers:
    def test_matched_filter_formula(self, net):
        p = _random_powers(net)
        s, h2, sigma2 = net.sequences, net.gains**2, net.noise_power
        for k in (0, 4, 7):
            rho2 = (s[:, k] @ s) ** 2
            interference = sum(p[j] * h2[j] * rho2[j] for j in range(net.num_users) if j != k)
            expected = p[k] * h2[k] / (sigma2 + interference)
            assert sir_all(net, MF, p)[k] == pytest.approx(expected, rel=1e-10)

    def test_decorrelator_formula(self, net):
        p = _random_powers(net)
        inv = np.linalg.inv(net.sequences.T @ net.sequences)
        expected = p * net.gains**2 / (net.noise_power * np.diag(inv))
        assert sir_all(net, DE, p) == pytest.approx(expected, rel=1e-9)

    def test_mmse_formula(self, net):
        p = _random_powers(net)
        s, h2, sigma2 = net.sequences, net.gains**2, net.noise_power
        for k in (0, 5):
            others = [j for j in range(net.num_users) if j != k]
            cov = (s[:, others] * (p[others] * h2[others])) @ s[:, others].T + sigma2 * np.eye(net.processing_gain)
            expected = p[k] * h2[k] * s[:, k] @ np.linalg.solve(cov, s[:, k])
            assert sir_all(net, MMSE, p)[k] == pytest.approx(expected, rel=1e-9)

    def test_orthogonal_sequences_have_no_interference(self, params, class_b):
        hadamard = np.array([[1, 1, 1, 1], [1, -1, 1, -1], [1, 1, -1, -1], [1, -1, -1, 1]]) / 2
        powers = np.array([1e-15, 4e-15, 2.5e-14])
        ortho = _fixed_network(params, (class_b,), [0, 0, 0], hadamard[:, :3], powers)
        expected = powers / ortho.noise_power
        for rx in ReceiverKind:
            assert sir_all(ortho, rx) == pytest.approx(expected, rel=1e-10)

    def test_matched_filter_against_receiver_output(self, params, class_b):
        s = np.array([[1.0, 0.6], [0.0, 0.8]])
        p = np.array([2e-15, 7e-15])
        pair = _fixed_network(params, (class_b,), [0, 0], s, p)
        sigma2 = pair.noise_power
        # average the despread output of user 0 over both users' symbols
        outputs = {}
        for b0 in (-1, 1):
            for b1 in (-1, 1):
                received = np.sqrt(p[0]) * b0 * s[:, 0] + np.sqrt(p[1]) * b1 * s[:, 1]
                outputs[b0, b1] = s[:, 0] @ received
        signal = np.sqrt(p[0]) * (s[:, 0] @ s[:, 0])
        interference = np.mean([(y - b0 * signal) ** 2 for (b0, _), y in outputs.items()])
        noise = sigma2 * (s[:, 0] @ s[:, 0])
        expected = signal**2 / (interference + noise)
        assert sir(pair, MF, 0) == pytest.approx(expected, rel=1e-12)
        assert expected == pytest.approx(p[0] / (sigma2 + p[1] * 0.36), rel=1e-12)

    @pytest.mark.parametrize("rx", [MF, DE, MMSE])
    def test_single_user_sir_matches_all_users(self, net, rx):
        p = _random_powers(net)
        net.powers = p
        everyone = sir_all(net, rx, p)
        for k in range(net.num_users):
            assert sir(net, rx, k) == pytest.approx(everyone[k], rel=1e-10)

    def test_mmse_beats_decorrelator_and_matched_filter(self, net):
        p = _random_powers(net)
        mmse = sir_all(net, MMSE, p)
        assert np.all(mmse >= sir_all(net, DE, p) * (1 - 1e-12))
        assert np.all(mmse >= sir_all(net, MF, p) * (1 - 1e-12))

    def test_single_user_receivers_agree(self, params, class_b):
        lone = generate_network(params, (class_b,), [0], seed=4)
        expected = lone.powers[0] * lone.gains[0] ** 2 / lone.noise_power
        for rx in ReceiverKind:
            assert sir(lone, rx, 0) == pytest.approx(expected, rel=1e-12)

    def test_sir_is_linear_in_own_power(self, net):
        p = _random_powers(net)
        scaled = p.copy()
        scaled[2] *= 3.0
        for rx in ReceiverKind:
            assert sir_all(net, rx, scaled)[2] == pytest.approx(3.0 * sir_all(net, rx, p)[2], rel=1e-10)

    def test_decorrelator_ignores_powers(self, net):
        first = effective_gains(net, DE, _random_powers(net, 1))
        second = effective_gains(net, DE, _random_powers(net, 2))
        assert np.array_equal(first, second)

    def test_decorrelator_needs_enough_dimensions(self, class_b):
        narrow = SystemParams(processing_gain=8)
        crowded = generate_network(narrow, (class_b,), [0] * 10, seed=0)
        with pytest.raises(ReceiverInapplicableError):
            sir_all(crowded, DE)


# ---------------------------------------------------------------------------
# Interference function
# ---------------------------------------------------------------------------

class TestInterferenceFunction:
    @pytest.mark.parametrize("rx", [MF, DE, MMSE])
    def test_positive(self, net, rx):
        assert np.all(interference_function(net, rx, _random_powers(net)) > 0)

    @pytest.mark.parametrize("rx", [MF, DE, MMSE])
    def test_monotone(self, net, rx):
        rng = np.random.default_rng(5)
        for _ in range(20):
            p = _random_powers(net, int(rng.integers(1 << 30)))
            bigger = p * rng.uniform(1.0, 2.0, p.size)
            assert np.all(interference_function(net, rx, p) <= interference_function(net, rx, bigger) * (1 + 1e-12))

    @pytest.mark.parametrize("rx", [MF, DE, MMSE])
    def test_scalable(self, net, rx):
        p = _random_powers(net)
        for a in (1.1, 1.5, 3.0):
            assert np.all(a * interference_function(net, rx, p) > interference_function(net, rx, a * p))

    def test_capped_at_p_max(self, class_b):
        tight = SystemParams(p_max=1e-15)
        capped = generate_network(tight, (class_b,), [0] * 4, seed=0)
        assert np.all(interference_function(capped, MF, np.full(4, 1e-15)) <= 1e-15)


# ---------------------------------------------------------------------------
# Best-response dynamics
# ---------------------------------------------------------------------------

class TestFindEquilibrium:
    @pytest.mark.parametrize("rx", [MF, DE, MMSE])
    def test_reaches_targets(self, net, rx):
        trace = find_equilibrium(net, rx)
        assert trace.converged
        assert trace.sirs == pytest.approx(net.targets, rel=1e-8)
        assert np.array_equal(net.powers, trace.powers)
        assert trace.capped == ()

    def test_best_response_is_fixed_at_equilibrium(self, net):
        find_equilibrium(net, MMSE)
        for k in range(net.num_users):
            assert best_response_step(net, MMSE, k) == pytest.approx(net.powers[k], rel=1e-8)

    def test_best_response_restarts_from_zero(self, net):
        net.powers[3] = 0.0
        expected = net.noise_power * net.targets[3] / net.gains[3] ** 2
        assert best_response_step(net, MF, 3) == pytest.approx(expected)

    def test_symmetric_matched_filter_pair(self, params, class_b):
        s = np.ones((8, 2)) / np.sqrt(8)
        s[:3, 1] *= -1
        rho = s[:, 0] @ s[:, 1]
        assert rho == pytest.approx(0.25)
        pair = _fixed_network(params, (class_b,), [0, 0], s)
        g = class_b.gamma_tilde_star
        sigma2 = pair.noise_power
        expected = sigma2 * g * (1 + g * rho**2) / (1 - g**2 * rho**4)
        trace = find_equilibrium(pair, MF)
        assert trace.powers == pytest.approx([expected, expected], rel=1e-8)

    @pytest.mark.parametrize("rx", [MF, MMSE])
    def test_powers_ramp_up_monotonically(self, net, rx, tmp_path):
        path = tmp_path / "ramp.csv"
        find_equilibrium(net, rx, trace_path=path)
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        sweeps = {}
        for row in rows:
            sweeps.setdefault(int(row["iter"]), []).append(float(row["power"]))
        history = np.array([sweeps[i] for i in sorted(sweeps)])
        assert len(history) > 2
        steps = np.diff(history, axis=0)
        assert np.all(steps >= 0)
        assert np.all(steps.sum(axis=1) > 0)

    def test_decorrelator_needs_one_sweep(self, net):
        assert find_equilibrium(net, DE).iterations == 1

    def test_matched_filter_needs_most_power(self, params, class_a, class_b):
        powers = {}
        for rx in ReceiverKind:
            fresh = generate_network(params, (class_a, class_b), [0] * 2 + [1] * 6, seed=7)
            powers[rx] = find_equilibrium(fresh, rx).powers
        assert np.all(powers[MMSE] <= powers[DE] * (1 + 1e-9))
        assert np.all(powers[DE] <= powers[MF] * (1 + 1e-9))

    def test_same_equilibrium_from_any_start(self, params, class_a, class_b):
        starts = (None, np.full(8, 1e-13), np.zeros(8))
        results = []
        for start in starts:
            fresh = generate_network(params, (class_a, class_b), [0] * 2 + [1] * 6, seed=7, initial_powers=start)
            results.append(find_equilibrium(fresh, MMSE).powers)
        for other in results[1:]:
            assert other == pytest.approx(results[0], rel=1e-8)

    def test_iteration_limit_raises_with_trace(self, net):
        with pytest.raises(ConvergenceError) as exc_info:
            find_equilibrium(net, MF, max_iters=2)
        assert exc_info.value.trace.iterations == 2
        assert not exc_info.value.trace.converged

    def test_changes_shrink(self, net):
        trace = find_equilibrium(net, MF)
        assert trace.changes[-1] < trace.changes[0]

    def test_overloaded_users_sit_at_cap(self, class_b):
        tight = SystemParams(processing_gain=16, p_max=1e-14)
        crowded = generate_network(tight, (class_b,), [0] * 10, seed=0)
        trace = find_equilibrium(crowded, MF)
        assert len(trace.capped) > 0
        assert np.all(trace.powers <= 1e-14)

    def test_trace_file(self, net, tmp_path):
        path = tmp_path / "trace.csv"
        trace = find_equilibrium(net, MMSE, trace_path=path)
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        assert rows[0] == ["iter", "user", "power", "sir"]
        assert len(rows) == 1 + net.num_users * (trace.iterations + 1)


# ---------------------------------------------------------------------------
# Utilities and Nash verification
# ---------------------------------------------------------------------------

class TestNash:
    def test_utilities_at_equilibrium(self, net, params, model):
        find_equilibrium(net, MMSE)
        utilities = user_utilities(net, MMSE)
        expected = params.goodput_factor * np.array(
            [efficiency(model, g) for g in net.targets]
        ) / net.powers
        assert utilities == pytest.approx(expected, rel=1e-6)

    @pytest.mark.parametrize("rx", [MF, DE, MMSE])
    def test_equilibrium_passes(self, net, rx):
        find_equilibrium(net, rx)
        assert all(verify_nash(net, rx, k) for k in range(net.num_users))

    def test_one_gain_evaluation_per_check(self, net):
        find_equilibrium(net, MMSE)
        with patch("dcpower.netsim.effective_gains", wraps=effective_gains) as spy:
            assert verify_nash(net, MMSE, 3)
        assert spy.call_count == 1

    def test_shared_effective_gains(self, net):
        find_equilibrium(net, MF)
        shared = effective_gains(net, MF)
        with patch("dcpower.netsim.effective_gains", wraps=effective_gains) as spy:
            assert all(verify_nash(net, MF, k, effective=shared) for k in range(net.num_users))
        assert spy.call_count == 0

    @pytest.mark.parametrize("rx", [MMSE, MF])
    def test_utility_shape_along_own_power(self, net, params, model, rx):
        find_equilibrium(net, rx)
        per_watt = effective_gains(net, rx)
        gammas = np.linspace(0.5, 20.0, 200)
        for k in (0, 2):
            cls = net.delay_class(k)
            utilities = np.array([
                constrained_utility(params, model, cls, g, g / per_watt[k]) for g in gammas
            ])
            peak = int(np.argmax(utilities))
            assert np.all(np.diff(utilities[: peak + 1]) >= 0)
            assert np.all(np.diff(utilities[peak:]) < 0)
            if cls.gamma_tilde > cls.gamma_tilde_star - 1e-12:
                # delay-bound class: zero until γ̃, then only decreasing
                assert peak == int(np.flatnonzero(gammas >= cls.gamma_tilde)[0])
                assert np.all(utilities[:peak] == 0)
            else:
                assert abs(gammas[peak] - cls.gamma_tilde_star) <= gammas[1] - gammas[0]

    def test_overpowered_user_fails(self, net):
        find_equilibrium(net, MMSE)
        net.powers[4] *= 2.0
        assert not verify_nash(net, MMSE, 4)

    def test_below_threshold_user_has_zero_utility(self, net):
        find_equilibrium(net, MF)
        net.powers[0] *= 0.5
        assert user_utilities(net, MF)[0] == 0.0


# ---------------------------------------------------------------------------
# Monte Carlo
# ---------------------------------------------------------------------------

class TestMonteCarlo:
    @pytest.mark.parametrize("rx", [DE, MMSE])
    def test_close_to_large_system(self, params, class_a, class_b, rx):
        result = monte_carlo_utilities(params, (class_a, class_b), (0, 10), rx, trials=200, seed=42)
        assert result.censored_fraction == 0.0
        assert len(result.classes) == 1
        summary = result.classes[0]
        assert summary.name == "B"
        assert summary.alpha == pytest.approx(0.1)
        assert summary.gap < 0.05

    @pytest.mark.parametrize("rx", [MF, DE, MMSE])
    def test_gap_shrinks_with_system_size(self, class_b, rx):
        medians = []
        for n in (50, 200):
            params = SystemParams(processing_gain=n)
            result = monte_carlo_utilities(params, (class_b,), (n // 10,), rx, trials=60, seed=1, check_nash=False)
            medians.append(float(np.median(result.trial_gaps(0))))
        assert medians[1] < medians[0]

    def test_matched_filter_within_its_band(self, params, class_a, class_b):
        result = monte_carlo_utilities(params, (class_a, class_b), (0, 10), MF, trials=200, seed=42, check_nash=False)
        summary = result.classes[0]
        assert summary.mean < summary.predicted
        assert summary.gap < load_config().scenario.band_for(MF)

    def test_receiver_ordering_in_expectation(self, params, class_a, class_b):
        means = {}
        for rx in ReceiverKind:
            result = monte_carlo_utilities(params, (class_a, class_b), (0, 10), rx, trials=100, seed=8, check_nash=False)
            means[rx] = result.classes[0].mean
        assert means[MMSE] >= means[DE] >= means[MF]

    def test_nash_holds_across_trials(self, params, class_a, class_b):
        for rx in ReceiverKind:
            result = monte_carlo_utilities(params, (class_a, class_b), (2, 4), rx, trials=50, seed=9)
            assert result.censored_fraction == 0.0
            assert result.nash_checked == 300
            assert result.nash_pass_rate == 1.0

    @pytest.mark.parametrize("rx", list(ReceiverKind))
    def test_single_user_matches_closed_form(self, params, class_b, rx):
        result = monte_carlo_utilities(params, (class_b,), (1,), rx, trials=4, seed=5)
        (summary,) = result.classes
        assert summary.std < 1e-12 * summary.mean
        assert summary.gap < 1e-10
        assert summary.alpha == pytest.approx(0.01)
        assert result.max_gap == summary.gap

    def test_admission_failures_are_censored(self, class_b):
        narrow = SystemParams(processing_gain=16)
        result = monte_carlo_utilities(narrow, (class_b,), (10,), MF, trials=5, seed=0)
        assert result.censored == {t: "admission" for t in range(5)}
        assert result.censored_fraction == 1.0
        assert np.isnan(result.classes[0].mean)

    def test_decorrelator_overload_is_censored(self, class_b):
        narrow = SystemParams(processing_gain=8)
        result = monte_carlo_utilities(narrow, (class_b,), (10,), DE, trials=3, seed=0)
        assert set(result.censored.values()) == {"admission"}

    def test_deterministic_for_seed(self, class_b):
        small = SystemParams(processing_gain=32)
        first = monte_carlo_utilities(small, (class_b,), (4,), MMSE, trials=5, seed=3, check_nash=False)
        second = monte_carlo_utilities(small, (class_b,), (4,), MMSE, trials=5, seed=3, check_nash=False)
        assert np.array_equal(first.trial_means, second.trial_means)

    def test_parallel_matches_serial(self, class_b):
        small = SystemParams(processing_gain=32)
        serial = monte_carlo_utilities(small, (class_b,), (4,), MMSE, trials=4, seed=3, check_nash=False)
        parallel = monte_carlo_utilities(
            small, (class_b,), (4,), MMSE, trials=4, seed=3, check_nash=False, workers=2,
        )
        assert np.array_equal(serial.trial_means, parallel.trial_means)

    def test_needs_users(self, params, class_b):
        with pytest.raises(DomainError):
            monte_carlo_utilities(params, (class_b,), (0,), MF, trials=1, seed=0)
        with pytest.raises(DomainError):
            monte_carlo_utilities(params, (class_b,), (2,), MF, trials=0, seed=0)
