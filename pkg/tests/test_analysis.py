import math

import numpy as np
import pytest
from scipy import linalg

from qsched.analysis import (
    elo_ratings,
    expected_score,
    frechet_distance,
    frechet_from_moments,
    frechet_table,
    frechet_vs_gmm,
    measure_error,
    moments,
    propagate_error,
    propagation_weights,
    sampler_coeffs,
    stochasticity_sweep,
    trace_sqrt_product,
)
from qsched.denoiser import CorruptedDenoiser
from qsched.errors import ComparabilityError, ValidationError
from qsched.model import PreconditionCoeffs, PtqdParams
from qsched.sampler import SamplerConfig, sample_trajectory
from qsched.schedule import TimestepGrid, few_step_grid
from qsched.streams import keyed_generator

from .conftest import load_golden


def run(schedule, denoiser, kind="tcd", eta=0.0, coeffs=PreconditionCoeffs(), seed=0,
        batch=16, ptqd=None, record=True, steps=4):
    config = SamplerConfig(
        kind=kind, grid=few_step_grid(schedule, steps), eta=eta,
        coeffs=coeffs, ptqd=ptqd, seed=seed,
    )
    return sample_trajectory(config, denoiser, schedule, batch, record=record)[1]


def test_sampler_coefficients(schedule):
    coeffs = sampler_coeffs(schedule, few_step_grid(schedule, 4), 0.3)
    assert coeffs.transitions == [(999, 524, 749), (749, 349, 499), (499, 174, 249), (249, 0, 0)]
    a, sg = schedule.alphas, schedule.sigmas
    assert coeffs.k[1] == pytest.approx(a[499] / a[749], rel=1e-14)
    assert coeffs.m[1] == pytest.approx(
        a[499] * (sg[749] / a[749] - sg[349] / a[349]), rel=1e-14
    )
    assert np.all(coeffs.k > 0) and np.all(coeffs.m > 0)


@pytest.mark.parametrize("eta", ["0.0", "0.3"])
def test_eight_step_coefficient_table(schedule, eta):
    table = load_golden("schedule")["coefficients_8_steps"][eta]
    coeffs = sampler_coeffs(schedule, few_step_grid(schedule, 8), float(eta))
    assert coeffs.transitions == [tuple(step) for step in table["transitions"]]
    np.testing.assert_allclose(coeffs.k, table["k"], rtol=1e-11)
    np.testing.assert_allclose(coeffs.m, table["m"], rtol=1e-11)


def test_coefficients_are_positive_everywhere(schedule):
    for n_steps in range(1, 9):
        grid = few_step_grid(schedule, n_steps)
        for eta in np.round(np.arange(0.0, 0.95, 0.1), 1):
            coeffs = sampler_coeffs(schedule, grid, float(eta))
            assert np.all(coeffs.k > 0) and np.all(coeffs.m > 0)


def test_propagation_weights(schedule):
    coeffs = sampler_coeffs(schedule, TimestepGrid((999, 500, 0)), 0.0)
    np.testing.assert_allclose(
        propagation_weights(coeffs), [coeffs.m[0] * coeffs.k[1], coeffs.m[1]], rtol=1e-15
    )


def test_propagate_error(schedule):
    single = sampler_coeffs(schedule, TimestepGrid((400, 0)), 0.0)
    delta = np.array([[0.1, -0.2]])
    np.testing.assert_allclose(propagate_error(single, [delta]), single.m[0] * delta)

    coeffs = sampler_coeffs(schedule, few_step_grid(schedule, 4), 0.0)
    zeros = [np.zeros((3, 2))] * 4
    assert np.array_equal(propagate_error(coeffs, zeros), np.zeros((3, 2)))

    rng = keyed_generator(0, "delta")
    first = [rng.standard_normal((3, 2)) for _ in range(4)]
    second = [rng.standard_normal((3, 2)) for _ in range(4)]
    combined = [2.0 * a - 0.5 * b for a, b in zip(first, second)]
    np.testing.assert_allclose(
        propagate_error(coeffs, combined),
        2.0 * propagate_error(coeffs, first) - 0.5 * propagate_error(coeffs, second),
        rtol=1e-12, atol=1e-12,
    )
    with pytest.raises(ValidationError):
        propagate_error(coeffs, first[:3])


def test_identical_runs_have_no_error(schedule, exact):
    fp = run(schedule, exact, eta=0.3)
    report = measure_error(fp, fp, sampler_coeffs(schedule, few_step_grid(schedule, 4), 0.3))
    assert report.relative_residual == 0.0
    assert report.mean_error_norm == 0.0
    assert not np.any(report.closed_form)


@pytest.mark.parametrize("eta", [0.0, 0.3])
@pytest.mark.parametrize("steps, gamma, delta_std", [
    (1, -0.2, 0.0), (2, 0.05, 0.1), (4, 0.05, 0.1), (8, 0.2, 0.3),
])
def test_error_recursion_is_exact(schedule, exact, eta, steps, gamma, delta_std):
    corrupted = CorruptedDenoiser(exact, gamma, [0.02, -0.01], delta_std, seed=3)
    fp = run(schedule, exact, eta=eta, steps=steps)
    q = run(schedule, corrupted, eta=eta, steps=steps)
    report = measure_error(
        fp, q, sampler_coeffs(schedule, few_step_grid(schedule, steps), eta)
    )

    assert len(report.delta_x) == steps
    assert report.relative_residual <= 1e-9
    assert report.mean_error_norm > 0.0
    assert report.error_norm_bound >= report.mean_error_norm * (1 - 1e-9)
    np.testing.assert_allclose(report.closed_form, report.final, atol=1e-9)
    assert len(report.to_dict()["delta_x_norms"]) == steps


def test_error_recursion_over_random_corruptions(schedule, exact):
    rng = keyed_generator(11, "recursion-configs")
    for case in range(50):
        gamma = float(rng.uniform(-0.2, 0.2))
        delta_std = float(rng.uniform(0.0, 0.3))
        steps = int(rng.choice([1, 2, 4, 8]))
        eta = float(rng.choice([0.0, 0.3]))
        corrupted = CorruptedDenoiser(
            exact, gamma, rng.uniform(-0.05, 0.05, 2), delta_std, seed=case
        )
        fp = run(schedule, exact, eta=eta, steps=steps, seed=case)
        q = run(schedule, corrupted, eta=eta, steps=steps, seed=case)
        report = measure_error(
            fp, q, sampler_coeffs(schedule, few_step_grid(schedule, steps), eta)
        )
        assert report.relative_residual <= 1e-9, case
        np.testing.assert_allclose(report.closed_form, report.final, atol=1e-9)


def test_ptqd_runs_are_compared_without_injected_noise(schedule, exact):
    params = PtqdParams(gamma=0.05, delta_mean=(0.02, -0.01), delta_std=0.1)
    stochastic = sampler_coeffs(schedule, few_step_grid(schedule, 4), 0.3)
    with pytest.raises(ComparabilityError):
        measure_error(
            run(schedule, exact, eta=0.3),
            run(schedule, exact, kind="ptqd", eta=0.3, ptqd=params),
            stochastic,
        )

    corrupted = CorruptedDenoiser(exact, 0.1, [0.03, 0.0], 0.2, seed=5)
    report = measure_error(
        run(schedule, exact),
        run(schedule, corrupted, kind="ptqd", ptqd=params),
        sampler_coeffs(schedule, few_step_grid(schedule, 4), 0.0),
    )
    assert report.relative_residual <= 1e-9
    assert report.mean_error_norm > 0.0


def test_error_recursion_with_shared_scaling(schedule, exact):
    fp = run(schedule, exact, kind="qsched", eta=0.3,
             coeffs=PreconditionCoeffs(c_x=1.02, c_eps=1.0))
    q = run(schedule, exact, kind="qsched", eta=0.3,
            coeffs=PreconditionCoeffs(c_x=1.02, c_eps=0.97))
    report = measure_error(fp, q, sampler_coeffs(schedule, few_step_grid(schedule, 4), 0.3))
    assert report.relative_residual <= 1e-9


def test_runs_must_be_comparable(schedule, exact):
    coeffs = sampler_coeffs(schedule, few_step_grid(schedule, 4), 0.0)
    fp = run(schedule, exact)
    with pytest.raises(ComparabilityError):
        measure_error(fp, run(schedule, exact, seed=1), coeffs)
    with pytest.raises(ComparabilityError):
        measure_error(fp, run(schedule, exact, kind="lcm"), coeffs)
    with pytest.raises(ComparabilityError):
        measure_error(fp, run(schedule, exact, batch=8), coeffs)
    with pytest.raises(ComparabilityError):
        measure_error(fp, run(schedule, exact, kind="qsched",
                              coeffs=PreconditionCoeffs(c_x=1.01)), coeffs)
    with pytest.raises(ComparabilityError):
        measure_error(fp, fp, sampler_coeffs(schedule, few_step_grid(schedule, 2), 0.0))
    bare = run(schedule, exact, record=False)
    with pytest.raises(ComparabilityError):
        measure_error(bare, bare, coeffs)


def test_frechet_of_identical_samples():
    samples = keyed_generator(0, "fd").standard_normal((500, 3))
    assert frechet_distance(samples, samples) == pytest.approx(0.0, abs=1e-10)


def test_frechet_analytic_values():
    assert frechet_from_moments([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(1.0)
    value = frechet_from_moments(
        [0.0, 0.0], np.diag([1.0, 4.0]), [1.0, 0.0], np.diag([4.0, 9.0])
    )
    assert value == pytest.approx(1.0 + 2.0, rel=1e-12)


def random_spd(seed, d=3):
    a = keyed_generator(seed, "spd").standard_normal((d, d))
    return a @ a.T + 0.1 * np.eye(d)


def test_trace_sqrt_product_matches_sqrtm():
    for seed in range(5):
        a, b = random_spd(seed), random_spd(seed + 100)
        oracle = float(np.trace(linalg.sqrtm(a @ b)).real)
        assert trace_sqrt_product(a, b) == pytest.approx(oracle, rel=1e-8)


def test_frechet_is_a_squared_metric():
    rng = keyed_generator(1, "means")
    gaussians = [(rng.standard_normal(3), random_spd(seed)) for seed in range(3)]
    (ma, sa), (mb, sb), (mc, sc) = gaussians
    ab = frechet_from_moments(ma, sa, mb, sb)
    assert ab == pytest.approx(frechet_from_moments(mb, sb, ma, sa), rel=1e-10)
    ac = frechet_from_moments(ma, sa, mc, sc)
    bc = frechet_from_moments(mb, sb, mc, sc)
    assert math.sqrt(ac) <= math.sqrt(ab) + math.sqrt(bc) + 1e-12


def test_frechet_input_checks():
    with pytest.raises(ValidationError):
        moments(np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        frechet_from_moments([0.0], [[1.0]], [0.0, 0.0], np.eye(2))
    with pytest.raises(ValidationError):
        trace_sqrt_product(np.diag([1.0, -1.0]), np.eye(2))


def test_one_dimensional_moments():
    mu, sigma = moments(np.array([1.0, 2.0, 3.0]))
    assert mu.shape == (1,) and sigma.shape == (1, 1)
    assert sigma[0, 0] == pytest.approx(1.0)


def test_frechet_against_mixture(gmm):
    samples = gmm.sample(20000, keyed_generator(2, "fd"))
    assert frechet_vs_gmm(samples, gmm) < 0.01
    shifted = frechet_vs_gmm(samples + 1.0, gmm)
    assert shifted == pytest.approx(2.0, abs=0.15)
    table = frechet_table({"a": samples, "b": samples + 1.0}, gmm)
    assert table == {"a": frechet_vs_gmm(samples, gmm), "b": shifted}


def test_elo_single_game():
    assert expected_score(1000.0, 1000.0) == 0.5
    ratings = elo_ratings([("qsched", "ptqd", "qsched")])
    assert ratings == {"qsched": 1016.0, "ptqd": 984.0}


def test_elo_initial_and_players():
    ratings = elo_ratings([], players=["a", "b"], initial=1200.0)
    assert ratings == {"a": 1200.0, "b": 1200.0}


def test_elo_tie_between_equals():
    assert elo_ratings([("a", "b", "tie")]) == {"a": 1000.0, "b": 1000.0}
    ratings = elo_ratings([("a", "b", "a"), ("a", "b", "tie")])
    assert ratings["a"] < 1016.0


def test_elo_disjoint_games_commute():
    games = [("a", "b", "a"), ("c", "d", "d"), ("a", "b", "tie")]
    swapped = [games[1], games[0], games[2]]
    assert elo_ratings(games) == elo_ratings(swapped)


def test_elo_conserves_total():
    rng = keyed_generator(0, "elo")
    players = ["a", "b", "c", "d"]
    games = []
    for _ in range(1000):
        i, j = rng.choice(4, size=2, replace=False)
        winner = [players[i], players[j], "tie"][int(rng.integers(3))]
        games.append((players[i], players[j], winner))
    ratings = elo_ratings(games, k_factor=24.0)
    assert sum(ratings.values()) == pytest.approx(4000.0, rel=1e-12)


def test_elo_rejects_invalid_records():
    with pytest.raises(ValidationError):
        elo_ratings([("a", "a", "a")])
    with pytest.raises(ValidationError):
        elo_ratings([("a", "b", "c")])
    with pytest.raises(ValidationError):
        elo_ratings([("a", "b", "a")], k_factor=0.0)


def test_sweep_with_identity_corrections(schedule, exact, gmm):
    quantized = CorruptedDenoiser(exact, 0.1, [0.05, 0.05], 0.0, seed=0)
    rows = stochasticity_sweep(
        [0.0, 0.3], few_step_grid(schedule, 4), exact, quantized,
        PtqdParams.identity(2), PreconditionCoeffs(), gmm, schedule, 200, seed=0,
    )
    assert [row.eta for row in rows] == [0.0, 0.3]
    for row in rows:
        assert row.naive == row.qsched == row.ptqd
        assert row.fp != row.naive
        assert set(row.to_dict()) == {"eta", "fp", "naive", "ptqd", "qsched"}


def test_sweep_ptqd_undoes_planted_error(schedule, exact, gmm):
    quantized = CorruptedDenoiser(exact, 0.1, [0.05, 0.05], 0.0, seed=0)
    params = PtqdParams(gamma=0.1, delta_mean=(0.05, 0.05), delta_std=0.0)
    rows = stochasticity_sweep(
        [0.3], few_step_grid(schedule, 4), exact, quantized,
        params, PreconditionCoeffs(), gmm, schedule, 200, seed=0,
    )
    assert rows[0].ptqd == pytest.approx(rows[0].fp, rel=1e-9)
