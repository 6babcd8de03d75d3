import math

import numpy as np
import pytest
import torch
from torch import nn

from qsched.denoiser import (
    CorruptedDenoiser,
    GaussianMixture,
    GmmDenoiser,
    MLPDenoiser,
    PreconditionFns,
    TimeEmbedding,
    TrainingSpec,
    consistency_wrap,
    corrupt_denoiser,
    epsilon_loss,
    gmm_denoiser_eval,
    gmm_score,
    network_branch,
    tcd_consistency,
    train_mlp_denoiser,
)
from qsched.errors import DenoiserError, TrainingError, ValidationError
from qsched.streams import keyed_generator


def test_mixture_validation():
    with pytest.raises(ValidationError):
        GaussianMixture(weights=[0.5, 0.6], means=[[0.0], [1.0]], component_stds=[1, 1])
    with pytest.raises(ValidationError):
        GaussianMixture(weights=[1.0], means=[[0.0]], component_stds=[0.0])
    with pytest.raises(ValidationError):
        GaussianMixture(weights=[0.5, 0.5], means=[[0.0]], component_stds=[1, 1])


def test_mixture_moments(gmm):
    np.testing.assert_allclose(gmm.mean(), [0.0, 0.0], atol=1e-15)
    expected = 0.35 ** 2 * np.eye(2) + 2.25 * np.ones((2, 2))
    np.testing.assert_allclose(gmm.covariance(), expected, rtol=1e-12)


def test_mixture_sampling_moments(gmm):
    samples = gmm.sample(20000, keyed_generator(0, "test"))
    np.testing.assert_allclose(samples.mean(axis=0), gmm.mean(), atol=0.05)
    np.testing.assert_allclose(np.cov(samples, rowvar=False), gmm.covariance(), atol=0.1)


def test_log_density_at_mode():
    single = GaussianMixture(weights=[1.0], means=[[0.3, -0.2]], component_stds=[1.0])
    assert single.log_density([[0.3, -0.2]])[0] == pytest.approx(-math.log(2 * math.pi))


def test_single_gaussian_posterior(schedule):
    mu, s = np.array([0.4, -1.0]), 0.6
    single = GaussianMixture(weights=[1.0], means=[mu], component_stds=[s])
    x = np.array([[0.2, 0.1], [-1.0, 2.0]])
    t = 300
    a, sg = schedule.alphas[t], schedule.sigmas[t]
    expected = (a * s ** 2 * x + sg ** 2 * mu) / (a ** 2 * s ** 2 + sg ** 2)
    result = gmm_denoiser_eval(single, schedule, x, t)
    np.testing.assert_allclose(result.x0_hat, expected, rtol=1e-12)


def test_posterior_mean_limit(gmm, schedule):
    # near the top of the schedule the posterior mean approaches the data mean
    x = np.array([[0.0, 0.0]])
    result = gmm_denoiser_eval(gmm, schedule, x, 999)
    np.testing.assert_allclose(result.x0_hat, gmm.mean()[None, :], atol=1e-3)


def test_posterior_mean_matches_importance_sampling(gmm, exact, schedule):
    t = 500
    alpha, sigma = schedule.alphas[t], schedule.sigmas[t]
    x_t = np.array([0.4, -0.1])
    rng = keyed_generator(0, "posterior-oracle")
    # one million prior draws per component, weighted by the likelihood of x_t
    numerator, evidence = np.zeros(2), 0.0
    for weight, mean, std in zip(gmm.weights, gmm.means, gmm.component_stds):
        x0 = mean + std * rng.standard_normal((1_000_000, 2))
        likelihood = np.exp(-np.sum((x_t - alpha * x0) ** 2, axis=1) / (2 * sigma ** 2))
        numerator += weight * (likelihood @ x0) / len(x0)
        evidence += weight * likelihood.mean()

    x0_hat = exact.evaluate(schedule, x_t[None, :], t).x0_hat[0]
    np.testing.assert_almost_equal(x0_hat, numerator / evidence, decimal=3)


def test_epsilon_and_clean_sample_agree(exact, schedule):
    x = keyed_generator(1, "x").standard_normal((16, 2))
    for t in (1, 250, 999):
        result = exact.evaluate(schedule, x, t)
        rebuilt = schedule.alphas[t] * result.x0_hat + schedule.sigmas[t] * result.epsilon_hat
        np.testing.assert_allclose(rebuilt, x, atol=1e-10)


def test_score_matches_finite_differences(gmm, schedule):
    rng = keyed_generator(3, "score")
    h = 1e-5
    for _ in range(100):
        t = int(rng.integers(1, schedule.n_train))
        x = 2.0 * rng.standard_normal((1, 2))
        a, s = schedule.alphas[t], schedule.sigmas[t]
        numeric = np.zeros(2)
        for i in range(2):
            step = np.zeros((1, 2))
            step[0, i] = h
            numeric[i] = (
                gmm.noised_log_density(x + step, [a], [s])[0]
                - gmm.noised_log_density(x - step, [a], [s])[0]
            ) / (2 * h)
        np.testing.assert_allclose(gmm_score(gmm, schedule, x, t)[0], numeric, rtol=1e-5, atol=1e-6)


def test_clean_timestep_is_rejected(exact, schedule):
    with pytest.raises(DenoiserError):
        exact(np.zeros((1, 2)), 0)


def test_denoiser_input_checks(exact):
    with pytest.raises(DenoiserError):
        exact(np.zeros((2, 3)), 10)
    with pytest.raises(DenoiserError):
        exact(np.array([[np.nan, 0.0]]), 10)


def test_time_embedding():
    embedding = TimeEmbedding(4, 1000)
    features = embedding([0, 500])
    assert features.shape == (2, 8)
    np.testing.assert_array_equal(features[0], [0, 0, 0, 0, 1, 1, 1, 1])
    assert features[1, 0] == pytest.approx(1.0)


def test_mlp_parameters_rebuild(mlp):
    rebuilt = MLPDenoiser.from_flat(mlp.header(), mlp.flat_parameters())
    x = keyed_generator(2, "x").standard_normal((5, 2))
    t = np.array([1, 10, 100, 500, 999])
    assert np.array_equal(rebuilt(x, t), mlp(x, t))


def test_mlp_shape_checks():
    embedding = TimeEmbedding(2, 100)
    with pytest.raises(ValidationError):
        MLPDenoiser([np.zeros((6, 4)), np.zeros((5, 2))], [np.zeros(4), np.zeros(2)], embedding)
    with pytest.raises(ValidationError):
        MLPDenoiser([np.zeros((6, 2))], [np.zeros(2)], embedding, activation="relu")


def test_mlp_hook_sees_hidden_layers(mlp):
    x = np.zeros((3, 2))
    hidden = mlp.hidden_outputs(x, np.array([5, 5, 5]))
    assert len(hidden) == 2
    assert all(h.shape == (3, 32) for h in hidden)


def test_training_reduces_loss_and_is_deterministic(gmm, schedule):
    spec = TrainingSpec(
        hidden_layers=2, width=32, frequencies=4, steps=200, batch=128,
        heldout=512, seed=3, log_every=100,
    )
    net = train_mlp_denoiser(gmm, schedule, spec)
    assert net.heldout_loss is not None and net.heldout_loss < 0.9
    assert net.heldout_loss == pytest.approx(epsilon_loss(net, gmm, schedule, 512, 3))
    again = train_mlp_denoiser(gmm, schedule, spec)
    assert np.array_equal(net.flat_parameters(), again.flat_parameters())


def test_zero_steps_returns_initial_network(gmm, schedule):
    spec = TrainingSpec(
        hidden_layers=2, width=16, frequencies=4, steps=0, heldout=256, seed=7,
    )
    net = train_mlp_denoiser(gmm, schedule, spec)

    torch.manual_seed(7)
    fan_in = gmm.dim + TimeEmbedding(4, schedule.n_train).size
    initial = [nn.Linear(fan_in, 16), nn.Linear(16, 16), nn.Linear(16, gmm.dim)]
    for weight, bias, layer in zip(net.weights, net.biases, initial):
        np.testing.assert_array_equal(weight, layer.weight.detach().numpy().T)
        np.testing.assert_array_equal(bias, layer.bias.detach().numpy())
    assert net.heldout_loss == pytest.approx(epsilon_loss(net, gmm, schedule, 256, 7))


@pytest.mark.slow
def test_single_gaussian_training_converges(schedule):
    gaussian = GaussianMixture(weights=[1.0], means=[[0.0]], component_stds=[0.2])
    spec = TrainingSpec(
        hidden_layers=3, width=32, steps=5000, heldout=4096, max_heldout_loss=0.05,
    )
    net = train_mlp_denoiser(gaussian, schedule, spec)
    assert net.heldout_loss < 0.05


def test_training_threshold(gmm, schedule):
    spec = TrainingSpec(
        hidden_layers=1, width=8, frequencies=2, steps=5, batch=32,
        heldout=64, max_heldout_loss=1e-9,
    )
    with pytest.raises(TrainingError):
        train_mlp_denoiser(gmm, schedule, spec)


def test_precondition_boundary():
    pf = PreconditionFns()
    assert pf.c_skip(0) == 1.0
    assert pf.c_out(0) == 0.0
    assert pf.c_skip(1) == pytest.approx(0.25 / 100.25)
    assert pf.c_out(1) == pytest.approx(10.0 / math.sqrt(100.25))


class RawBranch(PreconditionFns):
    def c_skip(self, t):
        return 0.0

    def c_out(self, t):
        return 1.0


class ShiftedInput(PreconditionFns):
    def c_in(self, t):
        return 0.5

    def c_noise(self, t):
        return t - 100


def test_wrap_without_skip_is_raw_network_branch(exact, schedule):
    x = keyed_generator(4, "x").standard_normal((4, 2))
    branch = network_branch(exact, RawBranch(), schedule, x, 600)
    np.testing.assert_array_equal(consistency_wrap(branch, RawBranch(), x, 600), branch.x0_hat)
    np.testing.assert_allclose(
        branch.x0_hat, exact.evaluate(schedule, x, 600).x0_hat, rtol=1e-12, atol=1e-12
    )


def test_network_branch_scales_input_not_skip(exact, schedule):
    x = keyed_generator(4, "x").standard_normal((4, 2))
    pf = ShiftedInput()
    branch = network_branch(exact, pf, schedule, x, 600, c_eps=1.02)

    epsilon = 1.02 * exact(0.5 * x, 500)
    np.testing.assert_allclose(branch.epsilon_hat, epsilon, rtol=1e-15, atol=1e-15)
    x0_hat = (0.5 * x - schedule.sigmas[600] * epsilon) / schedule.alphas[600]
    np.testing.assert_allclose(branch.x0_hat, x0_hat, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(
        consistency_wrap(branch, pf, x, 600),
        pf.c_skip(600) * x + pf.c_out(600) * branch.x0_hat,
        rtol=1e-15, atol=1e-15,
    )


def test_default_conditioning_is_the_timestep():
    pf = PreconditionFns()
    assert pf.c_in(250) == 1.0
    assert pf.c_noise(250) == 250


def test_tcd_consistency_at_clean_boundary(exact, schedule):
    x = keyed_generator(4, "x").standard_normal((4, 2))
    result = exact.evaluate(schedule, x, 600)
    np.testing.assert_allclose(
        tcd_consistency(result.epsilon_hat, schedule, x, 600), result.x0_hat, atol=1e-12
    )


def test_corruption_without_noise(exact):
    x = keyed_generator(5, "x").standard_normal((6, 2))
    q = corrupt_denoiser(exact, 0.1, [0.05, -0.02], 0.0, seed=0)
    expected = 1.1 * exact(x, 400) + np.array([0.05, -0.02])
    np.testing.assert_allclose(q(x, 400), expected, rtol=1e-15, atol=1e-15)


def test_corruption_noise_spread(exact):
    ids = np.arange(50_000)
    x = np.zeros((len(ids), 2))
    q = corrupt_denoiser(exact, 0.0, [0.0, 0.0], 0.2, seed=1)
    draws = (q(x, 400, ids) - exact(x, 400, ids)).ravel()
    assert draws.size == 100_000
    assert np.std(draws) == pytest.approx(0.2, abs=0.005)
    assert np.mean(draws) == pytest.approx(0.0, abs=0.005)


def test_corruption_noise_is_keyed(exact):
    x = np.zeros((3, 2))
    q = CorruptedDenoiser(exact, 0.0, 0.0, 0.2, seed=9)
    first = q(x, 400, np.array([0, 1, 2]))
    assert np.array_equal(first, q(x, 400, np.array([0, 1, 2])))
    assert np.array_equal(first[1:], q(x[1:], 400, np.array([1, 2])))
    assert not np.array_equal(first[0], first[1])
