#!/usr/bin/env python3
# -*- coding: utf-8 -*-
# Copyright (C) 2024 Vasiliy Stelmachenok <ventureo@yandex.ru>
#
# This program is free software; you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation; either version 2 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License along
# with this program; if not, write to the Free Software Foundation, Inc.,
# 51 Franklin Street, Fifth Floor, Boston, MA 02110-1301 USA.

from dataclasses import dataclass
import logging
import math
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, logsumexp
import torch
from torch import nn

from .errors import DenoiserError, TrainingError, ValidationError
from .model import Denoiser, DenoiserEval
from .schedule import NoiseSchedule
from .streams import keyed_generator

logger = logging.getLogger("Denoiser")

ACTIVATIONS: Dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "silu": lambda h: h * expit(h),
    "tanh": np.tanh,
}

TORCH_ACTIVATIONS: Dict[str, Callable[[], nn.Module]] = {
    "silu": nn.SiLU,
    "tanh": nn.Tanh,
}


@dataclass(frozen=True, eq=False)
class GaussianMixture():
    weights: np.ndarray
    means: np.ndarray
    component_stds: np.ndarray

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        stds = np.asarray(self.component_stds, dtype=np.float64).reshape(-1)

        if not (len(weights) == means.shape[0] == len(stds)):
            raise ValidationError(
                "weights, means and component_stds must describe the same "
                f"number of components ({len(weights)}, {means.shape[0]}, {len(stds)})"
            )
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            raise ValidationError(f"weights must be non-negative and sum to 1: {weights}")
        if np.any(stds <= 0) or not np.all(np.isfinite(means)):
            raise ValidationError("component stds must be positive and means finite")

        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "component_stds", stds)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return len(self.weights)

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        mean = self.mean()
        second = np.zeros((self.dim, self.dim))
        for w, mu, s in zip(self.weights, self.means, self.component_stds):
            second += w * (s ** 2 * np.eye(self.dim) + np.outer(mu, mu))
        return second - np.outer(mean, mean)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        components = rng.choice(self.n_components, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        return self.means[components] + self.component_stds[components, None] * noise

    def noised_log_components(
        self,
        x: np.ndarray,
        alpha: np.ndarray,
        sigma: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        """Per-component log N(x; alpha mu_i, (alpha^2 s_i^2 + sigma^2) I) + log w_i."""
        alpha = np.asarray(alpha, dtype=np.float64).reshape(-1, 1)
        sigma = np.asarray(sigma, dtype=np.float64).reshape(-1, 1)
        variance = alpha ** 2 * self.component_stds[None, :] ** 2 + sigma ** 2
        diff = x[:, None, :] - alpha[:, :, None] * self.means[None, :, :]
        with np.errstate(divide="ignore"):
            log_weights = np.log(self.weights)
        log_prob = (
            log_weights[None, :]
            - 0.5 * self.dim * np.log(2 * math.pi * variance)
            - np.sum(diff ** 2, axis=-1) / (2 * variance)
        )
        return log_prob, variance

    def noised_log_density(self, x: np.ndarray, alpha, sigma) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        log_prob, _ = self.noised_log_components(x, alpha, sigma)
        return logsumexp(log_prob, axis=1)

    def log_density(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        return self.noised_log_density(x, np.ones(n), np.zeros(n))

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "component_stds": self.component_stds.tolist(),
        }


def _schedule_rows(schedule: NoiseSchedule, t) -> Tuple[np.ndarray, np.ndarray]:
    timesteps = np.asarray(t, dtype=np.int64).reshape(-1)
    if np.any(timesteps < 1) or np.any(timesteps >= schedule.n_train):
        raise DenoiserError(
            f"timesteps must lie in [1, {schedule.n_train - 1}] (sigma_0 = 0)"
        )
    return schedule.alphas[timesteps], schedule.sigmas[timesteps]


def _posterior_mean(
    gmm: GaussianMixture,
    x: np.ndarray,
    alpha: np.ndarray,
    sigma: np.ndarray
) -> np.ndarray:
    log_prob, variance = gmm.noised_log_components(x, alpha, sigma)
    responsibilities = np.exp(log_prob - logsumexp(log_prob, axis=1, keepdims=True))
    # E[x0 | x_t, component i] = (alpha s_i^2 x_t + sigma^2 mu_i) / var_i
    component_means = (
        alpha[:, None, None] * gmm.component_stds[None, :, None] ** 2 * x[:, None, :]
        + sigma[:, None, None] ** 2 * gmm.means[None, :, :]
    ) / variance[:, :, None]
    return np.einsum("nk,nkd->nd", responsibilities, component_means)


def gmm_denoiser_eval(
    gmm: GaussianMixture,
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t
) -> DenoiserEval:
    """Exact posterior mean E[x0 | x_t] and the implied noise estimate."""
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    if not np.all(np.isfinite(x)):
        raise DenoiserError("non-finite input state")
    alpha, sigma = _schedule_rows(schedule, np.broadcast_to(t, (x.shape[0],)))
    x0_hat = _posterior_mean(gmm, x, alpha, sigma)
    epsilon = (x - alpha[:, None] * x0_hat) / sigma[:, None]
    return DenoiserEval(epsilon_hat=epsilon, x0_hat=x0_hat)


def gmm_score(
    gmm: GaussianMixture,
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t
) -> np.ndarray:
    """grad_x log p_t(x_t) = (alpha_t E[x0 | x_t] - x_t) / sigma_t^2."""
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    evaluation = gmm_denoiser_eval(gmm, schedule, x, t)
    alpha, sigma = _schedule_rows(schedule, np.broadcast_to(t, (x.shape[0],)))
    return (alpha[:, None] * evaluation.x0_hat - x) / sigma[:, None] ** 2


class GmmDenoiser(Denoiser):
    """The analytic mixture posterior exposed as an epsilon-predictor."""

    def __init__(self, gmm: GaussianMixture, schedule: NoiseSchedule) -> None:
        self.__gmm = gmm
        self.__schedule = schedule

    @property
    def dim(self) -> int:
        return self.__gmm.dim

    @property
    def gmm(self) -> GaussianMixture:
        return self.__gmm

    def predict(self, x_t, t, sample_ids) -> np.ndarray:
        return gmm_denoiser_eval(self.__gmm, self.__schedule, x_t, t).epsilon_hat

    def evaluate(self, schedule, x_t, t, sample_ids=None) -> DenoiserEval:
        return gmm_denoiser_eval(self.__gmm, schedule, x_t, t)


@dataclass(frozen=True)
class TimeEmbedding():
    """Sinusoidal features of t / n_train at octave-spaced frequencies."""
    frequencies: int
    n_train: int

    @property
    def size(self) -> int:
        return 2 * self.frequencies

    def __call__(self, t) -> np.ndarray:
        u = np.asarray(t, dtype=np.float64).reshape(-1, 1) / self.n_train
        angles = u * math.pi * 2.0 ** np.arange(self.frequencies)[None, :]
        return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class MLPDenoiser(Denoiser):
    """
    Fully-connected epsilon-predictor on [x_t, embedding(t)].

    Parameters are held at float32 precision (the serialised precision) and
    evaluated in float64.
    """

    def __init__(
        self,
        weights: Sequence[np.ndarray],
        biases: Sequence[np.ndarray],
        embedding: TimeEmbedding,
        activation: str = "silu",
        seed: int = 0,
        heldout_loss: Optional[float] = None,
    ) -> None:
        if activation not in ACTIVATIONS:
            raise ValidationError(f"unknown activation: {activation}")
        if len(weights) != len(biases) or not weights:
            raise ValidationError("need one bias per weight matrix")

        self.__weights = tuple(self.__freeze(w) for w in weights)
        self.__biases = tuple(self.__freeze(b).reshape(-1) for b in biases)
        self.__embedding = embedding
        self.__activation = activation
        self.__seed = seed
        self.__heldout_loss = heldout_loss

        fan_in = self.__weights[0].shape[0]
        for w, b in zip(self.__weights, self.__biases):
            if w.ndim != 2 or w.shape[0] != fan_in or b.shape[0] != w.shape[1]:
                raise ValidationError(f"inconsistent layer shapes at {w.shape}")
            fan_in = w.shape[1]
        if self.__weights[0].shape[0] != self.dim + embedding.size:
            raise ValidationError(
                "first layer must take the state and the time embedding"
            )
        if not all(np.all(np.isfinite(p)) for p in self.__weights + self.__biases):
            raise ValidationError("non-finite network parameters")

    @staticmethod
    def __freeze(values) -> np.ndarray:
        array = np.asarray(values, dtype=np.float32).astype(np.float64)
        array.setflags(write=False)
        return array

    @property
    def dim(self) -> int:
        return self.__weights[-1].shape[1]

    @property
    def weights(self) -> Tuple[np.ndarray, ...]:
        return self.__weights

    @property
    def biases(self) -> Tuple[np.ndarray, ...]:
        return self.__biases

    @property
    def embedding(self) -> TimeEmbedding:
        return self.__embedding

    @property
    def activation(self) -> str:
        return self.__activation

    @property
    def seed(self) -> int:
        return self.__seed

    @property
    def heldout_loss(self) -> Optional[float]:
        return self.__heldout_loss

    @property
    def widths(self) -> Tuple[int, ...]:
        return (self.__weights[0].shape[0],) + tuple(w.shape[1] for w in self.__weights)

    def forward(
        self,
        x_t: np.ndarray,
        t: np.ndarray,
        weights: Optional[Sequence[np.ndarray]] = None,
        hook: Optional[Callable[[int, np.ndarray], np.ndarray]] = None,
    ) -> np.ndarray:
        """Evaluate with optional substitute weights and a hidden-output hook."""
        weights = self.__weights if weights is None else weights
        act = ACTIVATIONS[self.__activation]
        h = np.concatenate([x_t, self.__embedding(t)], axis=1)
        for layer, (w, b) in enumerate(zip(weights[:-1], self.__biases[:-1])):
            h = act(h @ w + b)
            if hook is not None:
                h = hook(layer, h)
        return h @ weights[-1] + self.__biases[-1]

    def hidden_outputs(self, x_t: np.ndarray, t: np.ndarray) -> list:
        outputs = []

        def collect(layer, h):
            outputs.append(h)
            return h

        self.forward(x_t, t, hook=collect)
        return outputs

    def predict(self, x_t, t, sample_ids) -> np.ndarray:
        return self.forward(x_t, t)

    def flat_parameters(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.__weights, self.__biases):
            parts.append(w.reshape(-1))
            parts.append(b.reshape(-1))
        return np.concatenate(parts).astype("<f4")

    def header(self) -> dict:
        return {
            "format": "qsched.mlp",
            "widths": list(self.widths),
            "activation": self.__activation,
            "embedding": {
                "frequencies": self.__embedding.frequencies,
                "n_train": self.__embedding.n_train,
            },
            "seed": self.__seed,
            "heldout_loss": self.__heldout_loss,
        }

    @classmethod
    def from_flat(cls, header: dict, flat: np.ndarray) -> "MLPDenoiser":
        widths = header["widths"]
        weights, biases = [], []
        offset = 0
        for fan_in, fan_out in zip(widths, widths[1:]):
            size = fan_in * fan_out
            weights.append(flat[offset:offset + size].reshape(fan_in, fan_out))
            offset += size
            biases.append(flat[offset:offset + fan_out])
            offset += fan_out
        if offset != flat.size:
            raise ValidationError(
                f"parameter block holds {flat.size} values, header expects {offset}"
            )
        embedding = TimeEmbedding(
            header["embedding"]["frequencies"], header["embedding"]["n_train"]
        )
        return cls(
            weights, biases, embedding,
            activation=header["activation"],
            seed=header["seed"],
            heldout_loss=header.get("heldout_loss"),
        )

    def __str__(self):
        return (f'MLPDenoiser(widths={self.widths}, '
                f'activation=\'{self.__activation}\', seed={self.__seed})')


@dataclass(frozen=True, kw_only=True)
class TrainingSpec():
    hidden_layers: int = 3
    width: int = 64
    frequencies: int = 8
    activation: str = "silu"
    steps: int = 4000
    batch: int = 256
    learning_rate: float = 2e-3
    heldout: int = 2048
    seed: int = 0
    max_heldout_loss: Optional[float] = None
    log_every: int = 500

    def __post_init__(self):
        if self.hidden_layers < 1 or self.width < 1 or self.frequencies < 1:
            raise ValidationError("network needs at least one hidden layer and frequency")
        if self.steps < 0 or self.batch < 1 or self.heldout < 1:
            raise ValidationError("steps must be >= 0, batch and heldout >= 1")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning rate must be positive: {self.learning_rate}")
        if self.activation not in TORCH_ACTIVATIONS:
            raise ValidationError(f"unknown activation: {self.activation}")


def _noised_batch(
    gmm: GaussianMixture,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    n: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x0 = gmm.sample(n, rng)
    t = rng.integers(1, schedule.n_train, size=n)
    epsilon = rng.standard_normal((n, gmm.dim))
    x_t = schedule.alphas[t][:, None] * x0 + schedule.sigmas[t][:, None] * epsilon
    return x_t, t, epsilon


def epsilon_loss(
    denoiser: Denoiser,
    gmm: GaussianMixture,
    schedule: NoiseSchedule,
    n: int,
    seed: int
) -> float:
    """Held-out per-coordinate mean of (eps_hat - eps)^2."""
    x_t, t, epsilon = _noised_batch(
        gmm, schedule, keyed_generator(seed, "heldout"), n
    )
    return float(np.mean((denoiser(x_t, t) - epsilon) ** 2))


def train_mlp_denoiser(
    gmm: GaussianMixture,
    schedule: NoiseSchedule,
    spec: TrainingSpec
) -> MLPDenoiser:
    torch.manual_seed(spec.seed)
    torch.use_deterministic_algorithms(True)

    embedding = TimeEmbedding(spec.frequencies, schedule.n_train)
    layers = []
    fan_in = gmm.dim + embedding.size
    for _ in range(spec.hidden_layers):
        layers += [nn.Linear(fan_in, spec.width), TORCH_ACTIVATIONS[spec.activation]()]
        fan_in = spec.width
    layers.append(nn.Linear(fan_in, gmm.dim))
    model = nn.Sequential(*layers)
    optimizer = torch.optim.Adam(model.parameters(), lr=spec.learning_rate)

    logger.info(
        "Training %d-layer width-%d denoiser for %d steps",
        spec.hidden_layers, spec.width, spec.steps
    )
    for step in range(spec.steps):
        x_t, t, epsilon = _noised_batch(
            gmm, schedule, keyed_generator(spec.seed, "train", step), spec.batch
        )
        inputs = torch.from_numpy(
            np.concatenate([x_t, embedding(t)], axis=1).astype(np.float32)
        )
        target = torch.from_numpy(epsilon.astype(np.float32))
        loss = torch.mean((model(inputs) - target) ** 2)

        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}", step=step)

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        if (step + 1) % spec.log_every == 0:
            logger.info("Step %d: loss %.6f", step + 1, loss.item())

    linear = [m for m in model if isinstance(m, nn.Linear)]
    weights = [m.weight.detach().numpy().T.copy() for m in linear]
    biases = [m.bias.detach().numpy().copy() for m in linear]
    net = MLPDenoiser(
        weights, biases, embedding, activation=spec.activation, seed=spec.seed
    )

    heldout = epsilon_loss(net, gmm, schedule, spec.heldout, spec.seed)
    logger.info("Held-out epsilon loss: %.6f", heldout)
    if spec.max_heldout_loss is not None and heldout > spec.max_heldout_loss:
        raise TrainingError(
            f"held-out loss {heldout:.6f} above threshold {spec.max_heldout_loss}"
        )

    return MLPDenoiser(
        net.weights, net.biases, embedding,
        activation=spec.activation, seed=spec.seed, heldout_loss=heldout
    )


@dataclass(frozen=True, kw_only=True)
class PreconditionFns():
    """
    Consistency preconditioning in the latent-consistency form.

    tau = timestep_scaling * (t - boundary),
    c_skip = sigma_data^2 / (tau^2 + sigma_data^2),
    c_out = tau / sqrt(tau^2 + sigma_data^2); exactly (1, 0) at the boundary.
    """
    sigma_data: float = 0.5
    timestep_scaling: float = 10.0
    boundary: int = 0

    def __post_init__(self):
        if self.sigma_data < 0 or not self.timestep_scaling > 0:
            raise ValidationError(
                "sigma_data must be >= 0 and timestep_scaling positive"
            )

    def c_skip(self, t: int) -> float:
        if t == self.boundary:
            return 1.0
        tau = self.timestep_scaling * (t - self.boundary)
        return self.sigma_data ** 2 / (tau ** 2 + self.sigma_data ** 2)

    def c_out(self, t: int) -> float:
        if t == self.boundary:
            return 0.0
        tau = self.timestep_scaling * (t - self.boundary)
        return tau / math.sqrt(tau ** 2 + self.sigma_data ** 2)

    def c_in(self, t: int) -> float:
        return 1.0

    def c_noise(self, t: int) -> int:
        """Timestep the network is conditioned on."""
        return int(t)


def network_branch(
    denoiser: Denoiser,
    pf: PreconditionFns,
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t: int,
    sample_ids: Optional[np.ndarray] = None,
    c_eps: float = 1.0
) -> DenoiserEval:
    """The network evaluated at (c_in(t) x_t, c_noise(t)), epsilon scaled by c_eps."""
    x_in = pf.c_in(t) * np.atleast_2d(x_t)
    epsilon = c_eps * denoiser(x_in, pf.c_noise(t), sample_ids)
    return DenoiserEval(
        epsilon_hat=epsilon,
        x0_hat=(x_in - schedule.sigmas[t] * epsilon) / schedule.alphas[t],
    )


def consistency_wrap(
    net_output: DenoiserEval,
    pf: PreconditionFns,
    x_t: np.ndarray,
    t: int
) -> np.ndarray:
    """
    F(x_t, t) = c_skip(t) x_t + c_out(t) x0_hat.

    net_output is the network branch from network_branch; x_t enters the
    skip term unscaled.
    """
    return pf.c_skip(t) * x_t + pf.c_out(t) * net_output.x0_hat


def tcd_consistency(
    epsilon_hat: np.ndarray,
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    t: int,
    boundary: int = 0
) -> np.ndarray:
    """DDIM-style consistency function mapping x_t onto the boundary timestep."""
    a_b, s_b = schedule.alphas[boundary], schedule.sigmas[boundary]
    a_t, s_t = schedule.alphas[t], schedule.sigmas[t]
    return (a_b / a_t) * x_t - a_b * (s_t / a_t - s_b / a_b) * epsilon_hat


class CorruptedDenoiser(Denoiser):
    """E^Q = (1 + gamma) E + delta with delta ~ N(delta_mean, delta_std^2 I)."""

    def __init__(
        self,
        base: Denoiser,
        gamma: float,
        delta_mean: np.ndarray,
        delta_std: float,
        seed: int
    ) -> None:
        if delta_std < 0:
            raise ValidationError(f"delta_std must be non-negative: {delta_std}")
        mean = np.broadcast_to(
            np.asarray(delta_mean, dtype=np.float64), (base.dim,)
        ).copy()
        self.__base = base
        self.__gamma = float(gamma)
        self.__delta_mean = mean
        self.__delta_std = float(delta_std)
        self.__seed = seed

    @property
    def dim(self) -> int:
        return self.__base.dim

    @property
    def base(self) -> Denoiser:
        return self.__base

    def predict(self, x_t, t, sample_ids) -> np.ndarray:
        output = (1.0 + self.__gamma) * self.__base.predict(x_t, t, sample_ids)
        output = output + self.__delta_mean[None, :]
        if self.__delta_std > 0:
            draws = np.array([
                keyed_generator(self.__seed, "delta", int(ti), int(sid))
                .standard_normal(self.dim)
                for ti, sid in zip(t, sample_ids)
            ]).reshape(-1, self.dim)
            output = output + self.__delta_std * draws
        return output


def corrupt_denoiser(
    base: Denoiser,
    gamma: float,
    delta_mean,
    delta_std: float,
    seed: int
) -> CorruptedDenoiser:
    return CorruptedDenoiser(base, gamma, delta_mean, delta_std, seed)
