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
"""
Few-step samplers: TCD strategic stochastic sampling, its Q-Sched and PTQD
variants, and multistep consistency sampling with optional Q-Sched scaling.

Each step maps a batch x_t (rows = samples) at timestep t to x_s, s < t.
"""
from dataclasses import dataclass, field
import logging
import math
from typing import Optional, Tuple

import numpy as np

from .denoiser import PreconditionFns, consistency_wrap, network_branch, tcd_consistency
from .errors import (
    OrderingError,
    QSchedError,
    SamplingError,
    SingularCorrectionError,
    ValidationError,
)
from .model import (
    Denoiser,
    PreconditionCoeffs,
    PtqdParams,
    StepRecord,
    Trajectory,
)
from .schedule import NoiseSchedule, TimestepGrid, eta_noise_std, sub_timestep
from .streams import NoiseBank, StepNoise

logger = logging.getLogger("Sampler")

KINDS = ("tcd", "qsched", "ptqd", "lcm", "qsched_lcm")
CONSISTENCY_KINDS = ("lcm", "qsched_lcm")

IDENTITY = PreconditionCoeffs()


@dataclass(frozen=True, kw_only=True)
class SamplerConfig():
    kind: str
    grid: TimestepGrid
    eta: float = 0.0
    coeffs: PreconditionCoeffs = IDENTITY
    ptqd: Optional[PtqdParams] = None
    precondition: PreconditionFns = field(default_factory=PreconditionFns)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown sampler kind: {self.kind}")
        if not (0.0 <= self.eta < 1.0):
            raise ValidationError(f"eta must lie in [0, 1), got {self.eta}")
        if (self.kind == "ptqd") != (self.ptqd is not None):
            raise ValidationError("PTQD parameters are required iff kind is ptqd")
        if self.kind in ("tcd", "ptqd", "lcm") and not self.coeffs.is_identity:
            raise ValidationError(
                f"{self.kind} does not take preconditioning coefficients, "
                "use qsched or qsched_lcm"
            )


def _check_order(t: int, s: int) -> None:
    if t <= s:
        raise OrderingError(f"step must move to an earlier timestep ({t} -> {s})")
    if s < 0:
        raise OrderingError(f"target timestep must be non-negative, got {s}")


def _tcd_update(
    schedule: NoiseSchedule,
    x_t: np.ndarray,
    epsilon: np.ndarray,
    t: int,
    s_prime: int,
    s: int
) -> np.ndarray:
    """(a_s / a_s') times the consistency map from t onto s', noise excluded."""
    ratio = schedule.alphas[s] / schedule.alphas[s_prime]
    return ratio * tcd_consistency(epsilon, schedule, x_t, t, boundary=s_prime)


def _inject(
    x_s: np.ndarray,
    std: float,
    rng: StepNoise
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    if std <= 0.0:
        return x_s, None
    noise = std * rng.normal()
    return x_s + noise, noise


def _tcd_transition(
    index: int,
    x_t: np.ndarray,
    t: int,
    s: int,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    eta: float,
    rng: StepNoise,
    sample_ids: np.ndarray,
    coeffs: PreconditionCoeffs = IDENTITY,
) -> StepRecord:
    _check_order(t, s)
    s_prime = sub_timestep(s, eta)
    epsilon = coeffs.c_eps * denoiser(x_t, t, sample_ids)
    x_s = _tcd_update(schedule, coeffs.c_x * x_t, epsilon, t, s_prime, s)
    x_s, noise = _inject(x_s, eta_noise_std(schedule, s, s_prime), rng)
    return StepRecord(
        index=index, t=t, s_prime=s_prime, s=s,
        x_before=x_t, x_after=x_s, epsilon=epsilon, noise=noise,
    )


def ptqd_noise_std(
    schedule: NoiseSchedule,
    t: int,
    s_prime: int,
    s: int,
    params: PtqdParams
) -> float:
    """
    Injected std once the delta term's own variance is accounted for:
    1 - r - r (delta_std (sigma_s' - a_s' sigma_t / a_t) / (1 + gamma))^2,
    r = a_s^2 / a_s'^2, clamped at zero.
    """
    if s_prime == s:
        return 0.0
    ratio = schedule.alpha_ratio_sq(s, s_prime)
    a_t, sg_t = schedule.alphas[t], schedule.sigmas[t]
    a_sp, sg_sp = schedule.alphas[s_prime], schedule.sigmas[s_prime]
    spread = params.delta_std * (sg_sp - a_sp * sg_t / a_t) / (1.0 + params.gamma)
    variance = 1.0 - ratio - ratio * spread ** 2
    if variance < 0.0:
        logger.debug("PTQD variance %.3e clamped to zero at %d -> %d", variance, t, s)
        return 0.0
    return math.sqrt(variance)


def _ptqd_transition(
    index: int,
    x_t: np.ndarray,
    t: int,
    s: int,
    q_denoiser: Denoiser,
    schedule: NoiseSchedule,
    eta: float,
    params: PtqdParams,
    rng: StepNoise,
    sample_ids: np.ndarray,
) -> StepRecord:
    _check_order(t, s)
    if 1.0 + params.gamma == 0.0:
        raise SingularCorrectionError("PTQD correction is singular at gamma = -1")
    s_prime = sub_timestep(s, eta)
    bias = np.asarray(params.delta_mean, dtype=np.float64)
    epsilon = (q_denoiser(x_t, t, sample_ids) - bias[None, :]) / (1.0 + params.gamma)
    x_s = _tcd_update(schedule, x_t, epsilon, t, s_prime, s)
    x_s, noise = _inject(x_s, ptqd_noise_std(schedule, t, s_prime, s, params), rng)
    return StepRecord(
        index=index, t=t, s_prime=s_prime, s=s,
        x_before=x_t, x_after=x_s, epsilon=epsilon, noise=noise,
    )


def _lcm_transition(
    index: int,
    x_t: np.ndarray,
    t: int,
    s: int,
    denoiser: Denoiser,
    pf: PreconditionFns,
    schedule: NoiseSchedule,
    rng: StepNoise,
    sample_ids: np.ndarray,
    coeffs: PreconditionCoeffs = IDENTITY,
) -> StepRecord:
    _check_order(t, s)
    scaled = coeffs.c_x * x_t
    branch = network_branch(denoiser, pf, schedule, scaled, t, sample_ids, coeffs.c_eps)
    x0_hat = consistency_wrap(branch, pf, scaled, t)
    epsilon = branch.epsilon_hat
    if s == 0:
        return StepRecord(
            index=index, t=t, s_prime=s, s=s,
            x_before=x_t, x_after=x0_hat, epsilon=epsilon, noise=None,
        )
    noise = schedule.sigmas[s] * rng.normal()
    return StepRecord(
        index=index, t=t, s_prime=s, s=s,
        x_before=x_t, x_after=schedule.alphas[s] * x0_hat + noise,
        epsilon=epsilon, noise=noise,
    )


def _ids(x_t: np.ndarray, sample_ids) -> np.ndarray:
    if sample_ids is None:
        return np.arange(np.atleast_2d(x_t).shape[0])
    return np.asarray(sample_ids)


def tcd_sss_step(x_t, t, s, denoiser, schedule, eta, rng, sample_ids=None) -> np.ndarray:
    x_t = np.atleast_2d(x_t)
    return _tcd_transition(
        0, x_t, t, s, denoiser, schedule, eta, rng, _ids(x_t, sample_ids)
    ).x_after


def qsched_step(x_t, t, s, denoiser, schedule, eta, coeffs, rng, sample_ids=None) -> np.ndarray:
    x_t = np.atleast_2d(x_t)
    return _tcd_transition(
        0, x_t, t, s, denoiser, schedule, eta, rng, _ids(x_t, sample_ids), coeffs
    ).x_after


def ptqd_step(x_t, t, s, q_denoiser, schedule, eta, params, rng, sample_ids=None) -> np.ndarray:
    x_t = np.atleast_2d(x_t)
    return _ptqd_transition(
        0, x_t, t, s, q_denoiser, schedule, eta, params, rng, _ids(x_t, sample_ids)
    ).x_after


def lcm_multistep_step(
    x_t, t, s, denoiser, pf, schedule, rng, coeffs=None, sample_ids=None
) -> np.ndarray:
    x_t = np.atleast_2d(x_t)
    return _lcm_transition(
        0, x_t, t, s, denoiser, pf, schedule, rng, _ids(x_t, sample_ids),
        IDENTITY if coeffs is None else coeffs,
    ).x_after


def _transition(
    config: SamplerConfig,
    index: int,
    x_t: np.ndarray,
    t: int,
    s: int,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    rng: StepNoise,
    sample_ids: np.ndarray,
) -> StepRecord:
    match config.kind:
        case "tcd" | "qsched":
            return _tcd_transition(
                index, x_t, t, s, denoiser, schedule, config.eta, rng,
                sample_ids, config.coeffs,
            )
        case "ptqd":
            return _ptqd_transition(
                index, x_t, t, s, denoiser, schedule, config.eta,
                config.ptqd, rng, sample_ids,
            )
        case "lcm" | "qsched_lcm":
            return _lcm_transition(
                index, x_t, t, s, denoiser, config.precondition, schedule,
                rng, sample_ids, config.coeffs,
            )
    raise ValidationError(f"unknown sampler kind: {config.kind}")


def sample_trajectory(
    config: SamplerConfig,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    batch: int,
    first_index: int = 0,
    bank: Optional[NoiseBank] = None,
    record: bool = True,
) -> Tuple[np.ndarray, Trajectory]:
    """
    Run the configured sampler over samples first_index .. first_index + batch - 1.

    x_{t_N} and every z come from streams keyed by (seed, sample index, ...),
    so a shared ``bank`` reproduces the same draws across runs.
    """
    if batch < 1:
        raise ValidationError(f"batch must be >= 1, got {batch}")
    config.grid.check(schedule)

    sample_ids = np.arange(first_index, first_index + batch)
    if bank is None:
        bank = NoiseBank(config.seed, sample_ids, denoiser.dim)
    elif bank.seed != config.seed or not np.array_equal(bank.sample_ids, sample_ids):
        raise ValidationError("noise bank does not match the seed or sample range")

    x = bank.initial()
    trajectory = Trajectory(
        kind=config.kind, seed=config.seed, eta=config.eta,
        coeffs=config.coeffs, sample_ids=sample_ids, x_init=x,
    )
    for index, (t, s) in enumerate(config.grid.transitions()):
        try:
            step = _transition(
                config, index, x, t, s, denoiser, schedule,
                bank.step(index), sample_ids,
            )
        except QSchedError as error:
            raise SamplingError(error.desc, step=index) from error
        x = step.x_after
        if record:
            trajectory.records.append(step)

    logger.debug("Sampled %d rows with %s over %s", batch, config.kind, config.grid.steps)
    return x, trajectory
