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
Discrete variance-preserving noise schedule and few-step timestep grids.

Convention: x_t = alpha_t * x_0 + sigma_t * eps with alpha_t = sqrt(abar_t)
and sigma_t = sqrt(1 - abar_t). Timestep 0 is the clean endpoint
(abar_0 = 1), every later timestep uses the cumulative product of (1 - beta).
"""
import csv
from dataclasses import dataclass
import logging
import math
from pathlib import Path
from typing import List, Tuple

import numpy as np

from .errors import ArtifactError, OrderingError, ValidationError

logger = logging.getLogger("Schedule")

# slack for (1 - eta) * s landing a hair below an integer
_FLOOR_SLACK = 1e-9


@dataclass(frozen=True, eq=False)
class NoiseSchedule():
    n_train: int
    betas: np.ndarray
    alpha_bars: np.ndarray
    alphas: np.ndarray
    sigmas: np.ndarray

    def signal(self, t: int) -> float:
        return float(self.alphas[t])

    def noise(self, t: int) -> float:
        return float(self.sigmas[t])

    def alpha_ratio_sq(self, s: int, s_prime: int) -> float:
        """alpha_s^2 / alpha_{s'}^2, shared by every stochastic step."""
        return float((self.alphas[s] / self.alphas[s_prime]) ** 2)

    def rows(self) -> List[Tuple[int, float, float, float, float]]:
        return [
            (t, float(self.betas[t]), float(self.alpha_bars[t]),
             float(self.alphas[t]), float(self.sigmas[t]))
            for t in range(self.n_train)
        ]

    def __str__(self):
        return (f'NoiseSchedule(n_train={self.n_train}, '
                f'beta0={self.betas[0]!r}, betaN={self.betas[-1]!r})')


@dataclass(frozen=True)
class TimestepGrid():
    steps: Tuple[int, ...]

    def __post_init__(self):
        steps = tuple(int(t) for t in self.steps)
        object.__setattr__(self, "steps", steps)
        if len(steps) < 2 or steps[-1] != 0:
            raise ValidationError(f"grid must end at timestep 0: {steps}")
        if any(a <= b for a, b in zip(steps, steps[1:])):
            raise ValidationError(f"grid must be strictly decreasing: {steps}")

    @property
    def n_steps(self) -> int:
        return len(self.steps) - 1

    def transitions(self) -> List[Tuple[int, int]]:
        return list(zip(self.steps, self.steps[1:]))

    def check(self, schedule: NoiseSchedule) -> None:
        if self.steps[0] >= schedule.n_train:
            raise ValidationError(
                f"grid starts at {self.steps[0]} beyond n_train={schedule.n_train}"
            )


def build_schedule(beta0: float, betaN: float, n_train: int) -> NoiseSchedule:
    """Scaled-linear schedule: sqrt(beta) interpolates linearly in t."""
    if not (0 < beta0 <= betaN < 1):
        raise ValidationError(
            f"need 0 < beta0 <= betaN < 1, got beta0={beta0}, betaN={betaN}"
        )
    if int(n_train) != n_train or n_train < 2:
        raise ValidationError(f"n_train must be an integer >= 2, got {n_train}")
    n_train = int(n_train)

    fraction = np.arange(n_train, dtype=np.float64) / (n_train - 1)
    betas = (math.sqrt(beta0) + fraction * (math.sqrt(betaN) - math.sqrt(beta0))) ** 2
    # pin the endpoints against rounding in the square/sqrt round trip
    betas[0] = beta0
    betas[-1] = betaN

    alpha_bars = np.cumprod(1.0 - betas)
    alpha_bars[0] = 1.0
    alphas = np.sqrt(alpha_bars)
    sigmas = np.sqrt(1.0 - alpha_bars)

    for table in (betas, alpha_bars, alphas, sigmas):
        table.setflags(write=False)

    return NoiseSchedule(
        n_train=n_train,
        betas=betas,
        alpha_bars=alpha_bars,
        alphas=alphas,
        sigmas=sigmas,
    )


def few_step_grid(schedule: NoiseSchedule, n_steps: int) -> TimestepGrid:
    """
    Uniform grid t_i = floor((n_train - 1) * (N - i) / N), i = 0..N.

    N = n_train cannot fit N + 1 distinct timesteps and yields the full
    grid n_train - 1, ..., 0 instead.
    """
    if int(n_steps) != n_steps or not 1 <= n_steps <= schedule.n_train:
        raise ValidationError(
            f"n_steps must lie in [1, {schedule.n_train}], got {n_steps}"
        )
    n_steps = int(n_steps)
    top = schedule.n_train - 1

    if n_steps >= top:
        return TimestepGrid(tuple(range(top, -1, -1)))

    return TimestepGrid(tuple(
        top * (n_steps - i) // n_steps for i in range(n_steps + 1)
    ))


def sub_timestep(s: int, eta: float) -> int:
    """s' = floor((1 - eta) * s)."""
    if not (0.0 <= eta < 1.0):
        raise ValidationError(f"eta must lie in [0, 1), got {eta}")
    if s < 0:
        raise ValidationError(f"timestep must be non-negative, got {s}")
    if eta == 0.0:
        return int(s)
    return min(int(s), int(math.floor((1.0 - eta) * s + _FLOOR_SLACK)))


def eta_noise_std(schedule: NoiseSchedule, s: int, s_prime: int) -> float:
    """Std of the noise re-injected when moving from s' back up to s."""
    if s_prime > s:
        raise OrderingError(f"sub-timestep {s_prime} exceeds timestep {s}")
    if s_prime == s:
        return 0.0
    return math.sqrt(1.0 - schedule.alpha_ratio_sq(s, s_prime))


def write_schedule_csv(schedule: NoiseSchedule, path: Path) -> None:
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["t", "beta", "alpha_bar", "alpha", "sigma"])
            for t, beta, alpha_bar, alpha, sigma in schedule.rows():
                writer.writerow([t, repr(beta), repr(alpha_bar), repr(alpha), repr(sigma)])
    except OSError as error:
        raise ArtifactError(f"cannot write {path}: {error}")
    logger.info("Schedule written to %s", path)
