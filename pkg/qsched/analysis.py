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
Quantization error propagation through the sampler, Fréchet distances
between moment-matched Gaussians and Elo aggregation of pairwise votes.

Sign convention: dx_t = x_t - x_t^Q and dE = E^Q - E, each network evaluated
on its own trajectory. A TCD step then satisfies dx_s = k dx_t + m dE with
k = a_s / a_t and m = a_s (sigma_t / a_t - sigma_s' / a_s'), both positive.
"""
from dataclasses import dataclass
import logging
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from .denoiser import GaussianMixture
from .errors import ComparabilityError, ValidationError
from .model import (
    Denoiser,
    ErrorReport,
    PreconditionCoeffs,
    PtqdParams,
    SamplerCoeffs,
    Trajectory,
)
from .sampler import CONSISTENCY_KINDS, SamplerConfig, sample_trajectory
from .schedule import NoiseSchedule, TimestepGrid, sub_timestep
from .streams import NoiseBank

logger = logging.getLogger("Analysis")

# eigenvalues above -tolerance * scale are clipped to zero
PSD_TOLERANCE = 1e-10

TIE = "tie"


def sampler_coeffs(
    schedule: NoiseSchedule,
    grid: TimestepGrid,
    eta: float
) -> SamplerCoeffs:
    grid.check(schedule)
    transitions, k, m = [], [], []
    for t, s in grid.transitions():
        s_prime = sub_timestep(s, eta)
        a_t, sg_t = schedule.alphas[t], schedule.sigmas[t]
        a_s = schedule.alphas[s]
        a_sp, sg_sp = schedule.alphas[s_prime], schedule.sigmas[s_prime]
        transitions.append((t, s_prime, s))
        k.append(a_s / a_t)
        m.append(a_s * (sg_t / a_t - sg_sp / a_sp))

    coeffs = SamplerCoeffs(
        transitions=transitions, k=np.array(k), m=np.array(m)
    )
    if np.any(coeffs.k <= 0) or np.any(coeffs.m <= 0):
        raise ValidationError(
            f"non-positive sampler coefficients on {grid.steps} at eta={eta}"
        )
    return coeffs


def propagation_weights(coeffs: SamplerCoeffs) -> np.ndarray:
    """Weight of each step's dE in dx_0: m_j times the product of later k."""
    later = np.append(np.cumprod(coeffs.k[::-1])[::-1][1:], 1.0)
    return coeffs.m * later


def propagate_error(
    coeffs: SamplerCoeffs,
    delta_e: Sequence[np.ndarray]
) -> np.ndarray:
    """Closed-form dx_0 from per-step output differences, assuming dx_N = 0."""
    if len(delta_e) != len(coeffs):
        raise ValidationError(
            f"need one output difference per step ({len(coeffs)}), got {len(delta_e)}"
        )
    weights = propagation_weights(coeffs)
    total = np.zeros_like(np.asarray(delta_e[0], dtype=np.float64))
    for weight, delta in zip(weights, delta_e):
        total = total + weight * np.asarray(delta, dtype=np.float64)
    return total


def expected_error_bound(
    coeffs: SamplerCoeffs,
    delta_e: Sequence[np.ndarray]
) -> float:
    """Mean over samples of sum_j w_j |dE_j|, an upper bound on mean |dx_0|."""
    weights = propagation_weights(coeffs)
    norms = [np.linalg.norm(np.atleast_2d(d), axis=-1) for d in delta_e]
    return float(np.mean(sum(w * n for w, n in zip(weights, norms))))


def _row_norm(values: np.ndarray) -> float:
    return float(np.max(np.linalg.norm(np.atleast_2d(values), axis=-1)))


def _check_paired(fp_traj: Trajectory, q_traj: Trajectory, coeffs: SamplerCoeffs):
    kinds = (fp_traj.kind, q_traj.kind)
    if any(kind in CONSISTENCY_KINDS for kind in kinds):
        raise ComparabilityError("error recursion is defined for TCD-family samplers")
    if fp_traj.seed != q_traj.seed or fp_traj.eta != q_traj.eta:
        raise ComparabilityError("trajectories use different seeds or eta")
    # PTQD injects its own std, so noise only cancels when nothing is injected
    if "ptqd" in kinds and fp_traj.eta > 0.0:
        raise ComparabilityError("PTQD trajectories are only comparable at eta = 0")
    if fp_traj.steps != q_traj.steps or fp_traj.steps != coeffs.transitions:
        raise ComparabilityError("trajectories and coefficients use different grids")
    if not np.array_equal(fp_traj.sample_ids, q_traj.sample_ids):
        raise ComparabilityError("trajectories cover different samples")
    if not np.array_equal(fp_traj.x_init, q_traj.x_init):
        raise ComparabilityError("trajectories start from different states")
    if fp_traj.coeffs.c_x != q_traj.coeffs.c_x:
        raise ComparabilityError("trajectories scale x_t differently")


def measure_error(
    fp_traj: Trajectory,
    q_traj: Trajectory,
    coeffs: SamplerCoeffs
) -> ErrorReport:
    """
    Check the per-step recursion and the closed form against two paired runs.

    Both runs must share the seed, eta and initial states so that injected
    noise cancels. A common c_x scales every k.
    """
    _check_paired(fp_traj, q_traj, coeffs)
    if not fp_traj.records or not q_traj.records:
        raise ComparabilityError("trajectories were sampled without step records")
    scale_x = fp_traj.coeffs.c_x
    if scale_x != 1.0:
        coeffs = SamplerCoeffs(
            transitions=coeffs.transitions, k=scale_x * coeffs.k, m=coeffs.m
        )

    previous = fp_traj.x_init - q_traj.x_init
    delta_x, delta_e, residuals = [], [], []
    magnitude = max(1.0, _row_norm(fp_traj.x_init))
    for j, (fp, q) in enumerate(zip(fp_traj.records, q_traj.records)):
        current = fp.x_after - q.x_after
        error = q.epsilon - fp.epsilon
        predicted = coeffs.k[j] * previous + coeffs.m[j] * error
        residuals.append(_row_norm(current - predicted))
        delta_x.append(current)
        delta_e.append(error)
        magnitude = max(magnitude, _row_norm(fp.x_after), _row_norm(q.x_after))
        previous = current

    closed_form = propagate_error(coeffs, delta_e)
    closed_residual = _row_norm(delta_x[-1] - closed_form)

    report = ErrorReport(
        delta_x=delta_x,
        delta_e=delta_e,
        recursion_residuals=residuals,
        closed_form=closed_form,
        closed_form_residual=closed_residual,
        relative_residual=max(residuals + [closed_residual]) / magnitude,
        mean_error_norm=float(np.mean(np.linalg.norm(delta_x[-1], axis=-1))),
        error_norm_bound=expected_error_bound(coeffs, delta_e),
    )
    logger.debug(
        "Error recursion over %d steps: relative residual %.3e",
        len(residuals), report.relative_residual
    )
    return report


def moments(samples: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    n, d = samples.shape
    if n < d + 1:
        raise ValidationError(
            f"need at least {d + 1} samples for {d}-dimensional moments, got {n}"
        )
    return samples.mean(axis=0), np.atleast_2d(np.cov(samples, rowvar=False))


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    values, vectors = linalg.eigh(matrix)
    floor = -PSD_TOLERANCE * max(1.0, float(np.max(np.abs(values))))
    if np.any(values < floor):
        raise ValidationError(
            f"matrix is not positive semi-definite (eigenvalue {values.min():.3e})"
        )
    return (vectors * np.sqrt(np.clip(values, 0.0, None))) @ vectors.T


def trace_sqrt_product(sigma_a: np.ndarray, sigma_b: np.ndarray) -> float:
    """tr sqrt(A B) = tr sqrt(sqrt(A) B sqrt(A)), whose argument is symmetric."""
    root = _psd_sqrt(sigma_a)
    middle = root @ sigma_b @ root
    return float(np.trace(_psd_sqrt((middle + middle.T) / 2.0)))


def frechet_from_moments(
    mu_a: np.ndarray,
    sigma_a: np.ndarray,
    mu_b: np.ndarray,
    sigma_b: np.ndarray
) -> float:
    """Squared Fréchet distance between N(mu_a, sigma_a) and N(mu_b, sigma_b)."""
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    sigma_a, sigma_b = np.atleast_2d(sigma_a), np.atleast_2d(sigma_b)
    if mu_a.shape != mu_b.shape or sigma_a.shape != sigma_b.shape:
        raise ValidationError("moment shapes differ")
    diff = mu_a - mu_b
    value = float(
        diff @ diff + np.trace(sigma_a) + np.trace(sigma_b)
        - 2.0 * trace_sqrt_product(sigma_a, sigma_b)
    )
    return max(value, 0.0)


def frechet_distance(samples_a: np.ndarray, samples_b: np.ndarray) -> float:
    return frechet_from_moments(*moments(samples_a), *moments(samples_b))


def frechet_vs_gmm(samples: np.ndarray, gmm: GaussianMixture) -> float:
    return frechet_from_moments(*moments(samples), gmm.mean(), gmm.covariance())


def expected_score(rating: float, opponent: float) -> float:
    return 1.0 / (1.0 + 10.0 ** ((opponent - rating) / 400.0))


def elo_ratings(
    records: Iterable[Tuple[str, str, str]],
    k_factor: float = 32.0,
    initial: float = 1000.0,
    players: Optional[Iterable[str]] = None
) -> Dict[str, float]:
    """
    Sequential Elo updates in record order. The winner field names one of
    the two players or is "tie" for half a point each.
    """
    if not k_factor > 0:
        raise ValidationError(f"k_factor must be positive, got {k_factor}")

    ratings: Dict[str, float] = {}
    for player in players or ():
        ratings[player] = float(initial)

    for a, b, winner in records:
        if a == b:
            raise ValidationError(f"player {a} cannot play against itself")
        if winner == a:
            score = 1.0
        elif winner == b:
            score = 0.0
        elif winner == TIE:
            score = 0.5
        else:
            raise ValidationError(f"winner {winner!r} is neither {a!r}, {b!r} nor tie")

        ra = ratings.setdefault(a, float(initial))
        rb = ratings.setdefault(b, float(initial))
        change = k_factor * (score - expected_score(ra, rb))
        ratings[a] = ra + change
        ratings[b] = rb - change

    return ratings


@dataclass(frozen=True, kw_only=True)
class SweepRow():
    eta: float
    fp: float
    naive: float
    ptqd: float
    qsched: float

    def to_dict(self) -> dict:
        return {
            "eta": self.eta, "fp": self.fp, "naive": self.naive,
            "ptqd": self.ptqd, "qsched": self.qsched,
        }


def stochasticity_sweep(
    etas: Sequence[float],
    grid: TimestepGrid,
    fp: Denoiser,
    quantized: Denoiser,
    ptqd: PtqdParams,
    coeffs: PreconditionCoeffs,
    gmm: GaussianMixture,
    schedule: NoiseSchedule,
    batch: int,
    seed: int
) -> List[SweepRow]:
    """Fréchet distance to the mixture for four samplers at each eta."""
    sample_ids = np.arange(batch)
    rows = []
    for eta in etas:
        bank = NoiseBank(seed, sample_ids, fp.dim)
        runs = {
            "fp": (SamplerConfig(kind="tcd", grid=grid, eta=eta, seed=seed), fp),
            "naive": (SamplerConfig(kind="tcd", grid=grid, eta=eta, seed=seed), quantized),
            "ptqd": (SamplerConfig(
                kind="ptqd", grid=grid, eta=eta, ptqd=ptqd, seed=seed
            ), quantized),
            "qsched": (SamplerConfig(
                kind="qsched", grid=grid, eta=eta, coeffs=coeffs, seed=seed
            ), quantized),
        }
        scores = {}
        for name, (config, denoiser) in runs.items():
            samples, _ = sample_trajectory(
                config, denoiser, schedule, batch, bank=bank, record=False
            )
            scores[name] = frechet_vs_gmm(samples, gmm)
        row = SweepRow(eta=float(eta), **scores)
        logger.info(
            "eta=%.2f: fp %.5f naive %.5f ptqd %.5f qsched %.5f",
            eta, row.fp, row.naive, row.ptqd, row.qsched
        )
        rows.append(row)
    return rows


def frechet_table(samples: Dict[str, np.ndarray], gmm: GaussianMixture) -> Dict[str, float]:
    return {name: frechet_vs_gmm(values, gmm) for name, values in samples.items()}
