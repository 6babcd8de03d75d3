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

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
import math
from typing import TYPE_CHECKING, Dict, List, Optional, Tuple

import numpy as np

from .errors import DenoiserError, ValidationError

if TYPE_CHECKING:
    from .schedule import NoiseSchedule


@dataclass(kw_only=True, eq=False)
class DenoiserEval():
    epsilon_hat: np.ndarray
    x0_hat: np.ndarray


@dataclass(kw_only=True, frozen=True)
class PreconditionCoeffs():
    c_x: float = 1.0
    c_eps: float = 1.0

    def __post_init__(self):
        for name in ("c_x", "c_eps"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                raise ValidationError(f"{name} must be positive, got {value}")

    @property
    def is_identity(self) -> bool:
        return self.c_x == 1.0 and self.c_eps == 1.0

    def distance_to_identity(self) -> float:
        return math.hypot(self.c_x - 1.0, self.c_eps - 1.0)

    def __str__(self):
        return f'PreconditionCoeffs(c_x={self.c_x!r}, c_eps={self.c_eps!r})'


@dataclass(kw_only=True, frozen=True)
class PtqdParams():
    gamma: float
    delta_mean: Tuple[float, ...]
    delta_std: float

    def __post_init__(self):
        if not math.isfinite(self.gamma):
            raise ValidationError(f"gamma must be finite, got {self.gamma}")
        if not math.isfinite(self.delta_std) or self.delta_std < 0:
            raise ValidationError(
                f"delta_std must be non-negative, got {self.delta_std}"
            )
        object.__setattr__(
            self, "delta_mean", tuple(float(v) for v in self.delta_mean)
        )

    def to_dict(self) -> dict:
        return {
            "gamma": self.gamma,
            "delta_mean": list(self.delta_mean),
            "delta_std": self.delta_std,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PtqdParams":
        try:
            return cls(
                gamma=float(data["gamma"]),
                delta_mean=tuple(float(v) for v in data["delta_mean"]),
                delta_std=float(data["delta_std"]),
            )
        except (KeyError, TypeError) as error:
            raise ValidationError(f"malformed PTQD parameters: {error}")

    @classmethod
    def identity(cls, dim: int) -> "PtqdParams":
        return cls(gamma=0.0, delta_mean=(0.0,) * dim, delta_std=0.0)


@dataclass(kw_only=True, eq=False)
class StepRecord():
    index: int
    t: int
    s_prime: int
    s: int
    x_before: np.ndarray
    x_after: np.ndarray
    # noise estimate as it entered the update (after c_eps or PTQD correction)
    epsilon: np.ndarray
    # injected term std * z, None when the step is deterministic
    noise: Optional[np.ndarray] = None

    def __str__(self):
        return (f'StepRecord(index={self.index}, t={self.t}, '
                f's_prime={self.s_prime}, s={self.s}, '
                f'stochastic={self.noise is not None})')


@dataclass(kw_only=True, eq=False)
class Trajectory():
    kind: str
    seed: int
    eta: float
    coeffs: PreconditionCoeffs
    sample_ids: np.ndarray
    x_init: np.ndarray
    records: List[StepRecord] = field(default_factory=list)

    @property
    def final(self) -> np.ndarray:
        if not self.records:
            return self.x_init
        return self.records[-1].x_after

    @property
    def steps(self) -> List[Tuple[int, int, int]]:
        return [(r.t, r.s_prime, r.s) for r in self.records]

    def __str__(self):
        return (f'Trajectory(kind=\'{self.kind}\', seed={self.seed}, '
                f'eta={self.eta}, samples={len(self.sample_ids)}, '
                f'steps={len(self.records)})')


@dataclass(kw_only=True, eq=False)
class SamplerCoeffs():
    # (t, s_prime, s) per transition, in sampling order
    transitions: List[Tuple[int, int, int]]
    k: np.ndarray
    m: np.ndarray

    def __len__(self):
        return len(self.transitions)


@dataclass(kw_only=True, eq=False)
class ErrorReport():
    delta_x: List[np.ndarray]
    delta_e: List[np.ndarray]
    recursion_residuals: List[float]
    closed_form: np.ndarray
    closed_form_residual: float
    relative_residual: float
    mean_error_norm: float
    error_norm_bound: float

    @property
    def final(self) -> np.ndarray:
        return self.delta_x[-1]

    def to_dict(self) -> dict:
        return {
            "steps": len(self.delta_x),
            "delta_x_norms": [
                float(np.max(np.linalg.norm(d, axis=-1))) for d in self.delta_x
            ],
            "delta_e_norms": [
                float(np.max(np.linalg.norm(d, axis=-1))) for d in self.delta_e
            ],
            "recursion_residuals": self.recursion_residuals,
            "closed_form_residual": self.closed_form_residual,
            "relative_residual": self.relative_residual,
            "mean_error_norm": self.mean_error_norm,
            "error_norm_bound": self.error_norm_bound,
        }


@dataclass(kw_only=True, frozen=True)
class CalibrationContext():
    index: int
    name: str
    slug: str


@dataclass(kw_only=True, frozen=True)
class SurfacePoint():
    c_x: float
    c_eps: float
    tc: float
    iq: float
    jaq: float

    @property
    def coeffs(self) -> PreconditionCoeffs:
        return PreconditionCoeffs(c_x=self.c_x, c_eps=self.c_eps)

    def to_dict(self) -> dict:
        return {
            "c_x": self.c_x, "c_eps": self.c_eps,
            "tc": self.tc, "iq": self.iq, "jaq": self.jaq,
        }


@dataclass(kw_only=True, eq=False)
class CalibrationResult():
    best_coeffs: PreconditionCoeffs
    surface: List[SurfacePoint]
    contexts: List[CalibrationContext]
    seed: int
    k: float
    ablation: Dict[str, SurfacePoint] = field(default_factory=dict)
    objectives: Dict[str, SurfacePoint] = field(default_factory=dict)

    def lookup(self, c_x: float, c_eps: float) -> Optional[SurfacePoint]:
        for point in self.surface:
            if point.c_x == c_x and point.c_eps == c_eps:
                return point
        return None

    @property
    def best(self) -> SurfacePoint:
        point = self.lookup(self.best_coeffs.c_x, self.best_coeffs.c_eps)
        assert point is not None
        return point

    def to_dict(self) -> dict:
        result = {
            "best": {
                "c_x": self.best_coeffs.c_x,
                "c_eps": self.best_coeffs.c_eps,
            },
            "k": self.k,
            "seed": self.seed,
            "contexts": [c.name for c in self.contexts],
            "surface": [p.to_dict() for p in self.surface],
        }
        if self.ablation:
            result["ablation"] = {
                mode: point.to_dict() for mode, point in self.ablation.items()
            }
        if self.objectives:
            result["objectives"] = {
                name: point.to_dict() for name, point in self.objectives.items()
            }
        return result


class Denoiser(ABC):
    """An epsilon-prediction network evaluated on a batch of rows."""

    @property
    @abstractmethod
    def dim(self) -> int:
        pass

    @abstractmethod
    def predict(
        self,
        x_t: np.ndarray,
        t: np.ndarray,
        sample_ids: np.ndarray
    ) -> np.ndarray:
        pass

    def __call__(
        self,
        x_t: np.ndarray,
        t,
        sample_ids: Optional[np.ndarray] = None
    ) -> np.ndarray:
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        if x_t.shape[1] != self.dim:
            raise DenoiserError(
                f"expected {self.dim}-dimensional rows, got {x_t.shape[1]}"
            )
        if not np.all(np.isfinite(x_t)):
            raise DenoiserError("non-finite input state")
        timesteps = np.broadcast_to(
            np.asarray(t, dtype=np.int64), (x_t.shape[0],)
        )
        if sample_ids is None:
            sample_ids = np.arange(x_t.shape[0])
        return self.predict(x_t, timesteps, np.asarray(sample_ids))

    def evaluate(
        self,
        schedule: "NoiseSchedule",
        x_t: np.ndarray,
        t,
        sample_ids: Optional[np.ndarray] = None
    ) -> DenoiserEval:
        x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
        epsilon = self(x_t, t, sample_ids)
        timesteps = np.broadcast_to(np.asarray(t), (x_t.shape[0],))
        if np.any(timesteps < 1):
            raise DenoiserError("the clean sample is undefined at t = 0")
        alpha = schedule.alphas[timesteps][:, None]
        sigma = schedule.sigmas[timesteps][:, None]
        return DenoiserEval(
            epsilon_hat=epsilon, x0_hat=(x_t - sigma * epsilon) / alpha
        )
