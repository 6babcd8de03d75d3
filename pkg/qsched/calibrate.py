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
Calibration of the (c_x, c_eps) coefficients by grid search on
JAQ = TC + k * IQ, higher being better.
"""
import asyncio
from dataclasses import dataclass, replace
import json
import logging
import math
from operator import attrgetter
from pathlib import Path
import re
import tempfile
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from unidecode import unidecode

from .artifacts import write_json, write_samples_csv
from .database import SurfaceCache
from .denoiser import GaussianMixture
from .errors import QSchedError, ScorerError, ValidationError
from .model import (
    CalibrationContext,
    CalibrationResult,
    Denoiser,
    PreconditionCoeffs,
    SurfacePoint,
)
from .sampler import SamplerConfig, sample_trajectory
from .schedule import NoiseSchedule
from .streams import NoiseBank

logger = logging.getLogger("Calibration")

EXTERNAL = "external"

DEFAULT_CONTEXTS = (
    "A café terrace at dawn",
    "Snow over the Matterhorn",
    "Crème brûlée, close-up",
    "Neon street in Tōkyō at night",
    "Portrait of an old fisherman",
)

# coefficient subsets reported by the ablation
ABLATION_MODES = ("c_eps_only", "c_x_only", "joint")

# rankings compared by the objective ablation
OBJECTIVES: Dict[str, Callable[[SurfacePoint], float]] = {
    "tc_only": attrgetter("tc"),
    "iq_only": attrgetter("iq"),
    "jaq": attrgetter("jaq"),
}


def tc_gmm_loglik(samples: np.ndarray, gmm: GaussianMixture) -> float:
    """Mean log-density of the samples under the target mixture."""
    return float(np.mean(gmm.log_density(samples)))


def iq_mode_sharpness(samples: np.ndarray, gmm: GaussianMixture) -> float:
    """Minus the mean squared distance to the nearest component mean, per dimension."""
    samples = np.atleast_2d(samples)
    distances = np.sum((samples[:, None, :] - gmm.means[None, :, :]) ** 2, axis=-1)
    return float(-np.mean(np.min(distances, axis=1)) / gmm.dim)


TC_SCORERS: Dict[str, Callable[[np.ndarray, GaussianMixture], float]] = {
    "gmm_loglik": tc_gmm_loglik,
}

IQ_SCORERS: Dict[str, Callable[[np.ndarray, GaussianMixture], float]] = {
    "mode_sharpness": iq_mode_sharpness,
}


@dataclass(frozen=True, kw_only=True)
class JAQConfig():
    k: float = 2.0
    tc: str = "gmm_loglik"
    iq: str = "mode_sharpness"
    # argv prefix of the external scorer; two paths are appended
    command: Optional[Tuple[str, ...]] = None
    timeout: float = 60.0

    def __post_init__(self):
        if not (math.isfinite(self.k) and self.k >= 0):
            raise ValidationError(f"k must be a non-negative number, got {self.k}")
        if self.tc not in TC_SCORERS and self.tc != EXTERNAL:
            raise ValidationError(f"unknown TC scorer: {self.tc}")
        if self.iq not in IQ_SCORERS and self.iq != EXTERNAL:
            raise ValidationError(f"unknown IQ scorer: {self.iq}")
        if self.uses_external and not self.command:
            raise ValidationError("the external scorer needs a command")
        if not self.timeout > 0:
            raise ValidationError(f"scorer timeout must be positive: {self.timeout}")

    @property
    def uses_external(self) -> bool:
        return EXTERNAL in (self.tc, self.iq)


def slugify(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", unidecode(name).lower()).strip("-")


def make_contexts(names: Sequence[str]) -> List[CalibrationContext]:
    if not names:
        raise ValidationError("calibration needs at least one context")
    contexts, seen = [], set()
    for index, name in enumerate(names):
        slug = slugify(name) or f"context-{index}"
        if slug in seen:
            slug = f"{slug}-{index}"
        seen.add(slug)
        contexts.append(CalibrationContext(index=index, name=name, slug=slug))
    return contexts


async def _run_command(argv: Sequence[str], timeout: float) -> Tuple[int, bytes]:
    process = await asyncio.create_subprocess_exec(
        *argv,
        stdout=asyncio.subprocess.PIPE,
        stderr=asyncio.subprocess.PIPE,
    )
    try:
        _, stderr = await asyncio.wait_for(process.communicate(), timeout)
    except asyncio.TimeoutError:
        process.kill()
        await process.wait()
        raise
    return process.returncode, stderr


def _score_value(scores: dict, key: str) -> float:
    value = scores.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScorerError(EXTERNAL, f"scores file lacks a numeric {key!r}")
    if not math.isfinite(value):
        raise ScorerError(EXTERNAL, f"non-finite {key!r} score")
    return float(value)


def external_scorer(
    samples_path: Path,
    context_path: Path,
    command: Sequence[str],
    timeout: float = 60.0
) -> Tuple[float, float]:
    """
    Run ``command samples.csv context.json`` and read {"tc", "iq"} from the
    file named by the context's ``scores_path``.
    """
    context_path = Path(context_path)
    try:
        with open(context_path, "r", encoding="utf-8") as f:
            scores_path = Path(json.load(f)["scores_path"])
    except (OSError, KeyError, TypeError, json.JSONDecodeError) as error:
        raise ScorerError(EXTERNAL, f"context file has no scores_path: {error}")
    if not scores_path.is_absolute():
        scores_path = context_path.parent / scores_path

    argv = [*command, str(samples_path), str(context_path)]
    try:
        code, stderr = asyncio.run(_run_command(argv, timeout))
    except asyncio.TimeoutError:
        raise ScorerError(EXTERNAL, f"{command[0]} timed out after {timeout}s")
    except OSError as error:
        raise ScorerError(EXTERNAL, f"cannot run {command[0]}: {error}")

    if code != 0:
        tail = stderr.decode("utf-8", "replace").strip()[-500:]
        raise ScorerError(EXTERNAL, f"{command[0]} exited with {code}: {tail}")

    try:
        with open(scores_path, "r", encoding="utf-8") as f:
            scores = json.load(f)
    except FileNotFoundError:
        raise ScorerError(EXTERNAL, f"{command[0]} wrote no scores to {scores_path}")
    except (OSError, json.JSONDecodeError) as error:
        raise ScorerError(EXTERNAL, f"malformed scores file: {error}")
    if not isinstance(scores, dict):
        raise ScorerError(EXTERNAL, "scores file must hold a JSON object")

    return _score_value(scores, "tc"), _score_value(scores, "iq")


def _builtin(
    scorers: Dict[str, Callable],
    name: str,
    samples: np.ndarray,
    gmm: Optional[GaussianMixture]
) -> float:
    if gmm is None:
        raise ScorerError(name, "the built-in scorers need the target mixture")
    try:
        value = scorers[name](samples, gmm)
    except (ValueError, FloatingPointError) as error:
        raise ScorerError(name, str(error))
    if not math.isfinite(value):
        raise ScorerError(name, "non-finite score")
    return value


def _external_scores(
    samples: np.ndarray,
    context: CalibrationContext,
    cfg: JAQConfig
) -> Tuple[float, float]:
    with tempfile.TemporaryDirectory(prefix="qsched-") as workdir:
        root = Path(workdir)
        samples_path = root / f"{context.slug}.csv"
        context_path = root / f"{context.slug}.json"
        write_samples_csv(samples_path, samples)
        write_json(context_path, {
            "index": context.index,
            "name": context.name,
            "slug": context.slug,
            "samples": samples.shape[0],
            "dim": samples.shape[1],
            "scores_path": f"{context.slug}.scores.json",
        })
        return external_scorer(samples_path, context_path, cfg.command, cfg.timeout)


def score_samples(
    samples: np.ndarray,
    context: CalibrationContext,
    cfg: JAQConfig,
    gmm: Optional[GaussianMixture] = None
) -> Tuple[float, float]:
    samples = np.atleast_2d(samples)
    if samples.shape[0] < 1:
        raise ValidationError("scoring needs at least one sample")

    external = _external_scores(samples, context, cfg) if cfg.uses_external else None
    tc = external[0] if cfg.tc == EXTERNAL else _builtin(TC_SCORERS, cfg.tc, samples, gmm)
    iq = external[1] if cfg.iq == EXTERNAL else _builtin(IQ_SCORERS, cfg.iq, samples, gmm)
    return tc, iq


def jaq_score(
    samples: np.ndarray,
    context: CalibrationContext,
    cfg: JAQConfig,
    gmm: Optional[GaussianMixture] = None
) -> Tuple[float, float, float]:
    tc, iq = score_samples(samples, context, cfg, gmm)
    return tc, iq, tc + cfg.k * iq


@dataclass(frozen=True)
class CoefficientGrid():
    c_x: Tuple[float, ...]
    c_eps: Tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "c_x", tuple(float(v) for v in self.c_x))
        object.__setattr__(self, "c_eps", tuple(float(v) for v in self.c_eps))
        if not self.c_x or not self.c_eps:
            raise ValidationError("coefficient grid is empty")
        if any(not (math.isfinite(v) and v > 0) for v in self.c_x + self.c_eps):
            raise ValidationError("coefficients must be positive")

    @classmethod
    def from_range(
        cls,
        low: float,
        high: float,
        step: float,
        decimals: int = 6
    ) -> "CoefficientGrid":
        """Both axes low, low + step, ..., high, rounded to ``decimals``."""
        if not step > 0 or high < low:
            raise ValidationError(
                f"need low <= high and a positive step, got {low}, {high}, {step}"
            )
        count = int(round((high - low) / step)) + 1
        values = tuple(round(low + i * step, decimals) for i in range(count))
        return cls(values, values)

    @classmethod
    def singleton(cls, c_x: float = 1.0, c_eps: float = 1.0) -> "CoefficientGrid":
        return cls((c_x,), (c_eps,))

    def points(self) -> List[Tuple[float, float]]:
        return [(cx, ce) for cx in self.c_x for ce in self.c_eps]

    @property
    def contains_identity(self) -> bool:
        return 1.0 in self.c_x and 1.0 in self.c_eps

    def __len__(self):
        return len(self.c_x) * len(self.c_eps)


def select_best(
    surface: Sequence[SurfacePoint],
    objective: Callable[[SurfacePoint], float] = attrgetter("jaq")
) -> SurfacePoint:
    if not surface:
        raise ValidationError("cannot select from an empty surface")
    # highest objective, then closest to (1, 1), then lexicographic
    return min(surface, key=lambda p: (
        -objective(p), p.coeffs.distance_to_identity(), p.c_x, p.c_eps
    ))


def ablation_summary(surface: Sequence[SurfacePoint]) -> Dict[str, SurfacePoint]:
    """Best point when only c_eps, only c_x, or both may leave 1."""
    subsets = dict(zip(ABLATION_MODES, (
        [p for p in surface if p.c_x == 1.0],
        [p for p in surface if p.c_eps == 1.0],
        list(surface),
    )))
    return {mode: select_best(points) for mode, points in subsets.items() if points}


def objective_summary(surface: Sequence[SurfacePoint]) -> Dict[str, SurfacePoint]:
    """Best point when the search ranks by TC alone, IQ alone, or JAQ."""
    return {name: select_best(surface, score) for name, score in OBJECTIVES.items()}


def _calibration_config(base: SamplerConfig, coeffs: PreconditionCoeffs) -> SamplerConfig:
    match base.kind:
        case "tcd" | "qsched":
            kind = "qsched"
        case "lcm" | "qsched_lcm":
            kind = "qsched_lcm"
        case _:
            raise ValidationError(f"{base.kind} sampling has no coefficients to calibrate")
    return replace(base, kind=kind, coeffs=coeffs)


def grid_search(
    grid: CoefficientGrid,
    base: SamplerConfig,
    denoiser: Denoiser,
    schedule: NoiseSchedule,
    jaq: JAQConfig,
    contexts: Sequence[CalibrationContext],
    batch: int,
    gmm: Optional[GaussianMixture] = None,
    cache: Optional[SurfaceCache] = None,
    run_key: str = "",
    require_identity: bool = True,
    ablation: bool = False,
) -> CalibrationResult:
    """
    Score every grid point on the same samples and keep the best.

    Context c owns sample indices [c * batch, (c + 1) * batch); its initial
    states and step noise are drawn once and shared by all grid points.
    TC and IQ are averaged over contexts before forming JAQ.
    """
    if batch < 1:
        raise ValidationError(f"batch must be >= 1, got {batch}")
    if not contexts:
        raise ValidationError("calibration needs at least one context")
    if require_identity and not grid.contains_identity:
        raise ValidationError("coefficient grid must contain (1, 1)")
    _calibration_config(base, PreconditionCoeffs())

    banks = [
        NoiseBank(
            base.seed,
            np.arange(c.index * batch, (c.index + 1) * batch),
            denoiser.dim,
        )
        for c in contexts
    ]

    logger.info(
        "Calibrating %d grid points over %d contexts of %d samples",
        len(grid), len(contexts), batch
    )
    surface = []
    for c_x, c_eps in grid.points():
        cached = None if cache is None else cache.get(run_key, c_x, c_eps)
        if cached is None:
            config = _calibration_config(base, PreconditionCoeffs(c_x=c_x, c_eps=c_eps))
            tcs, iqs = [], []
            for context, bank in zip(contexts, banks):
                try:
                    samples, _ = sample_trajectory(
                        config, denoiser, schedule, batch,
                        first_index=context.index * batch, bank=bank, record=False,
                    )
                except QSchedError:
                    logger.error("Sampling failed at (%r, %r)", c_x, c_eps)
                    raise
                tc, iq = score_samples(samples, context, jaq, gmm)
                tcs.append(tc)
                iqs.append(iq)
            tc, iq = math.fsum(tcs) / len(tcs), math.fsum(iqs) / len(iqs)
            if cache is not None:
                cache.put(run_key, c_x, c_eps, tc, iq)
        else:
            tc, iq = cached

        point = SurfacePoint(c_x=c_x, c_eps=c_eps, tc=tc, iq=iq, jaq=tc + jaq.k * iq)
        logger.debug(
            "(%.4f, %.4f): tc %.6f iq %.6f jaq %.6f",
            c_x, c_eps, point.tc, point.iq, point.jaq
        )
        surface.append(point)

    best = select_best(surface)
    logger.info(
        "Best coefficients c_x=%r c_eps=%r with JAQ %.6f",
        best.c_x, best.c_eps, best.jaq
    )
    return CalibrationResult(
        best_coeffs=best.coeffs,
        surface=surface,
        contexts=list(contexts),
        seed=base.seed,
        k=jaq.k,
        ablation=ablation_summary(surface) if ablation else {},
        objectives=objective_summary(surface) if ablation else {},
    )
