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
Symmetric per-tensor fake quantization and the PTQD linear error model.
"""
from dataclasses import dataclass
import logging
from typing import Optional, Sequence, Tuple

import numpy as np

from .denoiser import GaussianMixture, MLPDenoiser
from .errors import (
    DegenerateCalibrationError,
    QuantizationError,
    ValidationError,
)
from .model import Denoiser, PtqdParams
from .schedule import NoiseSchedule
from .streams import keyed_generator

logger = logging.getLogger("Quantization")

WEIGHT_BITS = range(2, 9)
ACT_BITS = range(4, 17)


@dataclass(frozen=True, kw_only=True)
class QuantConfig():
    weight_bits: Optional[int] = None
    act_bits: Optional[int] = None

    def __post_init__(self):
        if self.weight_bits is not None and self.weight_bits not in WEIGHT_BITS:
            raise ValidationError(
                f"weight_bits must lie in [2, 8], got {self.weight_bits}"
            )
        if self.act_bits is not None and self.act_bits not in ACT_BITS:
            raise ValidationError(
                f"act_bits must lie in [4, 16], got {self.act_bits}"
            )

    @property
    def label(self) -> str:
        weights = "FP" if self.weight_bits is None else self.weight_bits
        acts = "FP" if self.act_bits is None else self.act_bits
        return f"W{weights}A{acts}"

    def to_dict(self) -> dict:
        return {"weight_bits": self.weight_bits, "act_bits": self.act_bits}


@dataclass(frozen=True, eq=False)
class CalibrationStates():
    x: np.ndarray
    t: np.ndarray

    def __len__(self):
        return self.x.shape[0]


def _levels(bits: int) -> Tuple[int, int]:
    return -2 ** (bits - 1), 2 ** (bits - 1) - 1


def tensor_scale(values: np.ndarray, bits: int) -> float:
    """Step size max|v| / (2^(bits-1) - 1); an all-zero tensor keeps 1."""
    peak = float(np.max(np.abs(values))) if np.size(values) else 0.0
    if peak == 0.0:
        return 1.0
    return peak / _levels(bits)[1]


def fake_quantize(values: np.ndarray, bits: int, scale: float) -> np.ndarray:
    low, high = _levels(bits)
    return np.clip(np.round(values / scale), low, high) * scale


def quantize_tensor(values: np.ndarray, bits: int) -> np.ndarray:
    if bits < 2:
        raise ValidationError(f"need at least 2 bits, got {bits}")
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise QuantizationError("cannot quantize non-finite values")
    return fake_quantize(values, bits, tensor_scale(values, bits))


class QuantizedDenoiser(Denoiser):
    """
    An MLP with fake-quantized weights and, optionally, fake-quantized
    hidden activations using fixed per-layer ranges.
    """

    def __init__(
        self,
        net: MLPDenoiser,
        cfg: QuantConfig,
        act_scales: Optional[Sequence[float]] = None
    ) -> None:
        if cfg.act_bits is not None and act_scales is None:
            raise QuantizationError(
                "activation quantization needs calibrated activation ranges"
            )
        self.__net = net
        self.__cfg = cfg
        self.__act_scales = None if act_scales is None else tuple(
            float(s) for s in act_scales
        )
        if cfg.weight_bits is None:
            self.__weights = None
        else:
            self.__weights = tuple(
                quantize_tensor(w, cfg.weight_bits) for w in net.weights
            )
        self.__logger = logging.getLogger(self.__class__.__name__)
        self.__logger.debug("Built %s denoiser over %s", cfg.label, net)

    @property
    def dim(self) -> int:
        return self.__net.dim

    @property
    def net(self) -> MLPDenoiser:
        return self.__net

    @property
    def config(self) -> QuantConfig:
        return self.__cfg

    @property
    def act_scales(self) -> Optional[Tuple[float, ...]]:
        return self.__act_scales

    def __quantize_hidden(self, layer: int, h: np.ndarray) -> np.ndarray:
        return fake_quantize(h, self.__cfg.act_bits, self.__act_scales[layer])

    def predict(self, x_t, t, sample_ids) -> np.ndarray:
        hook = None if self.__cfg.act_bits is None else self.__quantize_hidden
        return self.__net.forward(x_t, t, weights=self.__weights, hook=hook)

    def header(self, base_path: str) -> dict:
        return {
            "format": "qsched.quantized",
            "base": base_path,
            "quant": self.__cfg.to_dict(),
            "act_scales": None if self.__act_scales is None else list(self.__act_scales),
        }


def collect_calibration_states(
    gmm: GaussianMixture,
    schedule: NoiseSchedule,
    n: int,
    seed: int,
    purpose: str = "calibration-states"
) -> CalibrationStates:
    """
    Forward-noised states x_t = alpha_t x0 + sigma_t eps, t uniform in [1, n_train).

    Each purpose draws from its own stream.
    """
    if n < 1:
        raise ValidationError(f"need at least one calibration state, got {n}")
    rng = keyed_generator(seed, purpose)
    x0 = gmm.sample(n, rng)
    t = rng.integers(1, schedule.n_train, size=n)
    epsilon = rng.standard_normal((n, gmm.dim))
    x = schedule.alphas[t][:, None] * x0 + schedule.sigmas[t][:, None] * epsilon
    return CalibrationStates(x=x, t=t)


def calibrate_activation_scales(
    net: MLPDenoiser,
    bits: int,
    states: CalibrationStates
) -> Tuple[float, ...]:
    """Running per-layer max of |hidden output| over the calibration states."""
    peaks = None
    for start in range(0, len(states), 1024):
        hidden = net.hidden_outputs(
            states.x[start:start + 1024], states.t[start:start + 1024]
        )
        batch = [float(np.max(np.abs(h))) for h in hidden]
        peaks = batch if peaks is None else [max(a, b) for a, b in zip(peaks, batch)]
    high = _levels(bits)[1]
    return tuple(1.0 if p == 0.0 else p / high for p in peaks)


def quantize_denoiser(
    net: MLPDenoiser,
    cfg: QuantConfig,
    calib_states: Optional[CalibrationStates] = None
) -> QuantizedDenoiser:
    act_scales = None
    if cfg.act_bits is not None:
        if calib_states is None or len(calib_states) == 0:
            raise QuantizationError(
                f"{cfg.label} needs calibration states for activation ranges"
            )
        act_scales = calibrate_activation_scales(net, cfg.act_bits, calib_states)
        logger.info(
            "Calibrated %d activation ranges over %d states",
            len(act_scales), len(calib_states)
        )
    return QuantizedDenoiser(net, cfg, act_scales)


def model_size_bytes(net: MLPDenoiser, cfg: QuantConfig) -> int:
    """Weight storage at the configured precision, biases kept at 32 bits."""
    weight_bits = 32 if cfg.weight_bits is None else cfg.weight_bits
    weights = sum(w.size for w in net.weights) * weight_bits
    biases = sum(b.size for b in net.biases) * 32
    return (weights + biases + 7) // 8


def estimate_ptqd_params(
    fp: Denoiser,
    q: Denoiser,
    calib_states: CalibrationStates
) -> PtqdParams:
    """
    Least-squares fit of E^Q = (1 + gamma) E + delta pooled over all outputs.

    The residual delta is uncorrelated with E by construction; its per-output
    mean and pooled standard deviation parametrise the uncorrelated noise.
    """
    if len(calib_states) < 2:
        raise ValidationError("PTQD calibration needs at least two states")

    sample_ids = np.arange(len(calib_states))
    full = fp(calib_states.x, calib_states.t, sample_ids)
    quantized = q(calib_states.x, calib_states.t, sample_ids)

    centred = full - full.mean()
    variance = float(np.mean(centred ** 2))
    if variance == 0.0:
        raise DegenerateCalibrationError(
            "full-precision outputs are constant over the calibration states"
        )
    covariance = float(np.mean((quantized - quantized.mean()) * centred))
    gamma = covariance / variance - 1.0

    residual = quantized - (1.0 + gamma) * full
    delta_mean = residual.mean(axis=0)
    delta_std = float(np.sqrt(np.mean((residual - delta_mean[None, :]) ** 2)))

    logger.info(
        "PTQD estimate over %d states: gamma=%.6f delta_std=%.6f",
        len(calib_states), gamma, delta_std
    )
    return PtqdParams(gamma=gamma, delta_mean=tuple(delta_mean), delta_std=delta_std)
