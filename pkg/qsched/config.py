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
Run configuration read from an INI file.

Every section maps onto a frozen dataclass; missing keys take the defaults
below, unknown sections and keys are rejected.
"""
import configparser
from dataclasses import dataclass, field, fields, replace
import hashlib
import io
import logging
import shlex
from typing import Optional, Tuple

from .calibrate import DEFAULT_CONTEXTS, CoefficientGrid, JAQConfig, make_contexts
from .denoiser import GaussianMixture, PreconditionFns, TrainingSpec
from .errors import ConfigError, QSchedError
from .model import PreconditionCoeffs, PtqdParams
from .quant import QuantConfig
from .sampler import SamplerConfig
from .schedule import NoiseSchedule, build_schedule, few_step_grid

SCHEMA_VERSION = 1

logger = logging.getLogger("Config")


@dataclass(frozen=True)
class RunSection():
    version: int = SCHEMA_VERSION
    seed: int = 0
    output: str = "runs"


@dataclass(frozen=True)
class ScheduleSection():
    beta0: float = 0.0085
    beta_n: float = 0.012
    n_train: int = 1000


@dataclass(frozen=True)
class MixtureSection():
    weights: Tuple[float, ...] = (0.5, 0.5)
    means: Tuple[Tuple[float, ...], ...] = ((-1.5, -1.5), (1.5, 1.5))
    stds: Tuple[float, ...] = (0.35, 0.35)


@dataclass(frozen=True)
class DenoiserSection():
    hidden_layers: int = 3
    width: int = 64
    frequencies: int = 8
    activation: str = "silu"
    steps: int = 4000
    batch: int = 256
    learning_rate: float = 2e-3
    heldout: int = 2048
    max_heldout_loss: Optional[float] = None
    log_every: int = 500


@dataclass(frozen=True)
class QuantSection():
    weight_bits: Optional[int] = 4
    act_bits: Optional[int] = 8
    calibration_states: int = 2048
    ptqd_states: int = 10000


@dataclass(frozen=True)
class SamplerSection():
    kind: str = "tcd"
    steps: int = 4
    eta: float = 0.0
    c_x: float = 1.0
    c_eps: float = 1.0
    batch: int = 5000
    sigma_data: float = 0.5
    timestep_scaling: float = 10.0
    trajectory: bool = True
    sweep_etas: Tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.5)


@dataclass(frozen=True)
class CalibrateSection():
    low: float = 0.9
    high: float = 1.1
    step: float = 0.01
    k: float = 2.0
    tc: str = "gmm_loglik"
    iq: str = "mode_sharpness"
    command: str = ""
    timeout: float = 60.0
    batch: int = 200
    contexts: Tuple[str, ...] = DEFAULT_CONTEXTS
    require_identity: bool = True


@dataclass(frozen=True)
class CompareSection():
    k_factor: float = 32.0
    initial: float = 1000.0


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "yes", "true", "on"):
        return True
    if lowered in ("0", "no", "false", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(parse):
    def parser(text: str):
        return None if text.strip().lower() in ("", "none") else parse(text)
    return parser


def _floats(text: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _rows(text: str) -> Tuple[Tuple[float, ...], ...]:
    return tuple(_floats(row) for row in text.split(";") if row.strip())


def _lines(text: str) -> Tuple[str, ...]:
    return tuple(line.strip() for line in text.splitlines() if line.strip())


PARSERS = {
    int: lambda text: int(text.strip()),
    float: lambda text: float(text.strip()),
    str: lambda text: text.strip(),
    bool: _parse_bool,
    Optional[int]: _optional(lambda text: int(text.strip())),
    Optional[float]: _optional(lambda text: float(text.strip())),
    Tuple[float, ...]: _floats,
    Tuple[Tuple[float, ...], ...]: _rows,
    Tuple[str, ...]: _lines,
}


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return "; ".join(_format(row) for row in value)
        if value and isinstance(value[0], str):
            return "\n" + "\n".join(value)
        return ", ".join(repr(float(v)) for v in value)
    return str(value)


@dataclass(frozen=True)
class RunConfig():
    run: RunSection = field(default_factory=RunSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    mixture: MixtureSection = field(default_factory=MixtureSection)
    denoiser: DenoiserSection = field(default_factory=DenoiserSection)
    quant: QuantSection = field(default_factory=QuantSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    calibrate: CalibrateSection = field(default_factory=CalibrateSection)
    compare: CompareSection = field(default_factory=CompareSection)

    @classmethod
    def from_parser(cls, parser: configparser.ConfigParser) -> "RunConfig":
        sections = {f.name: f for f in fields(cls)}
        unknown = set(parser.sections()) - set(sections)
        if unknown:
            raise ConfigError(f"unknown sections: {', '.join(sorted(unknown))}")

        values = {}
        for name, section_field in sections.items():
            section_type = section_field.default_factory
            if not parser.has_section(name):
                values[name] = section_type()
                continue

            known = {f.name: f for f in fields(section_type)}
            options = dict(parser.items(name, raw=True))
            extra = set(options) - set(known) - set(parser.defaults())
            if extra:
                raise ConfigError(
                    f"unknown keys in [{name}]: {', '.join(sorted(extra))}"
                )

            parsed = {}
            for key, option in known.items():
                if key not in options:
                    continue
                try:
                    parsed[key] = PARSERS[option.type](options[key])
                except ValueError as error:
                    raise ConfigError(f"[{name}] {key}: {error}")
            values[name] = section_type(**parsed)

        config = cls(**values)
        config.validate()
        return config

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as error:
            raise ConfigError(f"malformed configuration: {error}")
        return cls.from_parser(parser)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                text = f.read()
        except OSError as error:
            raise ConfigError(f"cannot read configuration {path}: {error}")
        logger.debug("Loading configuration from %s", path)
        return cls.from_text(text)

    def to_parser(self) -> configparser.ConfigParser:
        parser = configparser.ConfigParser(interpolation=None)
        for section_field in fields(self):
            section = getattr(self, section_field.name)
            parser.add_section(section_field.name)
            for option in fields(section):
                parser.set(
                    section_field.name, option.name,
                    _format(getattr(section, option.name))
                )
        return parser

    def dumps(self) -> str:
        buffer = io.StringIO()
        self.to_parser().write(buffer)
        return buffer.getvalue()

    def sha256(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        if seed is None:
            return self
        return replace(self, run=replace(self.run, seed=seed))

    def with_sampler(self, **overrides) -> "RunConfig":
        changes = {k: v for k, v in overrides.items() if v is not None}
        if not changes:
            return self
        config = replace(self, sampler=replace(self.sampler, **changes))
        config.validate()
        return config

    def validate(self) -> None:
        if self.run.version != SCHEMA_VERSION:
            raise ConfigError(
                f"unsupported config version {self.run.version}, expected {SCHEMA_VERSION}"
            )
        if self.run.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.run.seed}")
        try:
            schedule = self.build_schedule()
            self.mixture_model()
            self.training_spec()
            self.quant_config()
            placeholder = None
            if self.sampler.kind == "ptqd":
                placeholder = PtqdParams.identity(self.mixture_model().dim)
            self.sampler_config(schedule, placeholder)
            self.coefficient_grid()
            self.jaq_config()
            make_contexts(self.calibrate.contexts)
        except QSchedError as error:
            if isinstance(error, ConfigError):
                raise
            raise ConfigError(error.desc)
        if self.sampler.batch < 1 or self.calibrate.batch < 1:
            raise ConfigError("sample batches must hold at least one sample")
        if self.compare.k_factor <= 0:
            raise ConfigError(f"k_factor must be positive, got {self.compare.k_factor}")
        if self.quant.calibration_states < 1 or self.quant.ptqd_states < 2:
            raise ConfigError("quantization needs calibration states")

    def build_schedule(self) -> NoiseSchedule:
        return build_schedule(
            self.schedule.beta0, self.schedule.beta_n, self.schedule.n_train
        )

    def mixture_model(self) -> GaussianMixture:
        return GaussianMixture(
            weights=self.mixture.weights,
            means=self.mixture.means,
            component_stds=self.mixture.stds,
        )

    def training_spec(self) -> TrainingSpec:
        d = self.denoiser
        return TrainingSpec(
            hidden_layers=d.hidden_layers, width=d.width,
            frequencies=d.frequencies, activation=d.activation,
            steps=d.steps, batch=d.batch, learning_rate=d.learning_rate,
            heldout=d.heldout, seed=self.run.seed,
            max_heldout_loss=d.max_heldout_loss, log_every=d.log_every,
        )

    def quant_config(self) -> QuantConfig:
        return QuantConfig(
            weight_bits=self.quant.weight_bits, act_bits=self.quant.act_bits
        )

    def sampler_config(
        self,
        schedule: NoiseSchedule,
        ptqd: Optional[PtqdParams] = None
    ) -> SamplerConfig:
        s = self.sampler
        return SamplerConfig(
            kind=s.kind,
            grid=few_step_grid(schedule, s.steps),
            eta=s.eta,
            coeffs=PreconditionCoeffs(c_x=s.c_x, c_eps=s.c_eps),
            ptqd=ptqd if s.kind == "ptqd" else None,
            precondition=PreconditionFns(
                sigma_data=s.sigma_data, timestep_scaling=s.timestep_scaling
            ),
            seed=self.run.seed,
        )

    def coefficient_grid(self) -> CoefficientGrid:
        c = self.calibrate
        return CoefficientGrid.from_range(c.low, c.high, c.step)

    def jaq_config(self) -> JAQConfig:
        c = self.calibrate
        return JAQConfig(
            k=c.k, tc=c.tc, iq=c.iq,
            command=tuple(shlex.split(c.command)) or None,
            timeout=c.timeout,
        )
