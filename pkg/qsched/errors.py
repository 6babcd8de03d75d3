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


class QSchedError(Exception):
    code = "error"
    exit_status = 1

    def __init__(self, desc: str, code: str | None = None):
        if code is not None:
            self.code = code
        super().__init__(f"{self.code}: {desc}")
        self.desc = desc

    def to_dict(self) -> dict:
        return {"error": self.code, "message": self.desc}


class ValidationError(QSchedError):
    code = "validation"


class OrderingError(ValidationError):
    code = "ordering"


class DenoiserError(QSchedError):
    code = "denoiser"


class TrainingError(QSchedError):
    code = "training"

    def __init__(self, desc: str, step: int | None = None):
        super().__init__(desc)
        self.step = step


class QuantizationError(QSchedError):
    code = "quantization"


class DegenerateCalibrationError(QSchedError):
    code = "degenerate-calibration"


class SingularCorrectionError(QSchedError):
    code = "singular-correction"


class SamplingError(QSchedError):
    code = "sampling"

    def __init__(self, desc: str, step: int):
        super().__init__(f"step {step}: {desc}")
        self.step = step


class ScorerError(QSchedError):
    code = "scorer"

    def __init__(self, scorer: str, desc: str):
        super().__init__(f"[{scorer}] {desc}")
        self.scorer = scorer


class ComparabilityError(QSchedError):
    code = "comparability"


class ConfigError(QSchedError):
    code = "config"
    exit_status = 2


class ArtifactError(QSchedError):
    code = "artifact"
    exit_status = 3
