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
Reading and writing of everything the commands leave on disk.

JSON is written with sorted keys and a trailing newline, CSV floats with
%.17g, and manifests carry no timestamps, so reruns are byte-identical.
"""
from contextlib import contextmanager
import csv
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import numpy as np

from . import __version__
from .denoiser import MLPDenoiser
from .errors import ArtifactError, QSchedError
from .model import Denoiser, PreconditionCoeffs, PtqdParams, StepRecord, Trajectory
from .quant import QuantConfig, QuantizedDenoiser

logger = logging.getLogger("Artifacts")

MANIFEST = "manifest.json"


@contextmanager
def open_output(path: Path, newline: str = "\n"):
    """Text file opened for writing; filesystem failures become ArtifactError."""
    try:
        with open(path, "w", encoding="utf-8", newline=newline) as f:
            yield f
    except OSError as error:
        raise ArtifactError(f"cannot write {path}: {error}")


def make_output_dir(path: Path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as error:
        raise ArtifactError(f"cannot create output directory {path}: {error}")
    return path


def write_json(path: Path, data) -> None:
    with open_output(path) as f:
        f.write(json.dumps(data, sort_keys=True, indent=2))
        f.write("\n")
    logger.debug("Wrote %s", path)


def read_json(path: Path):
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise ArtifactError(f"missing artifact: {path}")
    except (OSError, json.JSONDecodeError) as error:
        raise ArtifactError(f"unreadable artifact {path}: {error}")


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    try:
        with open(path, "rb") as f:
            for block in iter(lambda: f.read(1 << 16), b""):
                digest.update(block)
    except OSError as error:
        raise ArtifactError(f"unreadable artifact {path}: {error}")
    return digest.hexdigest()


def write_manifest(
    out_dir: Path,
    command: str,
    config_sha256: str,
    seed: int,
    outputs: Iterable[str]
) -> Path:
    path = Path(out_dir) / MANIFEST
    write_json(path, {
        "command": command,
        "config_sha256": config_sha256,
        "seed": seed,
        "version": __version__,
        "outputs": sorted(outputs),
    })
    return path


def write_rows_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open_output(path, newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([
                "%.17g" % value if isinstance(value, float) else value
                for value in row
            ])


def write_samples_csv(path: Path, samples: np.ndarray) -> None:
    samples = np.atleast_2d(samples)
    write_rows_csv(
        path,
        [f"x{i}" for i in range(samples.shape[1])],
        ([float(v) for v in row] for row in samples),
    )


def read_samples_csv(path: Path) -> np.ndarray:
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            rows = list(csv.reader(f))
    except OSError as error:
        raise ArtifactError(f"unreadable samples {path}: {error}")
    if not rows or any(not name.startswith("x") for name in rows[0]):
        raise ArtifactError(f"{path} has no x0..x(d-1) header")
    try:
        return np.array([[float(v) for v in row] for row in rows[1:]]).reshape(
            -1, len(rows[0])
        )
    except ValueError as error:
        raise ArtifactError(f"malformed samples in {path}: {error}")


def _vector(values) -> List[float]:
    return [float(v) for v in values]


def write_trajectory_jsonl(path: Path, trajectory: Trajectory) -> None:
    """A header line, then one line per step per sample."""
    with open_output(path) as f:
        f.write(json.dumps({
            "kind": trajectory.kind,
            "seed": trajectory.seed,
            "eta": trajectory.eta,
            "coeffs": {"c_x": trajectory.coeffs.c_x, "c_eps": trajectory.coeffs.c_eps},
            "sample_ids": [int(i) for i in trajectory.sample_ids],
            "x_init": [_vector(row) for row in trajectory.x_init],
        }, sort_keys=True))
        f.write("\n")
        for record in trajectory.records:
            for row, sid in enumerate(trajectory.sample_ids):
                f.write(json.dumps({
                    "step": record.index,
                    "sample": int(sid),
                    "t": record.t,
                    "s_prime": record.s_prime,
                    "s": record.s,
                    "x_before": _vector(record.x_before[row]),
                    "x_after": _vector(record.x_after[row]),
                    "epsilon": _vector(record.epsilon[row]),
                    "noise": None if record.noise is None else _vector(record.noise[row]),
                }, sort_keys=True))
                f.write("\n")


def read_trajectory_jsonl(path: Path) -> Trajectory:
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = [json.loads(line) for line in f if line.strip()]
    except FileNotFoundError:
        raise ArtifactError(f"missing trajectory: {path}")
    except (OSError, json.JSONDecodeError) as error:
        raise ArtifactError(f"unreadable trajectory {path}: {error}")
    if not lines:
        raise ArtifactError(f"empty trajectory file {path}")

    head, body = lines[0], lines[1:]
    try:
        sample_ids = np.array(head["sample_ids"], dtype=np.int64)
        trajectory = Trajectory(
            kind=head["kind"], seed=head["seed"], eta=head["eta"],
            coeffs=PreconditionCoeffs(**head["coeffs"]),
            sample_ids=sample_ids,
            x_init=np.array(head["x_init"], dtype=np.float64),
        )
        n = len(sample_ids)
        if len(body) % n:
            raise ArtifactError(f"{path} holds a partial step")
        for start in range(0, len(body), n):
            rows = body[start:start + n]
            first = rows[0]
            stochastic = first["noise"] is not None
            trajectory.records.append(StepRecord(
                index=first["step"], t=first["t"],
                s_prime=first["s_prime"], s=first["s"],
                x_before=np.array([r["x_before"] for r in rows]),
                x_after=np.array([r["x_after"] for r in rows]),
                epsilon=np.array([r["epsilon"] for r in rows]),
                noise=np.array([r["noise"] for r in rows]) if stochastic else None,
            ))
    except (KeyError, TypeError, ValueError) as error:
        raise ArtifactError(f"malformed trajectory {path}: {error}")
    except QSchedError as error:
        raise ArtifactError(f"malformed trajectory {path}: {error.desc}")
    return trajectory


def _sidecar(path: Path) -> Path:
    return Path(path).with_suffix(".bin")


def save_denoiser(net: MLPDenoiser, path: Path) -> List[Path]:
    """Header JSON plus a little-endian float32 parameter block."""
    path = Path(path)
    sidecar = _sidecar(path)
    try:
        net.flat_parameters().tofile(sidecar)
    except OSError as error:
        raise ArtifactError(f"cannot write {sidecar}: {error}")
    header = net.header()
    header["parameters"] = sidecar.name
    header["sha256"] = file_sha256(sidecar)
    write_json(path, header)
    logger.info("Denoiser saved to %s", path)
    return [path, sidecar]


def save_quantized(q: QuantizedDenoiser, path: Path, base_path: Path) -> List[Path]:
    path = Path(path)
    reference = os.path.relpath(Path(base_path).resolve(), path.parent.resolve())
    write_json(path, q.header(reference))
    logger.info("Quantized %s denoiser saved to %s", q.config.label, path)
    return [path]


def _load_mlp(path: Path, header: dict) -> MLPDenoiser:
    sidecar = path.parent / header.get("parameters", _sidecar(path).name)
    if not sidecar.exists():
        raise ArtifactError(f"missing parameter block {sidecar}")
    if "sha256" in header and file_sha256(sidecar) != header["sha256"]:
        raise ArtifactError(f"parameter block {sidecar} does not match its header")
    flat = np.fromfile(sidecar, dtype="<f4")
    try:
        return MLPDenoiser.from_flat(header, flat)
    except KeyError as error:
        raise ArtifactError(f"denoiser header {path} lacks {error}")
    except QSchedError as error:
        raise ArtifactError(f"invalid denoiser {path}: {error.desc}")


def load_denoiser(path: Path) -> Denoiser:
    path = Path(path)
    header = read_json(path)
    match header.get("format"):
        case "qsched.mlp":
            return _load_mlp(path, header)
        case "qsched.quantized":
            base_path = path.parent / header["base"]
            base = load_denoiser(base_path)
            if not isinstance(base, MLPDenoiser):
                raise ArtifactError(f"{path} must reference a full-precision denoiser")
            try:
                cfg = QuantConfig(**header["quant"])
                return QuantizedDenoiser(base, cfg, header.get("act_scales"))
            except (KeyError, TypeError) as error:
                raise ArtifactError(f"malformed quantized header {path}: {error}")
            except QSchedError as error:
                raise ArtifactError(f"invalid quantized denoiser {path}: {error.desc}")
    raise ArtifactError(f"{path} is not a denoiser artifact")


def write_ptqd(path: Path, params: PtqdParams) -> None:
    write_json(path, params.to_dict())


def read_ptqd(path: Path) -> PtqdParams:
    try:
        return PtqdParams.from_dict(read_json(path))
    except QSchedError as error:
        if isinstance(error, ArtifactError):
            raise
        raise ArtifactError(f"invalid PTQD parameters {path}: {error.desc}")


def read_elo_records(path: Path) -> List[Tuple[str, str, str]]:
    """Rows (a, b, winner) from a CSV with an a,b,winner header."""
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames is None or \
                    not {"a", "b", "winner"} <= set(reader.fieldnames):
                raise ArtifactError(f"{path} needs an a,b,winner header")
            return [(row["a"], row["b"], row["winner"]) for row in reader]
    except FileNotFoundError:
        raise ArtifactError(f"missing records file: {path}")
    except (OSError, csv.Error) as error:
        raise ArtifactError(f"unreadable records {path}: {error}")
