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

import argparse
import json
import logging
import os
from pathlib import Path
import sys
from typing import List, Optional, Tuple

from .analysis import (
    elo_ratings,
    frechet_distance,
    frechet_table,
    measure_error,
    sampler_coeffs,
    stochasticity_sweep,
)
from .artifacts import (
    file_sha256,
    load_denoiser,
    make_output_dir,
    open_output,
    read_elo_records,
    read_ptqd,
    read_samples_csv,
    read_trajectory_jsonl,
    save_denoiser,
    save_quantized,
    write_json,
    write_manifest,
    write_ptqd,
    write_rows_csv,
    write_samples_csv,
    write_trajectory_jsonl,
)
from .calibrate import grid_search, make_contexts
from .config import RunConfig
from .database import SurfaceCache
from .denoiser import MLPDenoiser, train_mlp_denoiser
from .errors import ArtifactError, ConfigError, QSchedError
from .model import PreconditionCoeffs
from .quant import (
    QuantConfig,
    QuantizedDenoiser,
    collect_calibration_states,
    estimate_ptqd_params,
    model_size_bytes,
    quantize_denoiser,
)
from .sampler import KINDS, sample_trajectory
from .schedule import TimestepGrid, few_step_grid, write_schedule_csv

DEFAULT_CONFIG = "config.ini"

# commands that fall back to built-in defaults when no config file exists
STANDALONE_COMMANDS = ("compare",)

LOG_FORMAT = "[%(asctime)s] %(name)s - %(levelname)s: %(message)s"

CONFIG_FILE_NOT_FOUND = """
Configuration file not found.
Perhaps you forgot to copy config.example.ini to config.ini?
Use the -c key to specify the full path to the config.
"""

logger = logging.getLogger("Runner")


def parse_coeffs(text: str) -> Tuple[float, float]:
    try:
        c_x, c_eps = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected CX,CE, got {text!r}")
    return c_x, c_eps


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        '-c', '--config', default=None,
        dest="config", help=f"path to configuration file (default: {DEFAULT_CONFIG})"
    )
    common.add_argument(
        '-o', '--out', default=None, type=Path,
        dest="out", help="output directory (default: <output>/<command>)"
    )
    common.add_argument(
        '--seed', default=None, type=int,
        dest="seed", help="override the global seed"
    )
    common.add_argument(
        '-v', '--verbose', dest="verbose",
        action='store_true', help="output debug information",
    )

    parser = argparse.ArgumentParser(
        prog='qsched',
        description='Noise-schedule preconditioning for quantized few-step diffusion',
    )
    commands = parser.add_subparsers(dest="command", required=True)

    commands.add_parser(
        "train", parents=[common], help="train the full-precision denoiser"
    )

    quantize = commands.add_parser(
        "quantize", parents=[common], help="quantize a trained denoiser"
    )
    quantize.add_argument("--denoiser", required=True, type=Path)

    sampling = argparse.ArgumentParser(add_help=False)
    sampling.add_argument("--denoiser", required=True, type=Path)
    sampling.add_argument("--eta", type=float, default=None)
    sampling.add_argument("--steps", type=int, default=None)
    sampling.add_argument("--sampler", choices=KINDS, default=None)

    calibrate = commands.add_parser(
        "calibrate", parents=[common, sampling],
        help="grid-search the preconditioning coefficients"
    )
    calibrate.add_argument(
        "--cache", type=Path, default=None, help="sqlite file of scored grid points"
    )
    calibrate.add_argument(
        "--ablation", action="store_true",
        help="also report the best c_eps-only and c_x-only coefficients"
    )

    sample = commands.add_parser(
        "sample", parents=[common, sampling], help="draw samples"
    )
    sample.add_argument("--coeffs", type=parse_coeffs, default=None)
    sample.add_argument(
        "--ptqd", type=Path, default=None,
        help="PTQD parameters (default: ptqd.json next to the denoiser)"
    )

    analyze = commands.add_parser(
        "analyze", parents=[common], help="error propagation and Fréchet report"
    )
    analyze.add_argument("--fp-run", required=True, type=Path)
    analyze.add_argument("--q-run", required=True, type=Path)

    compare = commands.add_parser(
        "compare", parents=[common], help="Elo ratings from pairwise records"
    )
    compare.add_argument("records", type=Path)
    compare.add_argument("--k-factor", type=float, default=None)

    sweep = commands.add_parser(
        "sweep", parents=[common, sampling],
        help="Fréchet distance of four samplers across eta"
    )
    sweep.add_argument("--coeffs", type=parse_coeffs, default=None)
    sweep.add_argument("--ptqd", type=Path, default=None)

    commands.add_parser(
        "schedule", parents=[common], help="write the noise schedule table"
    )
    return parser


def setup_logging(verbose: bool) -> None:
    if verbose:
        level = logging.DEBUG
    else:
        name = os.environ.get("QSCHED_LOG", "INFO").upper()
        level = getattr(logging, name, None)
        if not isinstance(level, int):
            level = logging.INFO
    logging.basicConfig(format=LOG_FORMAT, level=level)
    logging.getLogger().setLevel(level)


def _output_dir(args, config: RunConfig) -> Path:
    out = args.out if args.out is not None else Path(config.run.output) / args.command
    return make_output_dir(out)


def _finish(out: Path, command: str, config: RunConfig, outputs: List[str]) -> None:
    with open_output(out / "config.ini") as f:
        f.write(config.dumps())
    write_manifest(
        out, command, config.sha256(), config.run.seed, outputs + ["config.ini"]
    )
    logger.info("Wrote %d artifacts to %s", len(outputs) + 2, out)


def _apply_sampling_flags(args, config: RunConfig) -> RunConfig:
    kind = args.sampler
    c_x = c_eps = None
    coeffs = getattr(args, "coeffs", None)
    if coeffs is not None:
        c_x, c_eps = coeffs
        kind = kind or config.sampler.kind
        promoted = {"tcd": "qsched", "lcm": "qsched_lcm"}.get(kind, kind)
        if promoted != kind:
            logger.info("Coefficients given, sampling with %s", promoted)
        kind = promoted
    return config.with_sampler(
        kind=kind, eta=args.eta, steps=args.steps, c_x=c_x, c_eps=c_eps
    )


def cmd_train(args, config: RunConfig) -> None:
    out = _output_dir(args, config)
    net = train_mlp_denoiser(
        config.mixture_model(), config.build_schedule(), config.training_spec()
    )
    paths = save_denoiser(net, out / "denoiser.json")
    _finish(out, "train", config, [p.name for p in paths])


def _load_mlp(path: Path) -> MLPDenoiser:
    denoiser = load_denoiser(path)
    if not isinstance(denoiser, MLPDenoiser):
        raise ArtifactError(f"{path} is not a full-precision denoiser")
    return denoiser


def _load_quantized(path: Path) -> QuantizedDenoiser:
    denoiser = load_denoiser(path)
    if not isinstance(denoiser, QuantizedDenoiser):
        raise ArtifactError(f"{path} is not a quantized denoiser")
    return denoiser


def cmd_quantize(args, config: RunConfig) -> None:
    out = _output_dir(args, config)
    net = _load_mlp(args.denoiser)
    gmm, schedule = config.mixture_model(), config.build_schedule()
    cfg = config.quant_config()

    states = collect_calibration_states(
        gmm, schedule, config.quant.calibration_states, config.run.seed,
        "activation-states"
    )
    quantized = quantize_denoiser(net, cfg, states)
    paths = save_quantized(quantized, out / "quantized.json", args.denoiser)

    ptqd_states = collect_calibration_states(
        gmm, schedule, config.quant.ptqd_states, config.run.seed, "ptqd-states"
    )
    write_ptqd(out / "ptqd.json", estimate_ptqd_params(net, quantized, ptqd_states))

    fp_bytes = model_size_bytes(net, QuantConfig())
    q_bytes = model_size_bytes(net, cfg)
    logger.info("%s model: %d bytes (full precision %d)", cfg.label, q_bytes, fp_bytes)
    write_json(out / "size.json", {
        "label": cfg.label,
        "full_precision_bytes": fp_bytes,
        "quantized_bytes": q_bytes,
    })
    _finish(
        out, "quantize", config,
        [p.name for p in paths] + ["ptqd.json", "size.json"]
    )


def cmd_calibrate(args, config: RunConfig) -> None:
    config = _apply_sampling_flags(args, config)
    out = _output_dir(args, config)
    denoiser = load_denoiser(args.denoiser)
    schedule = config.build_schedule()

    cache = None
    run_key = ""
    if args.cache is not None:
        cache = SurfaceCache(args.cache)
        if not cache.create():
            cache = None
        run_key = f"{config.sha256()}:{file_sha256(args.denoiser)}"

    result = grid_search(
        config.coefficient_grid(),
        config.sampler_config(schedule),
        denoiser,
        schedule,
        config.jaq_config(),
        make_contexts(config.calibrate.contexts),
        config.calibrate.batch,
        gmm=config.mixture_model(),
        cache=cache,
        run_key=run_key,
        require_identity=config.calibrate.require_identity,
        ablation=args.ablation,
    )
    write_json(out / "calibration.json", result.to_dict())
    write_rows_csv(
        out / "surface.csv",
        ["c_x", "c_eps", "tc", "iq", "jaq"],
        ([p.c_x, p.c_eps, p.tc, p.iq, p.jaq] for p in result.surface),
    )
    _finish(out, "calibrate", config, ["calibration.json", "surface.csv"])


def cmd_sample(args, config: RunConfig) -> None:
    config = _apply_sampling_flags(args, config)
    out = _output_dir(args, config)
    denoiser = load_denoiser(args.denoiser)
    schedule = config.build_schedule()

    ptqd = None
    if config.sampler.kind == "ptqd":
        ptqd = read_ptqd(args.ptqd or args.denoiser.parent / "ptqd.json")

    samples, trajectory = sample_trajectory(
        config.sampler_config(schedule, ptqd), denoiser, schedule,
        config.sampler.batch, record=config.sampler.trajectory,
    )
    write_samples_csv(out / "samples.csv", samples)
    outputs = ["samples.csv"]
    if config.sampler.trajectory:
        write_trajectory_jsonl(out / "trajectory.jsonl", trajectory)
        outputs.append("trajectory.jsonl")
    _finish(out, "sample", config, outputs)


def cmd_analyze(args, config: RunConfig) -> None:
    out = _output_dir(args, config)
    schedule = config.build_schedule()
    gmm = config.mixture_model()

    fp_traj = read_trajectory_jsonl(args.fp_run / "trajectory.jsonl")
    q_traj = read_trajectory_jsonl(args.q_run / "trajectory.jsonl")
    if not fp_traj.records:
        raise ArtifactError(f"{args.fp_run} holds no sampling steps")
    grid = TimestepGrid((fp_traj.records[0].t,) + tuple(r.s for r in fp_traj.records))
    coeffs = sampler_coeffs(schedule, grid, fp_traj.eta)
    report = measure_error(fp_traj, q_traj, coeffs)
    summary = report.to_dict()

    fp_samples = read_samples_csv(args.fp_run / "samples.csv")
    q_samples = read_samples_csv(args.q_run / "samples.csv")
    frechet = frechet_table({"fp": fp_samples, "q": q_samples}, gmm)
    frechet["fp_vs_q"] = frechet_distance(fp_samples, q_samples)

    write_json(out / "analysis.json", {
        "error": summary,
        "frechet": frechet,
        "grid": list(grid.steps),
        "eta": fp_traj.eta,
    })
    write_rows_csv(
        out / "coefficients.csv",
        ["t", "s_prime", "s", "k", "m"],
        ([t, sp, s, float(k), float(m)]
         for (t, sp, s), k, m in zip(coeffs.transitions, coeffs.k, coeffs.m)),
    )
    write_rows_csv(
        out / "error_trace.csv",
        ["step", "t", "s", "delta_x_norm", "delta_e_norm", "residual"],
        ([i, t, s, float(dx), float(de), float(r)]
         for i, ((t, _, s), dx, de, r) in enumerate(zip(
             coeffs.transitions,
             summary["delta_x_norms"],
             summary["delta_e_norms"],
             report.recursion_residuals,
         ))),
    )
    _finish(
        out, "analyze", config,
        ["analysis.json", "coefficients.csv", "error_trace.csv"]
    )


def cmd_compare(args, config: RunConfig) -> None:
    out = _output_dir(args, config)
    k_factor = args.k_factor if args.k_factor is not None else config.compare.k_factor
    ratings = elo_ratings(
        read_elo_records(args.records), k_factor=k_factor,
        initial=config.compare.initial,
    )
    write_json(out / "elo.json", {
        "k_factor": k_factor,
        "initial": config.compare.initial,
        "ratings": ratings,
    })
    _finish(out, "compare", config, ["elo.json"])


def cmd_sweep(args, config: RunConfig) -> None:
    config = _apply_sampling_flags(args, config)
    out = _output_dir(args, config)
    quantized = _load_quantized(args.denoiser)
    schedule = config.build_schedule()
    s = config.sampler
    rows = stochasticity_sweep(
        s.sweep_etas,
        few_step_grid(schedule, s.steps),
        quantized.net,
        quantized,
        read_ptqd(args.ptqd or args.denoiser.parent / "ptqd.json"),
        PreconditionCoeffs(c_x=s.c_x, c_eps=s.c_eps),
        config.mixture_model(),
        schedule,
        s.batch,
        config.run.seed,
    )
    write_rows_csv(
        out / "sweep.csv",
        ["eta", "fp", "naive", "ptqd", "qsched"],
        ([r.eta, r.fp, r.naive, r.ptqd, r.qsched] for r in rows),
    )
    _finish(out, "sweep", config, ["sweep.csv"])


def cmd_schedule(args, config: RunConfig) -> None:
    out = _output_dir(args, config)
    write_schedule_csv(config.build_schedule(), out / "schedule.csv")
    _finish(out, "schedule", config, ["schedule.csv"])


def load_config(args) -> RunConfig:
    path = Path(args.config or DEFAULT_CONFIG)
    if path.exists():
        return RunConfig.load(path)
    if args.config is None and args.command in STANDALONE_COMMANDS:
        logger.info("No %s found, %s uses the built-in defaults", path, args.command)
        return RunConfig()
    logger.error(CONFIG_FILE_NOT_FOUND)
    raise ConfigError(f"missing configuration file: {path}")


COMMANDS = {
    "train": cmd_train,
    "quantize": cmd_quantize,
    "calibrate": cmd_calibrate,
    "sample": cmd_sample,
    "analyze": cmd_analyze,
    "compare": cmd_compare,
    "sweep": cmd_sweep,
    "schedule": cmd_schedule,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)

    try:
        config = load_config(args).with_seed(args.seed)
        config.validate()
        COMMANDS[args.command](args, config)
    except QSchedError as error:
        logger.error("%s failed: %s", args.command, error)
        print(json.dumps(error.to_dict(), sort_keys=True), file=sys.stderr)
        return error.exit_status

    return 0


if __name__ == "__main__":
    sys.exit(main())
