"""
meltsim - command line entry point
==================================
Subcommands:

    solve <config>               theta-scheme run: VTK series, checkpoint, error CSV
    verify <case|config>         convergence studies (mms1d, mms2d, exact_steady, all1d, all2d)
    simulate <config>            coupled trajectory: trajectory CSV, per-step VTK and PCI polylines
    resume <checkpoint> <config> continue a trajectory from its checkpoint
    landscape <config>           potential energy slices through the initial pose

Exit codes: 0 success, 1 invalid input, 2 numerical or I/O failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import pandas as pd

from modules.config import (
    Config, build_body, build_coupling, build_exact, build_problem, initial_rigid, load_config,
)
from modules.coupling import initial_state, run_trajectory
from modules.errors import ConfigError, MeltsimError
from modules.field import FeField, export_vtk, open_output, read_checkpoint, write_checkpoint
from modules.pde import ThetaStepper, peclet_report, run_unsteady
from modules.rbd import RbdProblem, energy_landscape
from modules.verify import (
    ErrorRecorder, StudySettings, exact_steady_study, mms1d, mms2d, run_convergence_study, run_table,
)

logger = logging.getLogger("meltsim")

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

VERIFY_CASES = ("mms1d", "mms2d", "exact_steady", "all1d", "all2d")

# --- DEFAULT CASE PARAMETERS ---
CASE_DEFAULTS = {
    "mms1d": {"v": -5.0, "alpha": 2.0, "g": -2.0, "beta": 10.0},
    "mms2d": {"vmax": -1.0, "alpha": 1.0, "g": -1.0, "beta": 10.0},
    "exact_steady": {"v": -1.0, "alpha": 1.0, "g": -1.0},
}


def _output_dir(args, config: Optional[Config] = None) -> Path:
    if args.output:
        path = Path(args.output)
    elif config is not None:
        path = Path(config.output.directory)
    else:
        path = Path("output")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _deterministic(args, config: Optional[Config] = None) -> bool:
    return bool(args.deterministic or (config is not None and config.output.deterministic))


def _write_csv(table: pd.DataFrame, path: Path) -> Path:
    with open_output(path) as fh:
        table.to_csv(fh, index=False, float_format="%.17g")
    logger.info("Wrote %s", path)
    return path


# --- SOLVE ---

class VtkSeries:
    """Observer writing step_%04d.vtk for every time level."""

    def __init__(self, directory: Path, deterministic: bool):
        self.directory = directory
        self.deterministic = deterministic
        self.count = 0

    def __call__(self, step: int, t: float, field: FeField) -> None:
        export_vtk(field, self.directory / f"step_{step:04d}.vtk", t, deterministic=self.deterministic)
        self.count += 1


def run_solve(args) -> int:
    config = load_config(args.config)
    problem = build_problem(config)
    out = _output_dir(args, config)

    report = peclet_report(problem)
    if report["max_local_peclet"] > 1.0:
        logger.warning("Max cell Peclet number %.3g > 1 (cell %d); expect Galerkin oscillations",
                       report["max_local_peclet"], report["cell"])

    series = VtkSeries(out, _deterministic(args, config))
    observers = [series]
    exact = build_exact(config)
    recorder = ErrorRecorder(exact) if exact is not None else None
    if recorder is not None:
        observers.append(recorder)

    logger.info("Solving %s: %d nodes, theta=%g, dt=%g, t_f=%g", args.config, problem.space.n_dofs,
                problem.theta, problem.step_size, problem.end_time)
    final, history = run_unsteady(problem, observers)
    _write_csv(history, out / "history.csv")
    write_checkpoint(final, initial_rigid(config), problem.end_time, out / "checkpoint.txt")
    if recorder is not None:
        _write_csv(recorder.table, out / "errors.csv")
        logger.info("Final L2 error %.6e", recorder.rows[-1]["error"])
    logger.info("Wrote %d VTK files to %s; final min %.6g, max %.6g", series.count, out,
                final.values.min(), final.values.max())
    return 0


# --- VERIFY ---

def _case_parameters(args, case: str, given=None) -> dict:
    params = dict(CASE_DEFAULTS[case])
    params.update({k: float(v) for k, v in (given or {}).items() if k in params})
    for name in params:
        value = getattr(args, name, None)
        if value is not None:
            params[name] = value
    return params


def run_verify(args) -> int:
    out = _output_dir(args)
    case = args.case
    given = None
    settings = {}
    if case.endswith(".cfg"):
        study = load_config(case).study
        if study.case not in CASE_DEFAULTS:
            raise ConfigError(f"Unknown study case {study.case!r}; expected one of {sorted(CASE_DEFAULTS)}",
                              key="study.case")
        case, given = study.case, study.parameters
        settings = {"first_cycle": study.first_cycle, "levels": study.levels, "dt_per_h": study.dt_per_h,
                    "temporal_cycles": study.temporal_cycles, "dt0": study.dt0}
    if case not in VERIFY_CASES:
        raise ValueError(f"Unknown case {case!r}; expected one of {', '.join(VERIFY_CASES)} or a .cfg file")

    if case in ("all1d", "all2d"):
        dim = 1 if case == "all1d" else 2
        table = run_table(dim)
        _write_csv(table, out / f"table_{dim}d.csv")
        for row in table.itertuples():
            logger.info("p=%.3f (ref %.3f)  q=%.3f (ref %.3f)", row.p, row.p_ref, row.q, row.q_ref)
        return 0

    params = _case_parameters(args, case, given)
    if case == "exact_steady":
        report = exact_steady_study(params["v"], params["alpha"], params["g"])
        report.to_csv(out / "exact_steady.csv")
        logger.info("exact_steady order %.3f", report.order)
        return 0

    built = mms1d(**params) if case == "mms1d" else mms2d(**params)
    modes = ("spatial", "temporal") if args.mode == "both" else (args.mode,)
    summary = dict(params)
    for mode in modes:
        base = StudySettings.for_dim(built.dim, mode)
        study = StudySettings(mode=mode, **{**{k: getattr(base, k) for k in
                                                ("first_cycle", "levels", "dt_per_h", "temporal_cycles", "dt0")},
                                            **settings})
        report = run_convergence_study(built, study)
        report.to_csv(out / f"{case}_{mode}.csv")
        summary["p" if mode == "spatial" else "q"] = report.order
    _write_csv(pd.DataFrame([summary]), out / f"{case}_orders.csv")
    return 0


# --- SIMULATE / RESUME ---

def _trajectory(args, config: Config, cfg, state) -> int:
    out = _output_dir(args, config)
    final, table = run_trajectory(cfg, state, steps=args.steps, output_dir=out,
                                  deterministic=_deterministic(args, config))
    logger.info("Trajectory finished at t=%g after %d steps; pose (%.6g, %.6g, %.6g)",
                final.time, len(table) - 1, final.rigid.theta, final.rigid.r0, final.rigid.r1)
    return 0


def run_simulate(args) -> int:
    config = load_config(args.config)
    problem = build_problem(config)
    initial = FeField(problem.mesh, ThetaStepper(problem).initial())
    cfg = build_coupling(config, problem)
    return _trajectory(args, config, cfg, initial_state(cfg, initial, initial_rigid(config)))


def run_resume(args) -> int:
    config = load_config(args.config)
    field, rigid, t, virtual = read_checkpoint(args.checkpoint, with_virtual=True)
    cfg = build_coupling(config, build_problem(config, field.mesh))
    index = int(round(t / cfg.interval))
    logger.info("Resuming from %s at t=%g (step %d)", args.checkpoint, t, index)
    return _trajectory(args, config, cfg, initial_state(cfg, field, rigid, t, virtual, index))


# --- LANDSCAPE ---

def run_landscape(args) -> int:
    config = load_config(args.config)
    if config.dim != 2:
        raise ConfigError("Energy landscapes need a 2D config", key="meta.dim")
    problem = build_problem(config)
    field = FeField(problem.mesh, ThetaStepper(problem).initial())
    rbd = RbdProblem(build_body(config), config.body.gravity, config.body.melting_temperature,
                     field.eval_extrapolated, config.body.max_change, config.rbd)
    table = energy_landscape(rbd, initial_rigid(config), samples=args.samples, r1_span=args.r1_span)
    _write_csv(table, _output_dir(args, config) / "landscape.csv")
    return 0


# --- PARSER ---

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meltsim", description="Close-contact melting simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--output", help="output directory (default: [output] directory or ./output)")
    common.add_argument("--deterministic", action="store_true", help="omit the VTK timestamp comment")
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", parents=[common], help="run the convection-diffusion problem of a config")
    solve.add_argument("config")
    solve.set_defaults(handler=run_solve)

    verify = sub.add_parser("verify", parents=[common], help="convergence studies")
    verify.add_argument("case", help=f"one of {', '.join(VERIFY_CASES)} or a .cfg file with a [study] section")
    verify.add_argument("--mode", choices=("spatial", "temporal", "both"), default="both")
    for name in ("v", "vmax", "alpha", "g", "beta"):
        verify.add_argument(f"--{name}", type=float)
    verify.set_defaults(handler=run_verify)

    simulate = sub.add_parser("simulate", parents=[common], help="coupled trajectory run")
    simulate.add_argument("config")
    simulate.add_argument("--steps", type=int, help="outer steps (default: [coupling] steps)")
    simulate.set_defaults(handler=run_simulate)

    resume = sub.add_parser("resume", parents=[common], help="continue a trajectory from a checkpoint")
    resume.add_argument("checkpoint")
    resume.add_argument("config")
    resume.add_argument("--steps", type=int, help="outer steps (default: [coupling] steps)")
    resume.set_defaults(handler=run_resume)

    landscape = sub.add_parser("landscape", parents=[common], help="potential energy slices")
    landscape.add_argument("config")
    landscape.add_argument("--samples", type=int, default=181)
    landscape.add_argument("--r1-span", dest="r1_span", type=float, default=1.0)
    landscape.set_defaults(handler=run_landscape)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT)
    try:
        return args.handler(args)
    except (ConfigError, ValueError) as e:
        logger.error("%s", e)
        return 1
    except (MeltsimError, FloatingPointError, OSError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        return 2


if __name__ == "__main__":
    sys.exit(main())
