import sys
import logging
from argparse import ArgumentParser
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from experiments import (
    run_solve, run_check, run_oracle_compare, run_lambda0, write_outputs
)
from mfbsde.logger import set_verbosity
from mfbsde.errors import MfbsdeError
from mfbsde.lq_oracle import riccati_to_frame
from mfbsde.utils.args_check import check_paths, check_seed
from mfbsde.utils.config import ExperimentConfig
from mfbsde.utils.timer import Timer

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_NOT_CONVERGED = 2
EXIT_CHECK_FAILED = 3
EXIT_ORACLE_GAP = 4

logger = logging.getLogger("mfbsde")


def cmd_solve(cfg: ExperimentConfig, out_dir: Path, timer: Timer) -> int:
    report = run_solve(cfg)

    frames = {"solution.csv": report.final.to_frame()} if report.final is not None else {}
    write_outputs(
        out_dir, cfg, "solve", frames, {"report.json": report.to_dict()}, timer,
        timing=dict(iterates=[it.to_dict(include_timing=True) for it in report.iterates])
    )

    if not report.converged:
        logger.warning(f"Solver did not converge, last delta {report.last_delta:.3e}")
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_check(cfg: ExperimentConfig, out_dir: Path, timer: Timer) -> int:
    reports = run_check(cfg)

    write_outputs(out_dir, cfg, "check", {}, {"checks.json": [r.to_dict() for r in reports]}, timer)

    failed = [r.condition_id for r in reports if not r.holds]
    if failed:
        logger.warning(f"Conditions not satisfied: {', '.join(failed)}")
        return EXIT_CHECK_FAILED
    return EXIT_OK


def cmd_oracle_compare(cfg: ExperimentConfig, out_dir: Path, timer: Timer) -> int:
    comparison = run_oracle_compare(cfg)

    frames = {
        "compare.csv": comparison.frame,
        "solution.csv": comparison.report.final.to_frame(),
        "riccati.csv": riccati_to_frame(comparison.riccati, cfg.model.lq_model)
    }
    document = dict(
        relative_gap=comparison.gap,
        tolerance=cfg.oracle.tolerance,
        root_rule=comparison.riccati.root_rule,
        report=comparison.report.to_dict()
    )
    write_outputs(out_dir, cfg, "oracle-compare", frames, {"report.json": document}, timer)

    if not comparison.report.converged:
        return EXIT_NOT_CONVERGED
    if not comparison.gap <= cfg.oracle.tolerance:
        logger.warning(f"Gap {comparison.gap:.4e} exceeds the tolerance {cfg.oracle.tolerance}")
        return EXIT_ORACLE_GAP
    return EXIT_OK


def cmd_lambda0(cfg: ExperimentConfig, out_dir: Path, timer: Timer) -> int:
    ensemble = run_lambda0(cfg)

    document = dict(
        kappa=cfg.lambda0.kappa,
        phi=cfg.lambda0.phi,
        psi=cfg.lambda0.psi,
        max_abs_mean_y_minus_x=float(np.max(np.abs((ensemble.y - ensemble.x).mean(axis=0)))),
        mean_z=float(ensemble.z.mean())
    )
    write_outputs(out_dir, cfg, "lambda0", {"solution.csv": ensemble.to_frame()}, {"report.json": document}, timer)
    return EXIT_OK


_COMMANDS_ = {
    "solve": cmd_solve,
    "check": cmd_check,
    "oracle-compare": cmd_oracle_compare,
    "lambda0": cmd_lambda0,
}


def build_parser() -> ArgumentParser:
    epilog = """
    Exit codes: 0 success, 1 error, 2 solver did not converge,
    3 a requested condition fails, 4 oracle gap above tolerance.
    Results are saved in the output directory of the config unless --out is given.
    """

    parser = ArgumentParser(
        prog="mfbsde",
        description="Particle solvers and checks for discounted infinite horizon McKean-Vlasov FBSDEs.",
        epilog=epilog
    )

    common = ArgumentParser(add_help=False)
    common.add_argument(
        "--config",
        required=True,
        type=Path,
        help="Toml file with the model, solver and output configuration"
    )
    common.add_argument(
        "--seed",
        default=None,
        type=check_seed,
        help="Unsigned 64-bit seed, overrides the config"
    )
    common.add_argument(
        "--out",
        default=None,
        type=Path,
        help="Output directory, overrides the config"
    )
    common.add_argument(
        "--verbose",
        default=False,
        action='store_true',
        help="Log every iteration at DEBUG level"
    )
    common.add_argument(
        "--quiet",
        default=False,
        action='store_true',
        help="Log warnings and errors only"
    )

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("solve", parents=[common], help="Solve the FBSDE with the configured method")
    commands.add_parser("check", parents=[common], help="Evaluate the requested sufficient conditions")
    commands.add_parser("oracle-compare", parents=[common], help="Cross-check an LQ solve against the Riccati solution")
    commands.add_parser("lambda0", parents=[common], help="Solve the decoupled base case of the continuation family")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    set_verbosity(args.verbose, args.quiet)

    timer = Timer(start=True)
    try:
        check_paths(((args.config, "toml"),))
        cfg = ExperimentConfig.load(args.config)
        if args.seed is not None:
            cfg.seed = args.seed

        out_dir = args.out if args.out is not None else Path(cfg.output.directory)
        return _COMMANDS_[args.command](cfg, out_dir, timer)

    except (MfbsdeError, FileNotFoundError) as e:
        logger.error(str(e))
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
