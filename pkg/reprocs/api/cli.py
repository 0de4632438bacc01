"""
reprocs command line.

Verbs: generate, run, ensemble, check, oracle.
Exit codes: 0 success, 2 config error, 3 assumption failure in strict mode, 4 runtime failure.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from .. import __version__
from ..core.errors import ConfigError, ReprocsError
from ..core.settings import LOG_LEVEL
from ..services.assumptions import assess_scenario
from ..services.config import apply_tolerances, load_experiment_config
from ..services.harness import (
    initial_estimate,
    make_scenario,
    resolve_engine_params,
    run_ensemble,
    run_oracle,
    run_trial,
    trial_seed,
)
from ..services.storage import save_scenario, write_report

logger = logging.getLogger("reprocs")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ASSUMPTIONS = 3
EXIT_RUNTIME = 4


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Experiment config file (.ini)")
    common.add_argument("--seed", type=int, help="Base seed; trial i uses seed + i")
    common.add_argument("--trials", type=int, help="Number of Monte-Carlo trials")
    common.add_argument("--jobs", type=int, help="Parallel trial workers")
    common.add_argument("--out", help="Output directory")
    common.add_argument("--mode", choices=("mc", "rpca"), help="Matrix completion or robust PCA")
    common.add_argument(
        "--strict-assumptions", action="store_true", help="Fail (exit 3) when any assumption check fails"
    )
    common.add_argument("--trial", type=int, default=0, help="Trial index for generate / run / check / oracle")
    common.add_argument("-v", "--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(prog="reprocs", description="Online robust PCA and matrix completion experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbs = parser.add_subparsers(dest="verb", required=True)
    verbs.add_parser("generate", parents=[common], help="Write one scenario to disk")
    verbs.add_parser("run", parents=[common], help="Run a single trial")
    verbs.add_parser("ensemble", parents=[common], help="Run all trials and aggregate")
    verbs.add_parser("check", parents=[common], help="Assumption report only")
    verbs.add_parser("oracle", parents=[common], help="Batch-SVD reference curve")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    return {
        "base_seed": args.seed,
        "trials": args.trials,
        "jobs": args.jobs,
        "output_dir": args.out,
        "mode": args.mode,
        "strict_assumptions": True if args.strict_assumptions else None,
    }


def _generate(cfg, args) -> int:
    truth = make_scenario(cfg, trial_seed(cfg, args.trial))
    save_scenario(truth, Path(cfg.output_dir))
    return EXIT_OK


def _run(cfg, args) -> int:
    result = run_trial(cfg, args.trial, Path(cfg.output_dir))
    summary = result.summary
    if cfg.strict_assumptions and summary.assumptions_passed is False:
        return EXIT_ASSUMPTIONS
    if summary.failed:
        return EXIT_RUNTIME
    logger.info(
        f"exact support: {summary.exact_support}, detection delays: {summary.detection_delays}, "
        f"settled errors: {summary.settled_errors}"
    )
    return EXIT_OK


def _ensemble(cfg, args) -> int:
    summary, results = run_ensemble(cfg, Path(cfg.output_dir))
    if cfg.strict_assumptions and any(r.summary.assumptions_passed is False for r in results):
        return EXIT_ASSUMPTIONS
    if summary.failed_trials == summary.trials:
        return EXIT_RUNTIME
    return EXIT_OK


def _check(cfg, args) -> int:
    seed = trial_seed(cfg, args.trial)
    truth = make_scenario(cfg, seed)
    params, _ = resolve_engine_params(cfg, truth)
    P_init, _ = initial_estimate(cfg, truth, seed)
    mode = "strict" if cfg.strict_assumptions else "advisory"
    report = assess_scenario(truth, params, cfg.engine.zeta, P_init, mode=mode)
    path = write_report(report, Path(cfg.output_dir))
    for check in report.checks:
        status = {True: "pass", False: "FAIL", None: "-"}[check.passed]
        logger.info(f"{check.name:16s} {status:4s} measured={check.measured:.6g} bound={check.bound:.6g}")
    logger.info(f"Assumption report written to {path}")
    if mode == "strict" and not report.overall_pass:
        return EXIT_ASSUMPTIONS
    return EXIT_OK


def _oracle(cfg, args) -> int:
    run_oracle(cfg, args.trial, Path(cfg.output_dir))
    return EXIT_OK


VERBS = {
    "generate": _generate,
    "run": _run,
    "ensemble": _ensemble,
    "check": _check,
    "oracle": _oracle,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else LOG_LEVEL,
        format="[%(levelname)s] %(message)s",
    )

    try:
        cfg = load_experiment_config(args.config, _overrides(args))
        apply_tolerances(cfg)
    except (ConfigError, ValidationError) as e:
        logger.error(f"Config error: {e}")
        return EXIT_CONFIG

    try:
        return VERBS[args.verb](cfg, args)
    except (ConfigError, ValidationError) as e:
        logger.error(f"Config error: {e}")
        return EXIT_CONFIG
    except ReprocsError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception(f"Unexpected failure: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
