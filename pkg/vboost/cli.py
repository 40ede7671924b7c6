import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .boosting import VariationalBoosting
from .config import RunConfig, build_target, load_config, resolved_dict
from .exceptions import (
    ConfigError,
    DataFormatError,
    StageError,
    TargetSpecError,
    VBoostError,
)
from .mixture import MixtureApprox, load_mixture, save_mixture
from .oracle import (
    QuadratureGrid,
    chain_moment_table,
    quadrature_moment_table,
    quadrature_moments,
    rwm_sample,
)
from .report import Report
from .targets import TargetModel

logger = logging.getLogger("vboost")

INPUT_ERRORS = (ConfigError, DataFormatError, TargetSpecError)


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vboost", description="Variational boosting with low-rank mixture components"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    def add_command(name: str, help_text: str) -> argparse.ArgumentParser:
        command = commands.add_parser(name, help=help_text)
        command.add_argument("--config", required=True, help="run configuration JSON")
        command.add_argument("--out", help="output directory (overrides output_dir)")
        command.add_argument("--seed", type=int, help="seed (overrides vboost.seed)")
        command.add_argument(
            "--eval-samples", type=int, help="evaluation ELBO sample count"
        )
        command.add_argument("--verbose", action="store_true", help="debug logs and progress")
        return command

    add_command("run", "fit a mixture and write mixture.json, trace.csv, stages.csv")
    add_command("rank", "run the rank sweep only and write rank_sweep.csv")
    compare = add_command("compare", "compare a fitted mixture's moments with an oracle")
    compare.add_argument("--mixture", required=True, help="fitted mixture.json")
    return parser


def _output_dir(cfg: RunConfig) -> Path:
    if cfg.output_dir is None:
        raise ConfigError("no output directory: set output_dir or pass --out")
    return cfg.output_dir


def _write_resolved(cfg: RunConfig, out_dir: Path) -> None:
    with open(out_dir / "config.resolved.json", "w") as f:
        json.dump(resolved_dict(cfg), f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_run(cfg: RunConfig, verbose: bool = False) -> None:
    target = build_target(cfg.target)
    out_dir = _output_dir(cfg)
    result = VariationalBoosting(target, cfg.vboost, verbose).run()

    out_dir.mkdir(parents=True, exist_ok=True)
    save_mixture(result.mixture, out_dir / "mixture.json")
    report = Report(result)
    report.to_csv(out_dir)
    if result.rank_selection is not None:
        Report.rank_sweep_frame(result.rank_selection).to_csv(
            out_dir / "rank_sweep.csv", index=False
        )
    _write_resolved(cfg, out_dir)
    report.print_stats()


def cmd_rank(cfg: RunConfig, verbose: bool = False) -> None:
    target = build_target(cfg.target)
    out_dir = _output_dir(cfg)
    try:
        selection = VariationalBoosting(target, cfg.vboost, verbose).select_rank()
    except StageError:
        raise
    except VBoostError as exc:
        raise StageError(f"stage 0 (rank sweep): {exc}", 0) from exc

    out_dir.mkdir(parents=True, exist_ok=True)
    Report.rank_sweep_frame(selection).to_csv(out_dir / "rank_sweep.csv", index=False)
    _write_resolved(cfg, out_dir)
    print(f"Selected rank: {selection.rank}")


def _read_mixture(path: str) -> MixtureApprox:
    try:
        return load_mixture(path)
    except FileNotFoundError as exc:
        raise DataFormatError(f"{path}: no such mixture file") from exc
    except (json.JSONDecodeError, ValueError) as exc:
        raise DataFormatError(f"{path}: {exc}") from exc


def oracle_table(target: TargetModel, mix: MixtureApprox, cfg: RunConfig, verbose: bool = False):
    """Moment table from quadrature for 1D/2D targets, a tuned MH chain otherwise"""
    oracle = cfg.oracle
    if target.dim <= 2:
        mean = target.reference_mean if target.reference_mean is not None else mix.mean()
        cov = target.reference_cov if target.reference_cov is not None else mix.cov()
        grid = QuadratureGrid.around(
            mean, np.sqrt(np.diag(cov)), oracle.grid_width, oracle.grid_points
        )
        return quadrature_moment_table(quadrature_moments(target, grid))

    chain = rwm_sample(
        target,
        oracle.n_steps,
        oracle.burn_in,
        oracle.proposal_scale,
        np.random.default_rng(oracle.seed),
        x0=mix.mean(),
        verbose=verbose,
    )
    logger.info(f"oracle chain acceptance rate {chain.acceptance_rate:.3f}")
    return chain_moment_table(chain)


def cmd_compare(mixture_path: str, cfg: RunConfig, verbose: bool = False) -> None:
    mix = _read_mixture(mixture_path)
    target = build_target(cfg.target)
    if mix.dim != target.dim:
        raise ConfigError(f"mixture has dimension {mix.dim}, target has {target.dim}")
    out_dir = _output_dir(cfg)

    try:
        table = oracle_table(target, mix, cfg, verbose)
    except VBoostError as exc:
        raise StageError(f"oracle: {exc}", 0) from exc

    out_dir.mkdir(parents=True, exist_ok=True)
    Report.compare_moments_frame(mix, table).to_csv(
        out_dir / "compare_moments.csv", index=False
    )
    _write_resolved(cfg, out_dir)


def main(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)

    try:
        cfg = load_config(args.config, args.seed, args.eval_samples, args.out)
        if args.command == "run":
            cmd_run(cfg, args.verbose)
        elif args.command == "rank":
            cmd_rank(cfg, args.verbose)
        else:
            cmd_compare(args.mixture, cfg, args.verbose)
    except INPUT_ERRORS as exc:
        logger.error(str(exc))
        return 1
    except VBoostError as exc:
        logger.error(f"run failed: {exc}")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
