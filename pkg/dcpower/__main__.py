"""dcpower: delay-constrained energy-efficient power control experiments."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .config import ExperimentConfig, default_config_path, load_config
from .errors import ConfigError, DomainError
from .experiments import run_capacity, run_fig1, run_fig23, run_gamma_star, run_simulate, run_validate
from .output import ResultTable, format_value, write_table

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2

COMMANDS = ("gamma-star", "fig1", "fig23", "validate", "capacity", "simulate")


class _ArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; 2 is reserved for validation failures here."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        print(f"Error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Experiment JSON file (default: the shipped default.json)")
    common.add_argument("--seed", type=int, default=None,
                        help="Random seed; overrides DCPOWER_SEED and the config")
    common.add_argument("--out", help="Output directory (default: from config, 'results')")
    common.add_argument("--receiver", choices=["mf", "de", "mmse", "all"], default=None,
                        help="Receiver(s) to run (default: from config)")
    common.add_argument("--trials", type=int, default=None, help="Monte Carlo trials (validate)")
    common.add_argument("--format", choices=["csv", "dat"], default=None, dest="fmt",
                        help="Table format (default: from config, csv)")
    common.add_argument("--verbose", "-v", action="store_true",
                        help="Mirror debug logging to stderr; simulate also writes per-sweep traces")

    parser = _ArgumentParser(
        prog="dcpower",
        description="Nash equilibria of the delay-constrained power control game in CDMA uplinks.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)
    helps = {
        "gamma-star": "Solve for the utility-maximizing SIR γ*",
        "fig1": "Target SIR γ̃* as a function of β for each delay D",
        "fig23": "Utility loss u_c/u against the class split, per receiver",
        "validate": "Monte Carlo equilibria against the large-system formulas",
        "capacity": "Largest supportable load per receiver for the configured class mix",
        "simulate": "Solve one seeded network realization and report every user",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name], description=helps[name])
    return parser


def _configure_logging(out_dir: Path, verbose: bool) -> list[logging.Handler]:
    out_dir.mkdir(parents=True, exist_ok=True)
    file_handler = logging.FileHandler(out_dir / "dcpower.log", encoding="utf-8")
    file_handler.setLevel(logging.DEBUG)
    file_handler.setFormatter(logging.Formatter("%(asctime)s %(name)s %(levelname)s %(message)s"))
    handlers: list[logging.Handler] = [file_handler]
    if verbose:
        stream = logging.StreamHandler(sys.stderr)
        stream.setLevel(logging.DEBUG)
        stream.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        handlers.append(stream)

    package_logger = logging.getLogger("dcpower")
    package_logger.setLevel(logging.DEBUG)
    for handler in handlers:
        package_logger.addHandler(handler)
    return handlers


def _release_logging(handlers: list[logging.Handler]) -> None:
    package_logger = logging.getLogger("dcpower")
    for handler in handlers:
        package_logger.removeHandler(handler)
        handler.close()


def _write(tables: list[ResultTable], cfg: ExperimentConfig) -> None:
    for table in tables:
        paths = write_table(table, cfg.output.directory, cfg.output.formats)
        print(f"  {table.name}: {len(table.rows)} rows → {', '.join(p.name for p in paths)}")


def _run(command: str, cfg: ExperimentConfig, verbose: bool) -> int:
    receivers = cfg.scenario.receivers

    if command == "gamma-star":
        table = run_gamma_star(cfg)
        m, gamma, gamma_db, eff, residual = table.rows[0]
        print(f"  M = {m}")
        print(f"  γ* = {gamma:.6f} ({gamma_db:.4f} dB)")
        print(f"  f(γ*) = {eff:.6f}, residual |f − γf'| = {residual:.3e}")
        _write([table], cfg)
        return EXIT_OK

    if command == "fig1":
        _write([run_fig1(cfg)], cfg)
        return EXIT_OK

    if command == "fig23":
        _write(run_fig23(cfg, receivers), cfg)
        return EXIT_OK

    if command == "capacity":
        table = run_capacity(cfg, receivers)
        for row in table.rows:
            print(f"  {row[0]}: α_max = {row[2]:.6g} (unconstrained {row[3]:.6g})")
        _write([table], cfg)
        return EXIT_OK

    if command == "simulate":
        trace_dir = cfg.output.directory if verbose else None
        tables = run_simulate(cfg, receivers, trace_dir=trace_dir)
        for table in tables:
            print(f"  {table.name}: converged in {table.metadata['iterations']} sweep(s)")
        _write(tables, cfg)
        return EXIT_OK

    # validate
    report = run_validate(cfg, receivers)
    for row in report.table.rows:
        rx, name, users, _, mean, _, predicted, gap, band, within = row[:10]
        status = "ok" if within else "FAIL"
        print(
            f"  {rx} class {name} (K={users}): mean {format_value(mean)} vs "
            f"{format_value(predicted)} bits/J, gap {gap:.2%} (band {band:.0%}) {status}"
        )
    _write([report.table], cfg)
    if not report.passed:
        for failure in report.failures:
            print(f"Error: {failure}", file=sys.stderr)
        return EXIT_VALIDATION
    print("  Validation passed.")
    return EXIT_OK


def main(argv: list[str] | None = None) -> None:
    args = _build_parser().parse_args(argv)

    config_path = Path(args.config) if args.config else None
    try:
        cfg = load_config(
            config_path,
            seed=args.seed,
            out=Path(args.out) if args.out else None,
            receiver=args.receiver,
            trials=args.trials,
            fmt=args.fmt,
        )
    except (ConfigError, DomainError) as exc:
        print(f"Error: {exc}", file=sys.stderr)
        sys.exit(EXIT_USAGE)

    handlers = _configure_logging(cfg.output.directory, args.verbose)
    logger.info("CLI arguments: %s", vars(args))
    logger.info(
        "Config: %s (hash %s), seed %d, receivers %s",
        config_path or default_config_path(), cfg.config_hash, cfg.scenario.seed,
        [rx.value for rx in cfg.scenario.receivers],
    )

    print(f"[{args.command}] seed {cfg.scenario.seed}, output → {cfg.output.directory}")
    t0 = time.monotonic()
    try:
        code = _run(args.command, cfg, args.verbose)
    except (ConfigError, DomainError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(f"Error: {exc}", file=sys.stderr)
        code = EXIT_USAGE
    except Exception:
        logger.exception("Command %s failed", args.command)
        raise
    else:
        logger.info("[%s] completed in %.2fs with exit code %d", args.command, time.monotonic() - t0, code)
    finally:
        _release_logging(handlers)

    if code != EXIT_OK:
        sys.exit(code)


if __name__ == "__main__":
    main()
