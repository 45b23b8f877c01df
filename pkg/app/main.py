"""Command-line entry point: one subcommand per experiment scenario.

Configuration is layered as scenario defaults, then the published MNIST scale
when ``--full`` is given, then the TOML file from ``--config``, then the
per-field flags. The merged values are validated by ``ExperimentConfig``.
"""

from __future__ import annotations

import argparse
import sys

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from collections.abc import Callable, Sequence
from pathlib import Path
from typing import Any, get_args, get_origin

import structlog
from pydantic import ValidationError

from app import __version__
from app.config import settings
from app.exceptions import CloudKsvdError
from app.logging_config import configure_logging
from app.schemas.config import MNIST_FULL_SCALE, SCENARIO_DEFAULTS, SCENARIOS, ExperimentConfig
from app.services.mnist import default_mnist_paths
from app.services.scenarios import run_scenario
from app.services.site_pool import make_site_pool

logger = structlog.get_logger()

# Fields with their own dedicated flags (or none at all).
_RESERVED = {"scenario", "seed", "out", "full"}


def _int_tuple(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError as exc:
        msg = f"expected comma-separated integers, got {text!r}"
        raise argparse.ArgumentTypeError(msg) from exc


def _override_type(annotation: Any) -> Callable[[str], Any] | None:
    if annotation is int or annotation is float:
        return annotation  # type: ignore[no-any-return]
    if get_origin(annotation) is tuple:
        return _int_tuple
    if annotation is Path or Path in get_args(annotation):
        return Path
    return None


def _add_overrides(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("field overrides")
    for name, info in ExperimentConfig.model_fields.items():
        kind = _override_type(info.annotation)
        if name in _RESERVED or kind is None:
            continue
        group.add_argument(
            f"--{name.replace('_', '-')}",
            dest=name,
            type=kind,
            default=argparse.SUPPRESS,
            help=info.description,
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloud-ksvd",
        description="Run centralized, local and cloud K-SVD experiments.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="scenario", required=True, metavar="SCENARIO")
    for scenario in SCENARIOS:
        sub = subparsers.add_parser(scenario, help=f"run the {scenario} scenario")
        sub.add_argument("--config", type=Path, help="TOML file with ExperimentConfig fields")
        sub.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed")
        sub.add_argument(
            "--out",
            type=Path,
            default=argparse.SUPPRESS,
            help="output directory (default: $CLOUD_KSVD_OUTPUT_DIR/<scenario>)",
        )
        sub.add_argument(
            "--full", action="store_true", help="use the published MNIST scale (hours)"
        )
        sub.add_argument("--log-level", default=None, help="override CLOUD_KSVD_LOG_LEVEL")
        _add_overrides(sub)
    return parser


def _load_toml(path: Path) -> dict[str, Any]:
    with path.open("rb") as handle:
        data = tomllib.load(handle)
    data.pop("scenario", None)
    return data


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Merge defaults, the config file and command-line flags into one config.

    Raises:
        ValidationError: If the merged values violate a field constraint.
        OSError: If the config file cannot be read.
    """
    scenario: str = args.scenario
    from_file = _load_toml(args.config) if args.config is not None else {}
    full = bool(args.full or from_file.get("full", False))

    values: dict[str, Any] = dict(SCENARIO_DEFAULTS[scenario])
    if full and scenario == "mnist":
        values.update(MNIST_FULL_SCALE)
    values.update(from_file)
    overrides = {
        key: value
        for key, value in vars(args).items()
        if key not in {"scenario", "config", "full", "log_level"}
    }
    values.update(overrides)
    values["scenario"] = scenario
    values["full"] = full
    values.setdefault("out", settings.output_dir / scenario)

    if scenario == "mnist" and settings.mnist_dir is not None:
        images, labels = default_mnist_paths(settings.mnist_dir)
        values.setdefault("mnist_images", images)
        values.setdefault("mnist_labels", labels)
    return ExperimentConfig.model_validate(values)


def main(argv: Sequence[str] | None = None) -> int:
    """Parse *argv*, run the scenario and return the process exit code.

    Argument errors exit with 2 through argparse; configuration, algorithm
    and filesystem failures are logged to stderr and return 1.
    """
    args = build_parser().parse_args(argv)
    log_level = args.log_level or settings.log_level
    configure_logging(json_logs=settings.json_logs, log_level=log_level)

    try:
        cfg = build_config(args)
        result = run_scenario(cfg, pool=make_site_pool(settings.workers))
    except ValidationError as exc:
        logger.error(
            "invalid_config", scenario=args.scenario, errors=exc.error_count(), detail=str(exc)
        )
        return 1
    except tomllib.TOMLDecodeError as exc:
        logger.error("invalid_config_file", path=str(args.config), detail=str(exc))
        return 1
    except CloudKsvdError as exc:
        logger.error(
            "scenario_failed",
            scenario=args.scenario,
            error=type(exc).__name__,
            detail=str(exc),
        )
        return 1
    except OSError as exc:
        logger.error("io_error", path=exc.filename, detail=str(exc))
        return 1

    for name, rows in sorted(result.files.items()):
        print(f"{result.directory / name}\t{rows}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
