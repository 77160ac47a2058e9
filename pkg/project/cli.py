import argparse
import logging
import os
import sys
from enum import Enum
from pathlib import Path
from typing import BinaryIO, List, Literal, Optional

import project.event_log_service
import project.montecarlo_service
import project.scenario_file_service
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from project.errors import NRulesError
from project.event_log_service import OutputFormat

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_PARADOX = 3

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")
DEFAULT_TRIALS = 10000


class Command(str, Enum):
    RUN = "run"
    BATCH = "batch"
    VALIDATE = "validate"
    LIST_SCENARIOS = "list-scenarios"


class UsageError(Exception):
    pass


class RunConfig(BaseModel):
    """
    Everything one invocation of the command line needs, after flags and environment are merged.
    """

    command: Command
    scenario_path: Optional[Path] = None
    seed: int = Field(default=0, ge=0)
    trials: int = DEFAULT_TRIALS
    dt: Optional[float] = Field(default=None, gt=0.0)
    out: Optional[Path] = None
    format: OutputFormat = OutputFormat.JSONL
    prune: bool = False
    workers: int = Field(default=1, ge=1)
    bins: int = Field(default=project.montecarlo_service.DEFAULT_BINS, ge=1)
    log_level: Literal["DEBUG", "INFO", "WARNING", "ERROR"] = "WARNING"

    @field_validator("scenario_path", "out", mode="before")
    @classmethod
    def _nonempty(cls, value):
        if value is not None and not str(value).strip():
            raise ValueError("paths must not be empty")
        return value

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        if self.command is Command.BATCH and self.trials < 1:
            raise ValueError("--trials must be at least 1")
        if self.command is not Command.LIST_SCENARIOS and self.scenario_path is None:
            raise ValueError("--scenario is required")
        return self


class CliParser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _default_workers() -> int:
    value = os.environ.get("NRULES_THREADS")
    if value is None:
        return os.cpu_count() or 1
    try:
        workers = int(value)
    except ValueError:
        raise UsageError(f"NRULES_THREADS must be an integer, got {value!r}") from None
    if workers < 1:
        raise UsageError(f"NRULES_THREADS must be at least 1, got {workers}")
    return workers


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="nrules", description="Simulate the nRules for Schrödinger's cat and its relatives.")
    parser.add_argument(
        "--log-level",
        choices=LOG_LEVELS,
        type=str.upper,
        default=os.environ.get("NRULES_LOG_LEVEL", "WARNING").upper(),
        help="log level for stderr (default: $NRULES_LOG_LEVEL or WARNING)",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser(Command.RUN.value, help="run one trial and write its event log")
    run.add_argument("--scenario", required=True, help="scenario file, or the name of a built-in one")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--dt", type=float, default=None, help="step in seconds (default 1e-3 * t_half)")
    run.add_argument("--out", type=Path, default=None, help="output file (default stdout)")
    run.add_argument("--format", choices=[f.value for f in OutputFormat], default=OutputFormat.JSONL.value)
    run.add_argument("--prune", action="store_true", help="drop phantoms at the cutoff and after an observation")

    batch = commands.add_parser(Command.BATCH.value, help="run seeded trials and write their summary")
    batch.add_argument("--scenario", required=True, help="scenario file, or the name of a built-in one")
    batch.add_argument("--seed", type=int, default=0, help="base seed; trial i uses split_seed(seed, i)")
    batch.add_argument("--trials", type=int, default=DEFAULT_TRIALS)
    batch.add_argument("--dt", type=float, default=None)
    batch.add_argument("--out", type=Path, default=None, help="summary file; the histogram goes next to it")
    batch.add_argument("--format", choices=[f.value for f in OutputFormat], default=OutputFormat.CSV.value)
    batch.add_argument("--prune", action="store_true")
    batch.add_argument("--workers", type=int, default=None, help="worker processes (default $NRULES_THREADS or all cores)")
    batch.add_argument("--bins", type=int, default=project.montecarlo_service.DEFAULT_BINS)

    validate = commands.add_parser(Command.VALIDATE.value, help="parse and check a scenario file")
    validate.add_argument("--scenario", required=True)

    commands.add_parser(Command.LIST_SCENARIOS.value, help="list the built-in configurations")
    return parser


def parse_config(argv: List[str]) -> RunConfig:
    args = build_parser().parse_args(argv)
    values = {
        "command": args.command,
        "log_level": args.log_level,
        "scenario_path": getattr(args, "scenario", None),
        "seed": getattr(args, "seed", 0),
        "dt": getattr(args, "dt", None),
        "out": getattr(args, "out", None),
        "prune": getattr(args, "prune", False),
    }
    if hasattr(args, "format"):
        values["format"] = args.format
    if args.command == Command.BATCH.value:
        values["trials"] = args.trials
        values["bins"] = args.bins
        values["workers"] = args.workers if args.workers is not None else _default_workers()
    try:
        return RunConfig(**values)
    except ValidationError as e:
        raise UsageError("; ".join(error["msg"] for error in e.errors())) from None


def configure_logging(level: str) -> None:
    logging.basicConfig(stream=sys.stderr, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    logging.getLogger("project").setLevel(level)


def resolve_scenario(path: Path) -> Path:
    """
    A scenario argument is a file path, or the stem of a built-in file such as `cat1+observer`.
    """
    if path.exists():
        return path
    for builtin in project.scenario_file_service.builtin_scenarios():
        if builtin.stem == str(path) or builtin.name == str(path):
            return builtin
    return path


def cmd_run(config: RunConfig, stdout: BinaryIO) -> int:
    spec = project.scenario_file_service.parse_scenario_file(resolve_scenario(config.scenario_path))
    trajectory = project.montecarlo_service.run_trial(spec, config.seed, config.dt, config.prune)
    data = project.event_log_service.emit_events(trajectory, config.format)
    project.event_log_service.write_bytes(data, config.out, stdout)
    logger.info("%s seed %d: %s", spec.name, config.seed, trajectory.outcome)
    return EXIT_OK


def cmd_batch(config: RunConfig, stdout: BinaryIO) -> int:
    spec = project.scenario_file_service.parse_scenario_file(resolve_scenario(config.scenario_path))
    summary = project.montecarlo_service.run_batch(
        spec,
        config.trials,
        config.seed,
        config.dt,
        workers=config.workers,
        prune=config.prune,
        bins=config.bins,
    )
    data = project.event_log_service.emit_summary(summary, config.format)
    histogram = project.event_log_service.emit_histogram(summary)
    if config.out is None:
        project.event_log_service.write_bytes(data + b"\n" + histogram, None, stdout)
    else:
        project.event_log_service.write_bytes(data, config.out)
        project.event_log_service.write_bytes(histogram, project.event_log_service.histogram_path(config.out))
    if summary.paradox_violations > 0:
        logger.error("%d of %d trials violate the experience order", summary.paradox_violations, summary.n_trials)
        return EXIT_PARADOX
    return EXIT_OK


def cmd_validate(config: RunConfig, stdout: BinaryIO) -> int:
    path = resolve_scenario(config.scenario_path)
    spec = project.scenario_file_service.check_scenario_file(path)
    line = f"{path}: ok ({spec.version.value}, lambda={spec.decay_constant:.12g}, t_half={spec.t_half:.12g})\n"
    stdout.write(line.encode("utf-8"))
    return EXIT_OK


def cmd_list_scenarios(config: RunConfig, stdout: BinaryIO) -> int:
    lines = [f"{version.value:<18} {description}" for version, description in project.scenario_file_service.describe_versions()]
    files = project.scenario_file_service.builtin_scenarios()
    if files:
        lines.append("")
        lines.append("built-in scenario files:")
        lines += [f"  {path.stem}" for path in files]
    stdout.write(("\n".join(lines) + "\n").encode("utf-8"))
    return EXIT_OK


HANDLERS = {
    Command.RUN: cmd_run,
    Command.BATCH: cmd_batch,
    Command.VALIDATE: cmd_validate,
    Command.LIST_SCENARIOS: cmd_list_scenarios,
}


def main(argv: Optional[List[str]] = None, stdout: Optional[BinaryIO] = None) -> int:
    """
    Entry point of the `nrules` command. Exit codes: 0 success, 1 usage error, 2 runtime error,
    3 when a batch finds trials whose experiences break the allowed order.

    Args:
        argv (Optional[List[str]]): Arguments without the program name; sys.argv[1:] by default.
        stdout (Optional[BinaryIO]): Where logs and summaries go without --out; sys.stdout.buffer by default.

    Returns:
        int: The exit code.

    Example:
        main(["run", "--scenario", "cat1", "--seed", "42"])
        > 0
    """
    argv = sys.argv[1:] if argv is None else argv
    stdout = sys.stdout.buffer if stdout is None else stdout
    try:
        config = parse_config(argv)
    except UsageError as e:
        sys.stderr.write(f"nrules: error: {e}\n")
        return EXIT_USAGE
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE

    configure_logging(config.log_level)
    try:
        return HANDLERS[config.command](config, stdout)
    except (NRulesError, OSError) as e:
        logger.error("%s failed: %s", config.command.value, e)
        sys.stderr.write(f"nrules: {e}\n")
        return EXIT_RUNTIME
    except Exception:
        logger.exception("Error processing command")
        return EXIT_RUNTIME


def run() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    run()
