from __future__ import annotations

import argparse
from functools import wraps
import logging
import shlex
from typing import Any

from prompt_toolkit import PromptSession
from prompt_toolkit.completion import NestedCompleter

from source.autocomplete import get_autocomplete, style
from source.datamodels import INTEGRATORS
from source.errors import (
    AcceptanceFailure,
    BaseLabException,
    CommandNotSupported,
    ConfigError,
    LabSigStop,
    NumericalFailure,
)
from source.experiments import EXPERIMENTS, ExperimentConfig, load_config_file, run_experiment


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG_ERROR = 1
EXIT_NUMERICAL_FAILURE = 2
EXIT_ACCEPTANCE_FAILURE = 3
SHELL_COMMAND = "shell"

# argparse destinations forwarded to ExperimentConfig; "time" is an alias of total_time
CONFIG_FLAGS = (
    "b", "dt", "time", "seed", "out", "n_qubits", "integrator", "stride", "gamma", "b0", "b_max", "ema_window",
    "grid_start", "grid_stop", "grid_step", "b_values", "max_order", "depth", "bins", "draws", "ensemble", "seeds",
    "workers", "record", "db", "check",
)


class LabArgumentParser(argparse.ArgumentParser):
    """Parser that raises ConfigError instead of exiting, so the shell can keep running."""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> LabArgumentParser:
    parser = LabArgumentParser(
        prog="weakmag",
        description="Continuous weak measurement of a collective spin: trajectories, stationary densities "
        "and field estimation experiments.",
    )
    parser.add_argument("experiment", choices=[*EXPERIMENTS, SHELL_COMMAND], help="experiment to run, or 'shell'")
    parser.add_argument("--b", type=float, help="field B in units of the measurement rate")
    parser.add_argument("--dt", type=float, help="time step")
    parser.add_argument("--time", type=float, help="total time T")
    parser.add_argument("--seed", help="unsigned 64-bit master seed, or 'none'")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--n-qubits", type=int, help="number of qubits N")
    parser.add_argument("--integrator", choices=INTEGRATORS)
    parser.add_argument("--stride", type=int, help="keep every n-th state in the output tables")
    parser.add_argument("--gamma", type=float, help="online estimator learning rate (default 0.5*dt)")
    parser.add_argument("--b0", type=float, help="initial field estimate")
    parser.add_argument("--b-max", type=float, help="upper clip of the field estimate")
    parser.add_argument("--ema-window", type=float, help="time window of the smoothed field estimate")
    parser.add_argument("--grid-start", type=float, help="first field of a likelihood scan")
    parser.add_argument("--grid-stop", type=float, help="last field of a likelihood scan")
    parser.add_argument("--grid-step", type=float, help="spacing of a likelihood scan")
    parser.add_argument("--b-values", help="comma separated fields for sweeps")
    parser.add_argument("--max-order", type=int, help="Fourier mode cap M")
    parser.add_argument("--depth", type=int, help="continued fraction depth")
    parser.add_argument("--bins", type=int, help="histogram bins")
    parser.add_argument("--draws", type=int, help="Monte-Carlo draws")
    parser.add_argument("--ensemble", type=int, help="ensemble size")
    parser.add_argument("--seeds", type=int, help="number of independent repeats")
    parser.add_argument("--workers", type=int, help="worker processes for repeats")
    parser.add_argument("--record", help="measurement record file to replay")
    parser.add_argument("--db", type=float, help="finite difference step of the gradient check")
    parser.add_argument("--config", help="key=value file; flags override it")
    parser.add_argument("--check", action="store_true", default=None, help="exit with 3 if a threshold is missed")
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    return parser


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    """Experiment defaults, then the --config file, then explicit flags."""
    file_values = load_config_file(args.config) if args.config else {}
    flag_values = {flag: getattr(args, flag) for flag in CONFIG_FLAGS if getattr(args, flag) is not None}
    return ExperimentConfig.from_values(args.experiment, file_values, flag_values)


def execute(config: ExperimentConfig) -> str:
    """Run one configured experiment and return its summary line.

    Raises:
        AcceptanceFailure: if ``config.check`` is set and a threshold is missed.
    """
    outcome = run_experiment(config)
    line = outcome.summary_line()
    if config.check and not outcome.passed:
        raise AcceptanceFailure(line)
    return line


def input_error(error_msg_base):
    def decorator(func):
        @wraps(func)
        def wrapper(*args, **kwargs):
            try:
                return func(*args, **kwargs)
            except (
                BaseLabException,
                ValueError,
                KeyError,
            ) as e:
                if isinstance(e, LabSigStop):
                    raise
                return f"{error_msg_base}: {e}"

        return wrapper

    return decorator


class LabShell:
    """Interactive prompt that dispatches experiment command lines."""

    def __init__(self, parser: None | LabArgumentParser = None):
        self.parser = parser or build_parser()
        self.supported_commands = {
            "close": self.stop,
            "exit": self.stop,
            "run": self.run,
            "list": self.list_experiments,
            "show": self.show,
            "help": self.help,
        }

    @staticmethod
    def parse_input(user_input: str) -> (str, list[Any]):
        command, *args = shlex.split(user_input)
        command = command.casefold()

        if command in ["close", "exit"]:
            args = [f"Command '{command}' received. Bye!"]

        return command, args

    def execute_command(self, command: str, args: list[str]) -> str:
        if command not in self.supported_commands:
            raise CommandNotSupported(f"Command '{command}' is not supported. Type 'help' to list commands.")
        return self.supported_commands[command](*args)

    def help(self, *args: str) -> str:
        """Outputs the list of commands, or the help of one command."""
        if args:
            command = args[0]
            if command not in self.supported_commands:
                return "Command not supported. Type 'help' to get list of supported commands."
            return f"Command '{command}' help:\n{self.supported_commands[command].__doc__.split('Returns:')[0].strip()}"

        lines = ["Supported commands:", *sorted(self.supported_commands), "", "Type 'help <command>' for details."]
        return "\n".join(lines)

    def stop(self, message: str):
        """Stop the shell.

        Raises:
            LabSigStop: with the goodbye message
        """
        raise LabSigStop(message)

    @input_error(error_msg_base="Command 'run' failed")
    def run(self, *args: str) -> str:
        """Run an experiment: run <experiment> [--flag value ...], same flags as the command line.

        Returns:
            One-line summary of the checks.
        """
        if not args:
            raise ConfigError("command expects an experiment name")
        if args[0] == SHELL_COMMAND:
            raise ConfigError("already in the shell")
        return execute(build_config(self.parser.parse_args(list(args))))

    @input_error(error_msg_base="Command 'list' failed")
    def list_experiments(self, *args: str) -> str:
        """List experiments with their one-line descriptions."""
        return "\n".join(f"{name}: {exp.description.splitlines()[0]}" for name, exp in EXPERIMENTS.items())

    @input_error(error_msg_base="Command 'show' failed")
    def show(self, *args: str) -> str:
        """Show the description and default knobs of one experiment: show <experiment>."""
        if len(args) != 1:
            raise ConfigError(f"command expects one experiment name. Received: {' '.join(args)}")
        experiment = EXPERIMENTS[args[0]]
        defaults = ", ".join(f"{key}={value}" for key, value in experiment.defaults.items()) or "none"
        return f"{experiment.description}\nDefaults: {defaults}"

    def main(self) -> None:
        completer = NestedCompleter.from_nested_dict(
            get_autocomplete(list(EXPERIMENTS), list(self.supported_commands))
        )
        session = PromptSession(completer=completer, style=style)

        while True:
            try:
                user_input = session.prompt("weakmag> ")
                if not user_input.strip():
                    continue
                command, args = self.parse_input(user_input)
                print(self.execute_command(command, args))

            except LabSigStop as e:
                print(e)
                break

            except (CommandNotSupported, ValueError) as e:
                print(e)

            except (EOFError, KeyboardInterrupt):
                break


def main(argv: None | list[str] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as e:
        parser.print_usage()
        print(f"weakmag: error: {e}")
        return EXIT_CONFIG_ERROR

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s: %(message)s",
    )
    logging.captureWarnings(True)

    if args.experiment == SHELL_COMMAND:
        LabShell(parser).main()
        return EXIT_OK

    try:
        print(execute(build_config(args)))
    except (ConfigError, ValueError) as e:
        logger.error("Configuration error: %s", e)
        return EXIT_CONFIG_ERROR
    except NumericalFailure as e:
        logger.error("Numerical failure: %s", e)
        return EXIT_NUMERICAL_FAILURE
    except AcceptanceFailure as e:
        logger.error("Acceptance check failed: %s", e)
        return EXIT_ACCEPTANCE_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
