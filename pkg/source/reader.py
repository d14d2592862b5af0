from __future__ import annotations

import json
import logging
import math
import os

import numpy as np

from source.datamodels import RECORD_KINDS, MeasurementRecord, Seed, StepCount, TimeStep, WienerRealization
from source.errors import ConfigError, RecordFormatError


logger = logging.getLogger(__name__)

NUMBER_FORMAT = "%.17g"
HEADER_KEYS = ("kind", "dt", "steps", "seed", "b_true")
SUMMARY_FILE = "summary.json"


def _format_optional(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return NUMBER_FORMAT % value
    return str(value)


def save_record(record: WienerRealization | MeasurementRecord, path: str) -> str:
    """Write a realization or record as a commented header followed by one increment per line.

    Increments are printed with 17 significant digits, which round-trips doubles exactly.
    """
    increments = np.asarray(record.increments, dtype=float)
    if increments.ndim != 1:
        raise ValueError(f"Only single-member records can be saved, got increments of shape {increments.shape}")

    header = [
        f"# kind={record.kind}",
        f"# dt={NUMBER_FORMAT % record.dt}",
        f"# steps={record.steps}",
        f"# seed={_format_optional(record.seed)}",
    ]
    if isinstance(record, MeasurementRecord):
        header.append(f"# b_true={_format_optional(record.b_true)}")

    with open(path, "w") as record_out:
        record_out.write("\n".join(header) + "\n")
        for value in increments:
            record_out.write(NUMBER_FORMAT % value + "\n")
    logger.info("Saved %s record with %d steps to %s", record.kind, record.steps, path)
    return path


def _parse_header(line: str, line_number: int) -> tuple[str, str]:
    key, sep, value = line.lstrip("#").strip().partition("=")
    key, value = key.strip(), value.strip()
    if not sep or key not in HEADER_KEYS:
        raise RecordFormatError(f"unknown header entry '{line.strip()}'", line_number)
    return key, value


def load_record(
    path: str, dt: None | float = None, kind: None | str = None
) -> WienerRealization | MeasurementRecord:
    """Read a record written by ``save_record``.

    Args:
        path: Record file.
        dt: Time step the caller expects; a different stored dt is an error, never resampled.
        kind: Expected record kind, "dW" or "dY".

    Raises:
        RecordFormatError: on a malformed header or increment line, naming the line number.
        ConfigError: on a dt or kind mismatch, or a missing file.
    """
    header: dict[str, str] = {}
    values: list[float] = []
    try:
        with open(path, "r") as record_in:
            for line_number, line in enumerate(record_in, start=1):
                if not line.strip():
                    continue
                if line.startswith("#"):
                    if values:
                        raise RecordFormatError("header entry after the increments", line_number)
                    key, value = _parse_header(line, line_number)
                    header[key] = value
                    continue
                try:
                    number = float(line)
                except ValueError:
                    raise RecordFormatError(f"increment is not a number: '{line.strip()}'", line_number) from None
                if not math.isfinite(number):
                    raise RecordFormatError(f"increment is not finite: '{line.strip()}'", line_number)
                values.append(number)
    except FileNotFoundError as e:
        raise ConfigError(f"Record file {path} does not exist") from e

    for key in ("kind", "dt", "steps"):
        if key not in header:
            raise RecordFormatError(f"header is missing '{key}'", 1)
    if header["kind"] not in RECORD_KINDS:
        raise RecordFormatError(f"record kind should be one of {', '.join(RECORD_KINDS)}, got {header['kind']}", 1)

    try:
        stored_dt = TimeStep.validate_time_step(header["dt"])
        steps = StepCount.validate_steps(header["steps"])
        seed = Seed(header.get("seed", "none")).value
        b_true = header.get("b_true", "none")
        b_true = None if b_true == "none" else float(b_true)
    except ValueError as e:
        raise RecordFormatError(str(e), 1) from e
    if steps != len(values):
        raise RecordFormatError(f"header announces {steps} steps, file holds {len(values)}", None)

    if dt is not None and stored_dt != dt:
        raise ConfigError(f"Record dt={stored_dt!r} does not match configured dt={dt!r}")
    if kind is not None and header["kind"] != kind:
        raise ConfigError(f"Expected a {kind} record, {path} holds {header['kind']}")

    logger.info("Loaded %s record with %d steps from %s", header["kind"], steps, path)
    if header["kind"] == "dW":
        return WienerRealization(dt=stored_dt, increments=np.array(values), seed=seed)
    return MeasurementRecord(dt=stored_dt, increments=np.array(values), b_true=b_true, seed=seed)


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


class ResultWriter:
    """Owns one output directory: tables go to CSV files, the summary to JSON on exit."""

    def __init__(self, out_dir: str, experiment: str):
        self.out_dir = out_dir
        self.experiment = experiment
        self.summary: dict = {}
        self.written: list[str] = []

    def __enter__(self):
        try:
            os.makedirs(self.out_dir, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"Output path {self.out_dir} is not writable") from e
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if exc_type is None:
            self.save_summary()

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def write_table(self, name: str, columns: dict[str, np.ndarray]) -> str:
        """Write equal-length columns as a CSV with a single header row."""
        data = np.column_stack([np.asarray(column, dtype=float) for column in columns.values()])
        path = self.path(f"{self.experiment}_{name}.csv")
        np.savetxt(path, data, fmt=NUMBER_FORMAT, delimiter=",", header=",".join(columns), comments="")
        self.written.append(path)
        logger.debug("Wrote %d rows to %s", len(data), path)
        return path

    def save_record(self, record: WienerRealization | MeasurementRecord, name: str) -> str:
        path = save_record(record, self.path(f"{self.experiment}_{name}.rec"))
        self.written.append(path)
        return path

    def save_summary(self):
        """Save the summary with the list of files written by this run."""
        path = self.path(f"{self.experiment}_{SUMMARY_FILE}")
        payload = {**self.summary, "files": [os.path.basename(p) for p in self.written]}
        with open(path, "w") as json_out:
            json.dump(payload, json_out, indent=2, sort_keys=True, default=_json_default)
        logger.info("Saved summary to %s", path)
