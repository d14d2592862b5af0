"""Experiment registry: every lab experiment at desk scale, with pinned acceptance thresholds.

An experiment takes a validated ExperimentConfig and a ResultWriter, writes its tables through the
writer and returns the checks it evaluated plus a few headline values for the summary.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
import itertools
import logging
import math
from typing import Callable

import numpy as np

from source.collective_spin import build_collective_ops, coherent_state_x, max_entropy_state, qubit_state
from source.datamodels import (
    BlochState,
    CollectiveOps,
    Duration,
    FieldStrength,
    IntegratorName,
    MaxOrder,
    MeasurementRecord,
    PositiveFloat,
    PositiveInt,
    QubitCount,
    Seed,
    TimeStep,
    WienerRealization,
    expectation,
)
from source.errors import ConfigError
from source.estimation import gradient_check, online_estimate, scan_estimate, track_gradient
from source.fokker_planck import (
    C0,
    current_sweep,
    density_on_grid,
    ergodicity_test,
    fp_evolve,
    kl_divergence,
    normalization,
    probability_current,
    recursion_residual,
    stationary_distribution,
    suggest_max_order,
    uniform_coefficients,
)
from source.reader import ResultWriter, load_record
from source.trajectory import (
    bloch_components,
    bloch_distance,
    generate_wiener,
    lyapunov_check,
    matrix_l1_distance,
    propagator_rank_ratio,
    purity_bound_slack,
    purity_diagnostics,
    rho_y_closed_form,
    run_bloch_ensemble,
    run_bloch_trajectory,
    run_polar_trajectory,
    run_trajectory,
)
from source.utils import circular_distance, fan_out, wrap_angle


logger = logging.getLogger(__name__)

QUBIT_QUADRANTS = ((0.5, -0.5), (0.5, 0.5), (-0.5, 0.5), (-0.5, -0.5))

# pinned acceptance thresholds
PURITY_BOUND = 1e-3
THETA_SPREAD_BOUND = 1e-2
PURITY_SLACK_TOL = -0.25
MIXEDNESS_FLOOR = 1e-8
REPLAY_DISTANCE_BOUND = 1e-2
MULTIQUBIT_L1_BOUND = 0.05
RESIDUAL_BOUND = 1e-9
FLATNESS_BOUND = 1e-8
NORMALIZATION_BOUND = 1e-10
NEGATIVITY_BOUND = 1e-10
LARGE_FIELD_RATIO = 0.97
MEAN_PEAK_FIELD = 0.4
MEAN_PEAK_WINDOW = 0.1
TV_BOUND = {0.1: 0.03, 1.0: 0.02}
TV_DEFAULT_BOUND = 0.03
KL_INCREASE_TOL = 1e-12
KL_FINAL_DISTANCE = 1e-6
SIGMA_BAND = 5.0
ORACLE_BOUND = 1e-6
REFINEMENT_RATIO = 1.3
DT_REFINEMENT = 4
GRADIENT_DEVIATION = 0.005
ONLINE_BAND = 0.1
TRACKING_BOUND = 0.05
TAIL_FRACTION = 0.25
LYAPUNOV_ANGLES = (0.0, 0.5, 1.0)
RHO_Y_CHECK_TIMES = (1.0, 3.0, 5.0)


def parse_float_list(value) -> tuple[float, ...]:
    """Accept "0.1,1" or an iterable of numbers."""
    if isinstance(value, str):
        value = [item for item in value.replace(" ", "").split(",") if item]
    try:
        numbers = tuple(FieldStrength.validate_field(item) for item in value)
    except TypeError as e:
        raise ValueError(f"Expected a comma separated list of numbers, entered: {value}") from e
    if not numbers:
        raise ValueError("List of values should not be empty")
    return numbers


def parse_flag(value) -> bool:
    if isinstance(value, bool):
        return value
    if str(value).casefold() in ("1", "true", "yes", "on"):
        return True
    if str(value).casefold() in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"Expected a boolean, entered: {value}")


def _optional(validator: Callable) -> Callable:
    def validate(value):
        return None if value is None or value == "none" else validator(value)

    return validate


CONFIG_VALIDATORS: dict[str, Callable] = {
    "n_qubits": QubitCount.validate_qubits,
    "b": FieldStrength.validate_field,
    "dt": TimeStep.validate_time_step,
    "total_time": Duration.validate_duration,
    "seed": lambda value: Seed(value).value,
    "integrator": lambda value: IntegratorName(value).value,
    "out": str,
    "stride": PositiveInt.validate_positive_int,
    "gamma": _optional(PositiveFloat.validate_positive),
    "b0": FieldStrength.validate_field,
    "b_max": PositiveFloat.validate_positive,
    "ema_window": _optional(PositiveFloat.validate_positive),
    "grid_start": FieldStrength.validate_field,
    "grid_stop": FieldStrength.validate_field,
    "grid_step": PositiveFloat.validate_positive,
    "b_values": _optional(parse_float_list),
    "max_order": MaxOrder.validate_max_order,
    "depth": PositiveInt.validate_positive_int,
    "bins": PositiveInt.validate_positive_int,
    "draws": PositiveInt.validate_positive_int,
    "ensemble": PositiveInt.validate_positive_int,
    "seeds": PositiveInt.validate_positive_int,
    "workers": PositiveInt.validate_positive_int,
    "record": _optional(str),
    "db": PositiveFloat.validate_positive,
    "check": parse_flag,
}
CONFIG_ALIASES = {"time": "total_time", "n": "n_qubits"}


@dataclass
class ExperimentConfig:
    """Validated knobs of one experiment run; unused knobs are ignored by the experiment."""

    experiment: str
    n_qubits: int = 1
    b: float = 1.0
    dt: float = 0.01
    total_time: float = 400.0
    seed: None | int = 0
    integrator: str = "kraus"
    out: str = "results"
    stride: int = 100
    gamma: None | float = None
    b0: float = 0.5
    b_max: float = 2.0
    ema_window: None | float = None
    grid_start: float = -1.5
    grid_stop: float = 1.5
    grid_step: float = 0.05
    b_values: None | tuple[float, ...] = None
    max_order: int = 500
    depth: int = 100
    bins: int = 63
    draws: int = 100_000
    ensemble: int = 10_000
    seeds: int = 1
    workers: int = 1
    record: None | str = None
    db: float = 0.02
    check: bool = False

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"Unknown experiment '{self.experiment}', choose one of: {', '.join(EXPERIMENTS)}")
        for name, validator in CONFIG_VALIDATORS.items():
            try:
                setattr(self, name, validator(getattr(self, name)))
            except ValueError as e:
                raise ConfigError(f"Invalid value for '{name}': {e}") from e
        if self.total_time < self.dt:
            raise ConfigError(f"Total time should be at least one time step, entered: {self.total_time} < {self.dt}")
        if not 0 <= self.b0 <= self.b_max:
            raise ConfigError(f"Initial estimate b0 should lie in [0, b_max], entered: {self.b0}")
        if self.grid_stop < self.grid_start:
            raise ConfigError(f"Grid stop should not be below grid start, entered: {self.grid_start}..{self.grid_stop}")

    @classmethod
    def from_values(cls, experiment: str, *layers: dict) -> ExperimentConfig:
        """Merge experiment defaults with ``layers`` (later layers win) and validate.

        Raises:
            ConfigError: on an unknown experiment or key, or an invalid value.
        """
        if experiment not in EXPERIMENTS:
            raise ConfigError(f"Unknown experiment '{experiment}', choose one of: {', '.join(EXPERIMENTS)}")
        known = {f.name for f in fields(cls)} - {"experiment"}
        values = dict(EXPERIMENTS[experiment].defaults)
        for layer in layers:
            for key, value in layer.items():
                key = CONFIG_ALIASES.get(key.replace("-", "_"), key.replace("-", "_"))
                if key not in known:
                    raise ConfigError(f"Unknown configuration key '{key}'")
                if value is not None:
                    values[key] = value
        return cls(experiment=experiment, **values)

    @property
    def steps(self) -> int:
        return max(1, int(round(self.total_time / self.dt)))

    @property
    def sweep_fields(self) -> tuple[float, ...]:
        return self.b_values or (self.b,)

    def b_grid(self) -> np.ndarray:
        count = int(math.floor((self.grid_stop - self.grid_start) / self.grid_step + 1e-9)) + 1
        return np.round(self.grid_start + self.grid_step * np.arange(count), 12)

    def dump_data_to_json(self) -> dict:
        data = asdict(self)
        if data["b_values"] is not None:
            data["b_values"] = list(data["b_values"])
        return data


def load_config_file(path: str) -> dict[str, str]:
    """Read ``key=value`` lines; blank lines and ``#`` comments are skipped.

    Raises:
        ConfigError: on a missing file or a line without '=', naming the line number.
    """
    values = {}
    try:
        with open(path, "r") as config_in:
            for line_number, line in enumerate(config_in, start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, value = line.partition("=")
                if not sep or not key.strip():
                    raise ConfigError(f"{path}, line {line_number}: expected key=value, got '{line}'")
                values[key.strip()] = value.strip()
    except FileNotFoundError as e:
        raise ConfigError(f"Config file {path} does not exist") from e
    return values


@dataclass
class Check:
    """One acceptance test; ``upper`` means the value must stay below the threshold."""

    name: str
    value: float
    threshold: float
    upper: bool = True

    def __post_init__(self):
        self.value = float(self.value)
        self.threshold = float(self.threshold)
        self.upper = bool(self.upper)

    @property
    def passed(self) -> bool:
        if math.isnan(self.value):
            return False
        return bool(self.value < self.threshold if self.upper else self.value > self.threshold)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "value": self.value,
            "threshold": self.threshold,
            "bound": "upper" if self.upper else "lower",
            "passed": self.passed,
        }


@dataclass
class ExperimentOutcome:
    experiment: str
    checks: list[Check]
    values: dict = field(default_factory=dict)
    files: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def failed_checks(self) -> list[Check]:
        return [check for check in self.checks if not check.passed]

    def summary_line(self) -> str:
        if not self.checks:
            return f"{self.experiment}: done, no checks"
        status = "PASS" if self.passed else "FAIL"
        worst = ", ".join(f"{c.name}={c.value:.3g}" for c in self.failed_checks()) or "all within thresholds"
        return f"{self.experiment}: {status} ({len(self.checks)} checks; {worst})"


@dataclass(frozen=True)
class Experiment:
    name: str
    run: Callable[[ExperimentConfig, ResultWriter], tuple[list[Check], dict]]
    defaults: dict

    @property
    def description(self) -> str:
        return (self.run.__doc__ or "").strip()


EXPERIMENTS: dict[str, Experiment] = {}


def register(name: str, **defaults):
    def decorator(func):
        EXPERIMENTS[name] = Experiment(name=name, run=func, defaults=defaults)
        return func

    return decorator


def _qubit_batch(ops: CollectiveOps) -> np.ndarray:
    return np.stack([qubit_state(x, z, ops=ops).data for x, z in QUBIT_QUADRANTS])


def _generation_drive(config: ExperimentConfig, stream: int) -> WienerRealization:
    return generate_wiener(config.dt, config.steps, config.seed, stream=stream)


def _loaded_record(config: ExperimentConfig) -> None | MeasurementRecord:
    """The ``--record`` file as a measurement record, or None when none was given."""
    if config.record is None:
        return None
    record = load_record(config.record, dt=config.dt, kind="dY")
    if record.b_true is None:
        logger.warning("Record %s carries no b_true: replay only, checks against the true field skipped", config.record)
    return record


def _pairwise_max(values: np.ndarray) -> float:
    return float(max(circular_distance(a, b) for a, b in itertools.combinations(values, 2)))


def _fig1_member(task: tuple[ExperimentConfig, float, int]) -> dict:
    config, b, index = task
    ops = build_collective_ops(1)
    realization = _generation_drive(config, index)
    series = run_trajectory(_qubit_batch(ops), ops, b, realization, config.integrator, config.stride)
    diagnostics = purity_diagnostics(series, ops)

    reference = run_trajectory(_qubit_batch(ops)[0], ops, b, realization, "kraus", stride=1)
    path = bloch_components(reference.states, ops)
    mixedness = 1 - (path**2).sum(axis=1)
    below = np.flatnonzero(mixedness <= MIXEDNESS_FLOOR)
    resolved = int(below[0]) if len(below) else len(mixedness)
    slack = purity_bound_slack(mixedness[:resolved], path[:resolved, 2], reference.innovations[: resolved - 1], config.dt)
    return {
        "b": b,
        "index": index,
        "t": diagnostics["t"],
        "defect": diagnostics["bloch_defect"],
        "theta": diagnostics["theta"],
        "min_slack": float(slack.min()),
    }


@register("fig1_convergence", b=1.0, dt=0.01, total_time=400.0, seeds=5)
def fig1_convergence(config: ExperimentConfig, writer: ResultWriter):
    """Four mixed single-qubit states on one shared realization purify and converge to the same angle."""
    tasks = [(config, b, index) for b in config.sweep_fields for index in range(config.seeds)]
    members = fan_out(_fig1_member, tasks, config.workers)

    for member in members:
        if member["index"] == 0:
            theta = member["theta"]
            columns = {"t": member["t"]}
            columns.update({f"defect_{i}": member["defect"][:, i] for i in range(len(QUBIT_QUADRANTS))})
            columns.update({f"dtheta_{i}": wrap_angle(theta[:, i] - theta[:, 0]) for i in range(1, len(QUBIT_QUADRANTS))})
            writer.write_table(f"b{member['b']:g}", columns)

    worst_defect = max(float(np.max(m["defect"][-1])) for m in members)
    worst_spread = max(_pairwise_max(m["theta"][-1]) for m in members)
    values = {"final_defect_max": worst_defect, "theta_spread_max": worst_spread,
              "purity_bound_slack_min": min(m["min_slack"] for m in members)}
    checks = [
        Check("final_defect", worst_defect, PURITY_BOUND),
        Check("theta_spread", worst_spread, THETA_SPREAD_BOUND),
        Check("purity_bound_slack", values["purity_bound_slack_min"], PURITY_SLACK_TOL, upper=False),
    ]
    return checks, values


@register("fig2_stationary", b_values=(0.05, 0.1, 0.5, 1.0, 2.0), max_order=500, depth=100)
def fig2_stationary(config: ExperimentConfig, writer: ResultWriter):
    """Stationary angular densities by continued fractions, with recursion, current and normalisation checks."""
    checks, columns, values = [], {}, {}
    for b in config.sweep_fields:
        order = config.max_order if b == 0 else max(config.max_order, suggest_max_order(b, 1e-12))
        dist = stationary_distribution(b, order, config.depth)
        theta, density = density_on_grid(dist)
        columns.setdefault("theta", theta)
        columns[f"P_b{b:g}"] = density
        if b == 0:
            values["b0_quotient_max_deviation"] = float(np.max(np.abs(dist.quotients + 1)))
            continue
        j_sta, flatness = probability_current(dist)
        checks += [
            Check(f"residual_b{b:g}", recursion_residual(dist), RESIDUAL_BOUND),
            Check(f"flatness_b{b:g}", flatness, FLATNESS_BOUND),
            Check(f"normalization_b{b:g}", abs(normalization(dist) - 1), NORMALIZATION_BOUND),
            Check(f"negativity_b{b:g}", max(0.0, -float(density.min())), NEGATIVITY_BOUND),
        ]
        values[f"j_sta_b{b:g}"] = j_sta
    if columns:
        # grids differ in size when the mode cap grows; keep the common default grid
        size = min(len(c) for c in columns.values())
        writer.write_table("density", {k: v if len(v) == size else v[:: len(v) // size] for k, v in columns.items()})
    return checks, values


@register("fig3_current", b_values=tuple(np.round(0.05 * np.arange(1, 41), 10)), max_order=500, depth=100)
def fig3_current(config: ExperimentConfig, writer: ResultWriter):
    """Sweep of the stationary current ratio and mean angle over the field."""
    rows = current_sweep(config.sweep_fields, config.max_order, config.depth)
    b, j_sta, ratio, mean_theta = rows.T
    writer.write_table("sweep", {"B": b, "J_sta": j_sta, "J_ratio": ratio, "mean_theta": mean_theta})

    increasing = bool(np.all(np.diff(ratio) > 0))
    peak = float(b[np.argmax(mean_theta)])
    checks = [
        Check("ratio_increasing", float(increasing), 0.5, upper=False),
        Check("ratio_at_largest_b", float(ratio[-1]), LARGE_FIELD_RATIO, upper=False),
        Check("mean_theta_peak_offset", abs(peak - MEAN_PEAK_FIELD), MEAN_PEAK_WINDOW + 1e-9),
    ]
    return checks, {"mean_theta_peak_b": peak, "ratio_at_largest_b": float(ratio[-1])}


@register("fig4_replay", b=0.1, dt=0.01, total_time=400.0)
def fig4_replay(config: ExperimentConfig, writer: ResultWriter):
    """States prepared in the wrong quadrant, replayed on the record of a reference state, join the reference."""
    ops = build_collective_ops(1)
    initial = _qubit_batch(ops)
    record = _loaded_record(config)
    if record is None:
        reference = run_trajectory(initial[0], ops, config.b, _generation_drive(config, 0), config.integrator, config.stride)
        record = reference.record

    replayed = run_trajectory(initial, ops, config.b, record, config.integrator, config.stride)
    states = replayed.states
    distances = np.stack([bloch_distance(states[:, i], states[:, 0], ops) for i in range(1, len(initial))], axis=1)
    defect = purity_diagnostics(replayed, ops)["bloch_defect"]
    columns = {"t": replayed.times}
    columns.update({f"distance_{i}": distances[:, i - 1] for i in range(1, len(initial))})
    columns.update({f"defect_{i}": defect[:, i] for i in range(len(initial))})
    writer.write_table("replay", columns)

    times, ratios = propagator_rank_ratio(ops, config.b, record, stride=config.stride)
    writer.write_table("rank_ratio", {"t": times, "ratio": ratios})
    worst = float(distances[-1].max())
    return [Check("final_distance", worst, REPLAY_DISTANCE_BOUND)], {"final_rank_ratio": float(ratios[-1])}


@register("fig5_multiqubit", n_qubits=10, b=5.0, dt=0.001, total_time=20.0)
def fig5_multiqubit(config: ExperimentConfig, writer: ResultWriter):
    """Coherent and maximum-entropy states of N qubits, each replayed on the other's record."""
    ops = build_collective_ops(config.n_qubits)
    starts = {"coh": coherent_state_x(ops).data, "maxS": max_entropy_state(ops).data}
    checks, values = [], {}
    columns = {}
    for index, (label, own) in enumerate(starts.items()):
        other_label = "maxS" if label == "coh" else "coh"
        reference = run_trajectory(own, ops, config.b, _generation_drive(config, index), config.integrator, config.stride)
        cross = run_trajectory(starts[other_label], ops, config.b, reference.record, config.integrator, config.stride)
        distance = matrix_l1_distance(cross.states, reference.states)
        mixedness = [purity_diagnostics(series, ops)["mixedness"] for series in (reference, cross)]
        columns.setdefault("t", reference.times)
        columns[f"mix_{label}_on_{label}"] = mixedness[0]
        columns[f"mix_{other_label}_on_{label}"] = mixedness[1]
        columns[f"l1_on_{label}"] = distance
        checks += [
            Check(f"mixedness_{label}_on_{label}", float(mixedness[0][-1]), PURITY_BOUND),
            Check(f"mixedness_{other_label}_on_{label}", float(mixedness[1][-1]), PURITY_BOUND),
            Check(f"l1_on_{label}", float(distance[-1]), MULTIQUBIT_L1_BOUND),
        ]
        values[f"l1_on_{label}"] = float(distance[-1])
    writer.write_table("cross_replay", columns)
    return checks, values


def _true_trajectory(config: ExperimentConfig, ops: CollectiveOps, stream: int):
    initial = coherent_state_x(ops).data
    series = run_trajectory(initial, ops, config.b, _generation_drive(config, stream), config.integrator, config.stride)
    return initial, series


def _online_member(task: tuple[ExperimentConfig, int]) -> dict:
    config, index = task
    ops = build_collective_ops(config.n_qubits)
    record, truth = _loaded_record(config), None
    if record is None:
        initial, truth = _true_trajectory(config, ops, index)
        record = truth.record
    else:
        initial = coherent_state_x(ops).data

    gamma = config.gamma if config.gamma is not None else 0.5 * config.dt
    series = online_estimate(record, ops, initial, config.b0, gamma, config.b_max, config.stride, config.ema_window)
    result = {"index": index, "series": series, "b_true": record.b_true}
    if truth is not None:
        result["jx_true"] = expectation(truth.states, ops.jx)
        result["jz_true"] = expectation(truth.states, ops.jz)
    return result


def tail_tracking(times: np.ndarray, start: float, estimated, true) -> tuple[float, float]:
    """Median and mean over t >= start of the per-sample worst component deviation |est - true|.

    The median is insensitive to short excursions of the estimate.
    """
    window = np.asarray(times) >= start
    deviation = np.max([np.abs(np.asarray(e) - np.asarray(t))[window] for e, t in zip(estimated, true)], axis=0)
    return float(np.median(deviation)), float(np.mean(deviation))


@register("fig6_online", n_qubits=1, b=1.0, dt=0.01, total_time=400.0, b0=0.5, b_max=2.0, seeds=3)
def fig6_online(config: ExperimentConfig, writer: ResultWriter):
    """Simultaneous state and field estimation from the record; B_est settles around the true field."""
    members = fan_out(_online_member, [(config, i) for i in range(config.seeds)], config.workers)
    start = (1 - TAIL_FRACTION) * config.total_time
    checks, values = [], {}
    for member in members:
        series, index = member["series"], member["index"]
        columns = {"t": series.times, "B_est": series.b_est, "loglik": series.loglik,
                   "loglik_grad": series.loglik_grad, "jx_est": series.jx, "jz_est": series.jz}
        if series.b_ema is not None:
            columns["B_ema"] = series.b_ema
        if "jx_true" in member:
            columns["jx_true"], columns["jz_true"] = member["jx_true"], member["jz_true"]
        writer.write_table(f"seed{index}", columns)

        tail = series.tail_mean(start)
        values[f"tail_mean_{index}"] = tail
        b_true = member["b_true"]
        if b_true is not None:
            error = abs(tail - b_true) / abs(b_true) if b_true else abs(tail)
            checks.append(Check(f"tail_error_{index}", error, ONLINE_BAND))
        if "jx_true" in member:
            median, mean = tail_tracking(series.times, start, (series.jx, series.jz), (member["jx_true"], member["jz_true"]))
            values[f"tracking_mean_{index}"] = mean
            checks.append(Check(f"tracking_{index}", median, TRACKING_BOUND))
    return checks, values


def _refined_records(config: ExperimentConfig, ops: CollectiveOps):
    """(initial, record at dt, record at dt / DT_REFINEMENT) with both records from one true path.

    The true path runs at the fine step and its record is summed into coarse bins. A loaded record
    has no finer counterpart, so the third entry is then None.
    """
    record = _loaded_record(config)
    if record is not None:
        return coherent_state_x(ops).data, record, None
    initial = coherent_state_x(ops).data
    drive = generate_wiener(config.dt / DT_REFINEMENT, DT_REFINEMENT * config.steps, config.seed, stream=0)
    fine = run_trajectory(initial, ops, config.b, drive, config.integrator, stride=drive.steps).record
    return initial, fine.coarsen(DT_REFINEMENT), fine


@register("fig6_scan", n_qubits=1, b=1.0, dt=0.01, total_time=400.0, grid_start=-1.5, grid_stop=1.5, grid_step=0.05)
def fig6_scan(config: ExperimentConfig, writer: ResultWriter):
    """Grid likelihood scan: global maximum at the true field, a secondary maximum at its mirror image.

    Kraus and Euler replays must agree on the argmax at dt and, for generated records, at dt / 4.
    """
    ops = build_collective_ops(config.n_qubits)
    initial, record, fine = _refined_records(config, ops)
    grid = config.b_grid()
    step = config.grid_step + 1e-9
    scans = {name: scan_estimate(record, ops, grid, initial, integrator=name) for name in ("kraus", "euler")}
    columns = {"B": grid, "loglik_kraus": scans["kraus"].loglik, "loglik_euler": scans["euler"].loglik}

    main = scans[config.integrator]
    values = {"argmax": main.argmax_b, "secondary": main.secondary_b,
              "euler_diverged": scans["euler"].diverged_b().tolist()}
    checks = [Check("integrator_argmax_gap", abs(scans["kraus"].argmax_b - scans["euler"].argmax_b), step)]
    if fine is not None:
        refined = {name: scan_estimate(fine, ops, grid, initial, integrator=name) for name in ("kraus", "euler")}
        columns.update(loglik_kraus_fine=refined["kraus"].loglik, loglik_euler_fine=refined["euler"].loglik)
        values["euler_diverged_fine"] = refined["euler"].diverged_b().tolist()
        checks.append(Check("integrator_argmax_gap_fine", abs(refined["kraus"].argmax_b - refined["euler"].argmax_b), step))
    writer.write_table("scan", columns)

    b_true = record.b_true
    if b_true is not None:
        secondary = math.inf if main.secondary_b is None else abs(main.secondary_b + b_true)
        checks += [Check("argmax_offset", abs(main.argmax_b - b_true), step), Check("secondary_offset", secondary, step)]

        # at the maximum the slope is pure noise; compare signs halfway up the rising flank
        slope_b = float(grid[np.argmin(np.abs(grid - 0.5 * b_true))])
        gradient = track_gradient(record, ops, slope_b, initial, stride=record.steps).final.loglik_grad
        scan_slope = main.slope_at(slope_b)
        values.update(slope_b=slope_b, slope_gradient=gradient, scan_slope=scan_slope)
        checks.append(Check("slope_sign_agreement", float(np.sign(scan_slope) == np.sign(gradient)), 0.5, upper=False))
    return checks, values


@register("fig6_gradient", n_qubits=1, b=1.0, dt=0.01, total_time=400.0, db=0.02)
def fig6_gradient(config: ExperimentConfig, writer: ResultWriter):
    """Gradient of the log-likelihood from the tau recursion against a centred finite difference.

    Also reports how far tr[tau] drifts from the accumulated gradient, at dt and at dt / 4.
    """
    ops = build_collective_ops(config.n_qubits)
    initial, record, fine = _refined_records(config, ops)
    result = gradient_check(record, ops, config.b, initial, db=config.db, stride=config.stride)
    writer.write_table("gradient", {"t": result.times, "grad_sde": result.grad_sde, "grad_fd": result.grad_fd,
                                    "tau_trace": result.tau_trace})
    values = {"max_deviation": result.max_deviation, "range": result.value_range, "lockstep_gap": result.lockstep_gap}
    checks = [Check("relative_deviation", result.relative_deviation, GRADIENT_DEVIATION)]
    if fine is not None:
        fine_gap = track_gradient(fine, ops, config.b, initial, stride=DT_REFINEMENT * config.stride).lockstep_gap
        values["lockstep_gap_fine"] = fine_gap
    return checks, values


@register("ergodicity", b_values=(0.1, 1.0), dt=0.01, total_time=1e5, bins=63)
def ergodicity(config: ExperimentConfig, writer: ResultWriter):
    """Occupancy of one long angular path against the stationary bin probabilities."""
    checks, values = [], {}
    for b in config.sweep_fields:
        horizons = [config.total_time / 100, config.total_time / 10, config.total_time]
        results = [ergodicity_test(b, horizon, config.dt, config.seed, bins=config.bins) for horizon in horizons]
        final = results[-1]
        centers = 0.5 * (final.edges[1:] + final.edges[:-1])
        writer.write_table(f"b{b:g}", {"theta": centers, "occupancy": final.histogram, "stationary": final.stationary})
        distances = [r.tv_distance for r in results]
        values[f"tv_b{b:g}"] = distances
        checks += [
            Check(f"tv_b{b:g}", final.tv_distance, TV_BOUND.get(b, TV_DEFAULT_BOUND)),
            Check(f"tv_shrinks_b{b:g}", float(np.max(np.diff(distances))), 0.0),
        ]
    return checks, values


@register("lyapunov", b=0.0, dt=0.001, draws=100_000)
def lyapunov(config: ExperimentConfig, writer: ResultWriter):
    """One-step drift of |cos theta| against -|cos theta| dt / 2."""
    points = lyapunov_check(LYAPUNOV_ANGLES, config.dt, config.draws, config.seed, b=config.b)
    writer.write_table("drift", {
        "theta": [p.theta for p in points],
        "mean_dv": [p.mean_dv for p in points],
        "predicted": [p.predicted for p in points],
        "std_error": [p.std_error for p in points],
    })
    return [Check(f"z_theta{p.theta:g}", abs(p.z_score), SIGMA_BAND) for p in points], {}


def kl_initial_pair(max_order: int) -> tuple[np.ndarray, np.ndarray]:
    """(1 + cos(2 theta)/2) / (2 pi) and (1 + sin(2 theta)/2) / (2 pi) as coefficient vectors."""
    p, q = uniform_coefficients(max_order), uniform_coefficients(max_order)
    p[max_order + 2] = p[max_order - 2] = C0 / 4
    q[max_order + 2], q[max_order - 2] = 1j * C0 / 4, -1j * C0 / 4
    return p, q


@register("kl_monotone", b=1.0, dt=0.05, total_time=60.0, max_order=64)
def kl_monotone(config: ExperimentConfig, writer: ResultWriter):
    """Relative entropy between two evolving densities never grows and the densities merge."""
    p0, q0 = kl_initial_pair(config.max_order)
    p = fp_evolve(p0, config.b, config.dt, config.steps, method="exponential")
    q = fp_evolve(q0, config.b, config.dt, config.steps, method="exponential")
    entropy = np.array([kl_divergence(a, c) for a, c in zip(p.coeffs, q.coeffs)])
    distance = np.linalg.norm(p.coeffs - q.coeffs, axis=1)
    writer.write_table("entropy", {"t": p.times, "H": entropy, "l2_distance": distance})

    checks = [
        Check("max_entropy_increase", float(np.max(np.diff(entropy), initial=0.0)), KL_INCREASE_TOL),
        Check("final_l2_distance", float(distance[-1]), KL_FINAL_DISTANCE),
    ]
    return checks, {"initial_entropy": float(entropy[0])}


@register("rho_y_decay", b=1.0, dt=0.0025, total_time=5.0, ensemble=10_000)
def rho_y_decay(config: ExperimentConfig, writer: ResultWriter):
    """Kraus ensemble mean of rho_y against rho_y(0) exp(-t/2); the Bloch-form path checks its closed form."""
    initial = BlochState(0.0, 0.5, 0.0)
    stride = max(1, int(round(0.5 / config.dt)))
    times, samples = run_bloch_ensemble(initial, config.b, config.dt, config.steps, config.ensemble, config.seed, stride)
    rho_y = samples[:, :, 1]
    mean = rho_y.mean(axis=1)
    std_error = rho_y.std(axis=1, ddof=1) / math.sqrt(config.ensemble)
    predicted = initial.rho_y * np.exp(-times / 2)
    writer.write_table("ensemble", {"t": times, "mean_rho_y": mean, "std_error": std_error, "predicted": predicted})

    checks = []
    for t in RHO_Y_CHECK_TIMES:
        if t > times[-1] + 1e-9:
            continue
        i = int(np.argmin(np.abs(times - t)))
        checks.append(Check(f"z_t{t:g}", abs(mean[i] - predicted[i]) / std_error[i], SIGMA_BAND))

    realization = generate_wiener(config.dt, config.steps, config.seed, stream=1)
    _, path = run_bloch_trajectory(initial, config.b, realization, stride=1)
    closed = rho_y_closed_form(initial.rho_y, path[:, 2], realization.increments, config.dt)
    return checks, {"pathwise_closed_form_max_deviation": float(np.max(np.abs(closed - path[:, 1])))}


def _integrator_components(initial: BlochState, b: float, realization: WienerRealization, ops: CollectiveOps) -> dict:
    components = {}
    for name in ("euler", "kraus"):
        states = run_trajectory(initial.to_matrix(ops), ops, b, realization, name, stride=1).states
        components[name] = bloch_components(states, ops)
    _, components["bloch"] = run_bloch_trajectory(initial, b, realization, stride=1)
    _, radius, theta = run_polar_trajectory(initial.to_angular(), b, realization, stride=1)
    components["polar"] = np.stack([radius * np.cos(theta), np.zeros_like(radius), radius * np.sin(theta)], axis=-1)
    return components


def _max_gap(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)))


def _cross_member(task: tuple[ExperimentConfig, int]) -> dict:
    config, index = task
    ops = build_collective_ops(1)
    initial = BlochState(QUBIT_QUADRANTS[0][0], 0.0, QUBIT_QUADRANTS[0][1])
    fine = generate_wiener(config.dt / 4, 4 * config.steps, config.seed, stream=index)
    coarse = fine.coarsen(4)
    at_dt = _integrator_components(initial, config.b, coarse, ops)
    at_fine = _integrator_components(initial, config.b, fine, ops)
    return {
        "euler_bloch": _max_gap(at_dt["euler"], at_dt["bloch"]),
        "euler_kraus": _max_gap(at_dt["euler"], at_dt["kraus"]),
        "kraus_bloch": _max_gap(at_dt["kraus"], at_dt["bloch"]),
        "polar_bloch": _max_gap(at_dt["polar"], at_dt["bloch"]),
        "euler_kraus_fine": _max_gap(at_fine["euler"], at_fine["kraus"]),
    }


@register("cross_integrator", b=1.0, dt=0.001, total_time=10.0, seeds=5)
def cross_integrator(config: ExperimentConfig, writer: ResultWriter):
    """Matrix Euler, Kraus, Bloch and polar integrators on one shared realization."""
    members = fan_out(_cross_member, [(config, i) for i in range(config.seeds)], config.workers)
    keys = list(members[0])
    writer.write_table("deviations", {"seed": np.arange(len(members)), **{k: [m[k] for m in members] for k in keys}})

    ratios = [m["euler_kraus"] / m["euler_kraus_fine"] for m in members if m["euler_kraus_fine"] > 0]
    mean_ratio = float(np.mean(ratios)) if ratios else math.nan
    values = {k: max(m[k] for m in members) for k in keys}
    values["refinement_ratio"] = mean_ratio
    checks = [
        Check("euler_vs_bloch", values["euler_bloch"], ORACLE_BOUND),
        Check("refinement_ratio", mean_ratio, REFINEMENT_RATIO, upper=False),
    ]
    return checks, values


def run_experiment(config: ExperimentConfig) -> ExperimentOutcome:
    """Run one experiment, writing its tables and a JSON summary under ``config.out``.

    Raises:
        ConfigError: on unusable inputs.
        NumericalFailure: if an integrator or solver breaks down.
    """
    experiment = EXPERIMENTS[config.experiment]
    logger.info("Running %s (seed=%s, out=%s)", config.experiment, config.seed, config.out)
    with ResultWriter(config.out, config.experiment) as writer:
        checks, values = experiment.run(config, writer)
        outcome = ExperimentOutcome(config.experiment, checks, values, list(writer.written))
        writer.summary = {
            "experiment": config.experiment,
            "config": config.dump_data_to_json(),
            "values": values,
            "checks": [check.to_json() for check in checks],
            "passed": outcome.passed,
        }
    for check in outcome.failed_checks():
        logger.warning("%s: check %s missed, value %.4g vs threshold %.4g", config.experiment, check.name, check.value, check.threshold)
    return outcome


