"""Maximum-likelihood field estimation from a measurement record.

The log-likelihood follows dl = m (dY - m dt / 2) with m = 2 tr[rho Jz]. Its B-gradient is carried by
tau, the B-derivative of the un-normalised state divided by its trace, which is propagated with the
same Kraus operator as the state and with Omega_B = dOmega/dB = i Jy dt.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging
import math

import numpy as np

from source.datamodels import (
    CollectiveOps,
    EstimatorState,
    IntegratorName,
    MeasurementRecord,
    PositiveFloat,
    PositiveInt,
    dagger,
    expectation,
)
from source.errors import DegenerateInput, NumericalFailure
from source.trajectory import (
    DEFAULT_STRIDE,
    _as_array,
    apply_kraus,
    euler_update,
    kraus_operator,
    kraus_update,
    measurement_mean,
    repair_positivity,
)


logger = logging.getLogger(__name__)


def loglik_step(rho, ops: CollectiveOps, dy, dt: float):
    """dl = tr[M(rho)] (dY - tr[M(rho)] dt / 2) with tr[M(rho)] = 2 tr[rho Jz]."""
    m = measurement_mean(_as_array(rho), ops)
    return m * (dy - 0.5 * m * dt)


def tau_update(rho: np.ndarray, tau: np.ndarray, ops: CollectiveOps, b, dt: float, dy):
    """Joint Kraus update of (rho, tau).

    tau' = (Omega_B rho Omega^+ + Omega rho Omega_B^+ + Omega tau Omega^+) / n, rho' = Omega rho Omega^+ / n,
    with n = tr[Omega rho Omega^+].

    Returns:
        (rho', tau', n)
    """
    omega = kraus_operator(ops, b, dt, dy)
    omega_b = 1j * dt * ops.jy
    rho_new, norm = apply_kraus(rho, omega)
    omega_dag = dagger(omega)
    cross = omega_b @ rho @ omega_dag + omega @ rho @ dagger(omega_b) + omega @ tau @ omega_dag
    tau_new = cross / norm[..., None, None]
    return repair_positivity(rho_new), 0.5 * (tau_new + dagger(tau_new)), norm


def tau_step(est: EstimatorState, ops: CollectiveOps, dt: float, dy: float, b: None | float = None) -> EstimatorState:
    """Advance rho_est and tau with one record increment, at ``b`` or the current estimate.

    Raises:
        NumericalFailure: on a vanishing Kraus normalisation.
    """
    b = est.b_est if b is None else b
    rho, tau, norm = tau_update(est.rho_est, est.tau, ops, b, dt, dy)
    return est.evolve(rho_est=rho, tau=tau, log_norm=est.log_norm + math.log(float(norm)), step=est.step + 1)


def grad_loglik_step(est: EstimatorState, ops: CollectiveOps, dy: float, dt: float) -> float:
    """dl^B = (tr[M(tau)] - tr[M(rho)] tr[tau]) (dY - tr[M(rho)] dt), from the state before the update."""
    m = 2 * expectation(est.rho_est, ops.jz)
    m_tau = 2 * expectation(est.tau, ops.jz)
    return (m_tau - m * est.tau_trace()) * (dy - m * dt)


def replay_loglik(
    record: MeasurementRecord,
    ops: CollectiveOps,
    b_values,
    initial,
    integrator: str = "kraus",
    stride: int = DEFAULT_STRIDE,
    allow_divergence: bool = False,
):
    """Accumulate l_t(B) for every B at once by replaying the record on a batch of states.

    Euler replays at a B far from the one that produced the record can leave the state space and
    overflow. With ``allow_divergence`` such members are frozen at l = -inf and the rest carry on;
    otherwise the first one raises.

    Returns:
        (times, curves) with curves of shape (samples, len(b_values)).

    Raises:
        NumericalFailure: labelled with the step index, on a failed update, a diverged member
            without ``allow_divergence``, or once every member has diverged.
    """
    integrator = IntegratorName(integrator).value
    b = np.atleast_1d(np.asarray(b_values, dtype=float))
    start = np.broadcast_to(_as_array(initial), (len(b), ops.dim, ops.dim))
    rho = start.copy()
    loglik = np.zeros(len(b))
    diverged = np.zeros(len(b), dtype=bool)
    dt = record.dt

    sample_steps = list(range(0, record.steps + 1, stride))
    if sample_steps[-1] != record.steps:
        sample_steps.append(record.steps)
    curves = np.zeros((len(sample_steps), len(b)))
    next_sample = 1
    for k, dy in enumerate(record.increments):
        live = ~diverged if diverged.any() else slice(None)
        m = measurement_mean(rho[live], ops)
        loglik[live] = loglik[live] + m * (dy - 0.5 * m * dt)
        try:
            if integrator == "kraus":
                rho[live] = kraus_update(rho[live], ops, b[live], dt, dy)
            else:
                with np.errstate(over="ignore", invalid="ignore"):
                    rho[live] = euler_update(rho[live], ops, b[live], dt, dy - m * dt)
        except NumericalFailure as e:
            raise e.at_step(k) from e

        if integrator == "euler":
            bad = ~diverged & ~(np.isfinite(loglik) & np.all(np.isfinite(rho), axis=(-2, -1)))
            if bad.any():
                if not allow_divergence:
                    raise NumericalFailure(f"Euler replay diverged at B={b[bad][0]:g}", step=k)
                diverged |= bad
                if diverged.all():
                    raise NumericalFailure("Euler replay diverged at every B", step=k)
                logger.warning("Step %d: Euler replay diverged at B=%s, excluded from the scan", k, np.round(b[bad], 6).tolist())
                loglik[bad] = -np.inf
                rho[bad] = start[bad]

        if next_sample < len(sample_steps) and sample_steps[next_sample] == k + 1:
            curves[next_sample] = loglik
            next_sample += 1

    return dt * np.asarray(sample_steps), curves


@dataclass
class ScanResult:
    b_grid: np.ndarray
    loglik: np.ndarray
    raw_loglik: np.ndarray
    argmax_b: float
    secondary_b: None | float

    def diverged_b(self) -> np.ndarray:
        return self.b_grid[~np.isfinite(self.loglik)]

    def slope_at(self, b: float) -> float:
        """Centred grid derivative of the scan curve at the grid point nearest ``b``."""
        i = int(np.clip(np.argmin(np.abs(self.b_grid - b)), 1, len(self.b_grid) - 2))
        return float((self.loglik[i + 1] - self.loglik[i - 1]) / (self.b_grid[i + 1] - self.b_grid[i - 1]))


def local_maxima(curve: np.ndarray) -> np.ndarray:
    """Indices of interior local maxima."""
    inner = np.arange(1, len(curve) - 1)
    return inner[(curve[inner] > curve[inner - 1]) & (curve[inner] >= curve[inner + 1])]


def scan_estimate(
    record: MeasurementRecord,
    ops: CollectiveOps,
    b_grid,
    initial,
    integrator: str = "kraus",
) -> ScanResult:
    """Grid maximum-likelihood estimate; the curve is shifted so its maximum is 0.

    Grid points whose Euler replay diverged keep l = -inf and never win the argmax.

    Raises:
        DegenerateInput: on an empty record, where the curve is flat.
        NumericalFailure: if the replay diverges at every grid point.
        ValueError: on an empty grid.
    """
    b_grid = np.asarray(b_grid, dtype=float)
    if b_grid.size == 0:
        raise ValueError("Scan grid should not be empty")
    if record.steps == 0:
        raise DegenerateInput("empty record gives a flat likelihood, argmax undefined")

    _, curves = replay_loglik(record, ops, b_grid, initial, integrator=integrator, stride=record.steps, allow_divergence=True)
    raw = curves[-1]
    finite = np.flatnonzero(np.isfinite(raw))
    best = int(finite[np.argmax(raw[finite])])
    curve = raw - raw[best]
    others = [i for i in local_maxima(curve) if i != best]
    secondary = float(b_grid[max(others, key=lambda i: curve[i])]) if others else None
    logger.info("Scan over %d grid points: argmax %.4f, secondary %s", len(b_grid), b_grid[best], secondary)
    return ScanResult(b_grid=b_grid, loglik=curve, raw_loglik=raw, argmax_b=float(b_grid[best]), secondary_b=secondary)


@dataclass
class GradientTrack:
    times: np.ndarray
    loglik: np.ndarray
    loglik_grad: np.ndarray
    tau_trace: np.ndarray
    log_norm: np.ndarray
    final: EstimatorState

    @property
    def lockstep_gap(self) -> float:
        """max |tr[tau] - l^B| over the samples; vanishes as dt -> 0."""
        return float(np.max(np.abs(self.tau_trace - self.loglik_grad)))


def track_gradient(
    record: MeasurementRecord, ops: CollectiveOps, b: float, initial, stride: int = DEFAULT_STRIDE
) -> GradientTrack:
    """Replay the record at fixed B, accumulating l_t, l_t^B, tr[tau] and the log normalisation."""
    est = EstimatorState.start(_as_array(initial), b_est=b)
    dt = record.dt
    sample_steps = list(range(0, record.steps + 1, stride))
    if sample_steps[-1] != record.steps:
        sample_steps.append(record.steps)
    columns = np.zeros((4, len(sample_steps)))
    next_sample = 1
    for k, dy in enumerate(record.increments.tolist()):
        dl = float(loglik_step(est.rho_est, ops, dy, dt))
        dl_b = grad_loglik_step(est, ops, dy, dt)
        try:
            est = tau_step(est, ops, dt, dy)
        except NumericalFailure as e:
            raise e.at_step(k) from e
        est = est.evolve(loglik=est.loglik + dl, loglik_grad=est.loglik_grad + dl_b)
        if next_sample < len(sample_steps) and sample_steps[next_sample] == k + 1:
            columns[:, next_sample] = est.loglik, est.loglik_grad, est.tau_trace(), est.log_norm
            next_sample += 1

    return GradientTrack(dt * np.asarray(sample_steps), *columns, final=est)


@dataclass
class GradientCheck:
    times: np.ndarray
    grad_sde: np.ndarray
    grad_fd: np.ndarray
    tau_trace: np.ndarray

    @property
    def max_deviation(self) -> float:
        return float(np.max(np.abs(self.grad_sde - self.grad_fd)))

    @property
    def lockstep_gap(self) -> float:
        return float(np.max(np.abs(self.tau_trace - self.grad_sde)))

    @property
    def value_range(self) -> float:
        return float(np.ptp(self.grad_sde))

    @property
    def relative_deviation(self) -> float:
        return self.max_deviation / self.value_range if self.value_range > 0 else math.inf


def gradient_check(
    record: MeasurementRecord,
    ops: CollectiveOps,
    b: float,
    initial,
    db: float = 0.02,
    stride: int = DEFAULT_STRIDE,
) -> GradientCheck:
    """Compare the accumulated gradient SDE with (l_t(B + dB) - l_t(B - dB)) / (2 dB)."""
    db = PositiveFloat.validate_positive(db)
    track = track_gradient(record, ops, b, initial, stride=stride)
    _, curves = replay_loglik(record, ops, [b - db, b + db], initial, stride=stride)
    finite_difference = (curves[:, 1] - curves[:, 0]) / (2 * db)
    return GradientCheck(track.times, track.loglik_grad, finite_difference, track.tau_trace)


class ExponentialAverage:
    """Running exponential moving average, x <- (1 - alpha) x + alpha value."""

    def __init__(self, alpha: float, initial: None | float = None):
        if not 0 < alpha <= 1:
            raise ValueError(f"Smoothing factor should lie in (0, 1], entered: {alpha}")
        self.alpha = alpha
        self.value = initial

    @classmethod
    def from_window(cls, dt: float, window: float, initial: None | float = None) -> ExponentialAverage:
        """Average over roughly ``window`` time units."""
        return cls(min(1.0, dt / PositiveFloat.validate_positive(window)), initial)

    def update(self, value: float) -> float:
        if self.value is None:
            self.value = value
        else:
            self.value += self.alpha * (value - self.value)
        return self.value


@dataclass
class OnlineSeries:
    times: np.ndarray
    b_est: np.ndarray
    b_ema: None | np.ndarray
    loglik: np.ndarray
    loglik_grad: np.ndarray
    jx: np.ndarray
    jz: np.ndarray
    final: EstimatorState

    def tail_mean(self, start: float) -> float:
        return float(self.b_est[self.times >= start].mean())


def online_estimate(
    record: MeasurementRecord,
    ops: CollectiveOps,
    initial,
    b0: float,
    gamma: float,
    b_max: float,
    stride: int = DEFAULT_STRIDE,
    ema_window: None | float = None,
) -> OnlineSeries:
    """Simultaneous state and field estimation, B_est(t + dt) = clip(B_est(t) + gamma dl^B, 0, b_max).

    Each step evaluates dl and dl^B on the current (rho_est, tau), Kraus-updates both with B_est(t)
    and dY_t, then moves and clips B_est.

    Raises:
        ValueError: unless 0 <= b0 <= b_max and gamma > 0.
        NumericalFailure: labelled with the failing step index.
    """
    gamma = PositiveFloat.validate_positive(gamma)
    b_max = PositiveFloat.validate_positive(b_max)
    stride = PositiveInt.validate_positive_int(stride)
    if not 0 <= b0 <= b_max:
        raise ValueError(f"Initial estimate should lie in [0, {b_max}], entered: {b0}")

    dt = record.dt
    est = EstimatorState.start(_as_array(initial), b_est=b0)
    ema = ExponentialAverage.from_window(dt, ema_window, initial=b0) if ema_window else None

    sample_steps = list(range(0, record.steps + 1, stride))
    if sample_steps[-1] != record.steps:
        sample_steps.append(record.steps)
    columns = np.zeros((6, len(sample_steps)))
    columns[:, 0] = b0, b0, 0.0, 0.0, expectation(est.rho_est, ops.jx), expectation(est.rho_est, ops.jz)
    next_sample = 1
    for k, dy in enumerate(record.increments.tolist()):
        dl = float(loglik_step(est.rho_est, ops, dy, dt))
        dl_b = grad_loglik_step(est, ops, dy, dt)
        try:
            est = tau_step(est, ops, dt, dy)
        except NumericalFailure as e:
            raise e.at_step(k) from e
        b_new = min(max(est.b_est + gamma * dl_b, 0.0), b_max)
        est = est.evolve(b_est=b_new, loglik=est.loglik + dl, loglik_grad=est.loglik_grad + dl_b)
        smoothed = ema.update(b_new) if ema else b_new

        if next_sample < len(sample_steps) and sample_steps[next_sample] == k + 1:
            columns[:, next_sample] = (
                b_new,
                smoothed,
                est.loglik,
                est.loglik_grad,
                expectation(est.rho_est, ops.jx),
                expectation(est.rho_est, ops.jz),
            )
            next_sample += 1

    logger.info("Online estimate finished at B_est=%.4f after %d steps", est.b_est, record.steps)
    b_est, b_ema, loglik, loglik_grad, jx, jz = columns
    return OnlineSeries(
        times=dt * np.asarray(sample_steps),
        b_est=b_est,
        b_ema=b_ema if ema else None,
        loglik=loglik,
        loglik_grad=loglik_grad,
        jx=jx,
        jz=jz,
        final=est,
    )
