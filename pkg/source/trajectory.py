"""Quantum trajectories of the continuously measured collective spin.

Conventions: the Hamiltonian is H = -b Jy and the measurement channel is Jz, so the record increment is
dY = 2 tr[rho Jz] dt + dW. Two integrators evolve full density matrices (Euler-Maruyama and the
normalised Kraus map); single-qubit runs may also be integrated in Bloch, polar or angular form.
All matrix integrators accept a leading batch axis, e.g. several initial states under one drive.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging
import math
import warnings
from typing import Iterator

import numpy as np

from source.datamodels import (
    AngularState,
    BlochState,
    CollectiveOps,
    DensityMatrix,
    IntegratorName,
    MeasurementRecord,
    PositiveInt,
    StepCount,
    TimeStep,
    TrajectorySeries,
    WienerRealization,
    dagger,
    expectation,
)
from source.collective_spin import build_collective_ops
from source.errors import DegenerateInput, NumericalFailure
from source.utils import make_rng, wrap_angle


logger = logging.getLogger(__name__)

KRAUS_NORM_FLOOR = 1e-300
POSITIVITY_TOL = 1e-8
POSITIVITY_WARN = 1e-12
POLAR_RADIUS_FLOOR = 1e-12
DEFAULT_STRIDE = 100


def generate_wiener(dt: float, steps: int, seed: None | int, stream: None | int = None) -> WienerRealization:
    """Draw i.i.d. N(0, dt) increments.

    Args:
        dt: Time step.
        steps: Number of increments K.
        seed: Master seed; identical (seed, stream, dt, steps) give identical increments.
        stream: Optional stream index for ensembles sharing one master seed.

    Returns:
        WienerRealization carrying dt and seed.

    Raises:
        ValueError: if dt is not positive or steps is negative.
    """
    dt = TimeStep.validate_time_step(dt)
    steps = StepCount.validate_steps(steps)
    increments = make_rng(seed, stream).normal(0.0, math.sqrt(dt), size=steps)
    return WienerRealization(dt=dt, increments=increments, seed=seed)


def _as_array(rho) -> np.ndarray:
    if isinstance(rho, DensityMatrix):
        return rho.data
    return np.asarray(rho, dtype=complex)


def _like(template, data: np.ndarray):
    if isinstance(template, DensityMatrix):
        return DensityMatrix(data, validate=False)
    return data


def _matrix_scalar(value) -> np.ndarray:
    """Broadcast a scalar or batch of scalars against (..., d, d)."""
    return np.asarray(value, dtype=float)[..., None, None]


def measurement_mean(rho: np.ndarray, ops: CollectiveOps):
    """2 tr[rho Jz], the drift of the record."""
    return 2 * expectation(rho, ops.jz)


def euler_update(rho: np.ndarray, ops: CollectiveOps, b, dt: float, dw) -> np.ndarray:
    jy, jz, jz2 = ops.jy, ops.jz, ops.jz_squared
    hamiltonian = 1j * _matrix_scalar(b) * (jy @ rho - rho @ jy)
    dephasing = jz @ rho @ jz - 0.5 * (jz2 @ rho + rho @ jz2)
    innovation = rho @ jz + jz @ rho - _matrix_scalar(measurement_mean(rho, ops)) * rho
    return rho + (hamiltonian + dephasing) * dt + innovation * _matrix_scalar(dw)


def sme_step_euler(rho, ops: CollectiveOps, b, dt: float, dw):
    """One Euler-Maruyama step of the stochastic master equation.

    drho = i b [Jy, rho] dt + D[Jz] rho dt + (rho Jz + Jz rho - 2 tr[rho Jz] rho) dW.
    The trace is preserved to O(dt^2) but positivity is not guaranteed.
    """
    return _like(rho, euler_update(_as_array(rho), ops, b, dt, dw))


def kraus_operator(ops: CollectiveOps, b, dt: float, dy) -> np.ndarray:
    """Omega(dY) = I + i b Jy dt - Jz^2 dt / 2 + Jz dY, batched over b and dy."""
    return (
        ops.identity
        + 1j * _matrix_scalar(b) * dt * ops.jy
        - 0.5 * dt * ops.jz_squared
        + _matrix_scalar(dy) * ops.jz
    )


def apply_kraus(rho: np.ndarray, omega: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map rho to Omega rho Omega^dagger / norm and return the Hermitised result with its norm.

    Raises:
        NumericalFailure: if the norm is not above 1e-300.
    """
    unnormalized = omega @ rho @ dagger(omega)
    norm = np.asarray(np.trace(unnormalized, axis1=-2, axis2=-1).real)
    if not np.all(norm > KRAUS_NORM_FLOOR):
        raise NumericalFailure(
            f"Kraus normalisation vanished (min {float(np.min(norm)):.3e}), record inconsistent with the state"
        )
    normalized = unnormalized / norm[..., None, None]
    return 0.5 * (normalized + dagger(normalized)), norm


def repair_positivity(rho: np.ndarray) -> np.ndarray:
    """Clip slightly negative eigenvalues and renormalise.

    Raises:
        NumericalFailure: if an eigenvalue is below -1e-8.
    """
    lowest = np.linalg.eigvalsh(rho)[..., 0]
    if np.all(lowest >= 0):
        return rho

    worst = float(np.min(lowest))
    if worst < -POSITIVITY_TOL:
        raise NumericalFailure(f"positivity lost, minimum eigenvalue {worst:.3e}")
    if worst < -POSITIVITY_WARN:
        warnings.warn(f"clipping negative eigenvalue {worst:.3e} after Kraus update")

    values, vectors = np.linalg.eigh(rho)
    values = np.clip(values, 0.0, None)
    values = values / values.sum(axis=-1, keepdims=True)
    repaired = (vectors * values[..., None, :]) @ dagger(vectors)
    return np.where((lowest < 0)[..., None, None], repaired, rho)


def kraus_update(rho: np.ndarray, ops: CollectiveOps, b, dt: float, dy) -> np.ndarray:
    updated, _ = apply_kraus(rho, kraus_operator(ops, b, dt, dy))
    return repair_positivity(updated)


def sme_step_kraus(rho, ops: CollectiveOps, b, dt: float, dy):
    """One normalised Kraus step driven by the record increment dy.

    Args:
        rho: Density matrix, or a batch of them with shape (..., d, d).
        ops: Collective operators.
        b: Field, scalar or broadcastable against the batch.
        dt: Time step.
        dy: Record increment, scalar or broadcastable against the batch.

    Returns:
        Updated state(s), same container type as ``rho``.

    Raises:
        NumericalFailure: on a vanishing normalisation or lost positivity.
    """
    return _like(rho, kraus_update(_as_array(rho), ops, b, dt, dy))


def emit_measurement(rho, ops: CollectiveOps, dt: float, dw):
    """dY = 2 tr[rho Jz] dt + dW"""
    return measurement_mean(_as_array(rho), ops) * dt + dw


def bloch_components(rho, ops: CollectiveOps) -> np.ndarray:
    """(2 tr[rho Jx], 2 tr[rho Jy], 2 tr[rho Jz]) on the last axis, batched over leading axes of rho."""
    rho = _as_array(rho)
    return np.stack([2 * np.asarray(expectation(rho, op)) for op in (ops.jx, ops.jy, ops.jz)], axis=-1)


def bloch_step(s, b, dt: float, dw):
    """Euler step of the single-qubit SME in Bloch components.

    Accepts a BlochState or an array with last axis (rho_x, rho_y, rho_z); returns the same kind.
    """
    v = s.to_array() if isinstance(s, BlochState) else np.asarray(s, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    updated = np.stack(
        [
            x + (-0.5 * x - b * z) * dt - x * z * dw,
            y - 0.5 * y * dt - y * z * dw,
            z + b * x * dt + (1 - z * z) * dw,
        ],
        axis=-1,
    )
    if isinstance(s, BlochState):
        return BlochState.from_array(updated)
    return updated


def polar_step(s: AngularState, b: float, dt: float, dw: float) -> AngularState:
    """Euler step of (r, theta) with rho_x + i rho_z = r exp(i theta) and rho_y = 0.

    dr = cos^2(theta) (1 - r^2) / (2r) dt + sin(theta) (1 - r^2) dW
    dtheta = (b + sin(2 theta)/4 - sin(2 theta) (1 - r^2) / (2 r^2)) dt + cos(theta) / r dW

    A pure state (r == 1) keeps r exactly.

    Raises:
        DegenerateInput: if r < 1e-12, where theta is undefined.
    """
    r, theta = s.r, s.theta
    if r < POLAR_RADIUS_FLOOR:
        raise DegenerateInput(f"angle undefined at radius {r:.3e}")

    cos_t, sin_t, sin_2t = math.cos(theta), math.sin(theta), math.sin(2 * theta)
    defect = 1 - r * r
    if r == 1.0:
        r_new = 1.0
    else:
        r_new = r + 0.5 * cos_t * cos_t * defect / r * dt + sin_t * defect * dw
    theta_new = theta + (b + 0.25 * sin_2t - 0.5 * sin_2t * defect / (r * r)) * dt + cos_t / r * dw

    if r_new < POLAR_RADIUS_FLOOR:
        raise DegenerateInput(f"radius collapsed to {r_new:.3e}")
    return AngularState(r=min(r_new, 1.0), theta=theta_new)


def angular_step(theta, b, dt: float, dw):
    """Pure-state angle: dtheta = (b + sin(2 theta)/4) dt + cos(theta) dW, wrapped into (-pi, pi]."""
    return wrap_angle(theta + (b + 0.25 * np.sin(2 * theta)) * dt + np.cos(theta) * dw)


def replay_angular_pair_step(theta, theta_ref, b, dt: float, dw):
    """Advance a pure state replayed on the record of a reference pure state.

    The reference emits dY = sin(theta_ref) dt + dW; the replayed state sees the innovation
    dY - sin(theta) dt, which adds cos(theta) (sin(theta_ref) - sin(theta)) to its drift.

    Returns:
        (theta, theta_ref) after the step.
    """
    drift = b + 0.25 * np.sin(2 * theta) + np.cos(theta) * (np.sin(theta_ref) - np.sin(theta))
    return wrap_angle(theta + drift * dt + np.cos(theta) * dw), angular_step(theta_ref, b, dt, dw)


def iter_angular_path(
    theta0: float, b: float, dt: float, steps: int, rng: np.random.Generator, chunk: int = 1_000_000
) -> Iterator[np.ndarray]:
    """Yield the angular path in chunks; the scalar fast path of ``angular_step`` for very long runs."""
    theta = float(theta0)
    sd = math.sqrt(dt)
    two_pi = 2 * math.pi
    sin, cos = math.sin, math.cos
    remaining = steps
    while remaining > 0:
        n = min(chunk, remaining)
        samples = []
        append = samples.append
        for dw in rng.normal(0.0, sd, size=n).tolist():
            theta += (b + 0.25 * sin(2 * theta)) * dt + cos(theta) * dw
            if theta > math.pi:
                theta -= two_pi
            elif theta <= -math.pi:
                theta += two_pi
            append(theta)
        remaining -= n
        yield np.asarray(samples)


def _sample_steps(steps: int, stride: int) -> np.ndarray:
    sample_steps = list(range(0, steps + 1, stride))
    if sample_steps[-1] != steps:
        sample_steps.append(steps)
    return np.asarray(sample_steps)


def run_trajectory(
    initial,
    ops: CollectiveOps,
    b,
    drive: WienerRealization | MeasurementRecord,
    integrator: str = "kraus",
    stride: int = DEFAULT_STRIDE,
) -> TrajectorySeries:
    """Integrate the SME along a realization or replay a measurement record.

    With a WienerRealization the record is emitted as dY = 2 tr[rho Jz] dt + dW. With a
    MeasurementRecord each state uses its own innovation dW = dY - 2 tr[rho Jz] dt.

    Args:
        initial: Initial state, or a batch with shape (..., d, d) sharing the drive.
        ops: Collective operators.
        b: Field, scalar or one value per batch member.
        drive: Noise realization or record to replay.
        integrator: "kraus" (default) or "euler".
        stride: Keep every ``stride``-th state; the final state is always kept.

    Returns:
        TrajectorySeries with sampled states, the full record and the innovations.

    Raises:
        NumericalFailure: labelled with the failing step index.
    """
    integrator = IntegratorName(integrator).value
    stride = PositiveInt.validate_positive_int(stride)
    if isinstance(drive, WienerRealization):
        replay = False
    elif isinstance(drive, MeasurementRecord):
        replay = True
    else:
        raise TypeError(f"Drive should be a WienerRealization or MeasurementRecord, entered: {type(drive)}")

    rho = np.array(_as_array(initial), dtype=complex)
    dt, steps = drive.dt, drive.steps
    update = kraus_update if integrator == "kraus" else euler_update

    sample_steps = _sample_steps(steps, stride)
    states = np.empty((len(sample_steps), *rho.shape), dtype=complex)
    states[0] = rho
    batch_shape = np.broadcast_shapes(rho.shape[:-2], np.shape(b))
    record = np.empty((steps, *batch_shape))
    innovations = np.empty((steps, *batch_shape))

    logger.debug(
        "Running %s trajectory: %d steps, dt=%g, %s mode, batch %s",
        integrator, steps, dt, "replay" if replay else "generation", batch_shape,
    )
    next_sample = 1
    for k in range(steps):
        if replay:
            dy = drive.increments[k]
            dw = dy - measurement_mean(rho, ops) * dt
        else:
            dw = drive.increments[k]
            dy = emit_measurement(rho, ops, dt, dw)
        record[k] = dy
        innovations[k] = dw

        try:
            rho = update(rho, ops, b, dt, dy if integrator == "kraus" else dw)
        except NumericalFailure as e:
            raise e.at_step(k) from e
        if integrator == "euler" and not np.all(np.isfinite(rho)):
            raise NumericalFailure("Euler update produced a non-finite state", step=k)

        if next_sample < len(sample_steps) and sample_steps[next_sample] == k + 1:
            states[next_sample] = rho
            next_sample += 1

    b_true = drive.b_true if replay else (float(b) if np.ndim(b) == 0 else None)
    return TrajectorySeries(
        times=sample_steps * dt,
        sample_steps=sample_steps,
        states=states,
        record=MeasurementRecord(dt=dt, increments=record, b_true=b_true, seed=drive.seed),
        innovations=innovations,
        integrator=integrator,
        stride=stride,
    )


def run_bloch_trajectory(initial: BlochState, b: float, realization: WienerRealization, stride: int = 1):
    """Bloch-form Euler trajectory; returns (times, components) with components of shape (samples, 3).

    Raises:
        NumericalFailure: if a component stops being finite, labelled with the step index.
    """
    v = initial.to_array()
    sample_steps = _sample_steps(realization.steps, stride)
    out = np.empty((len(sample_steps), 3))
    out[0] = v
    next_sample = 1
    for k, dw in enumerate(realization.increments):
        v = bloch_step(v, b, realization.dt, dw)
        if not np.all(np.isfinite(v)):
            raise NumericalFailure("Bloch update produced a non-finite state", step=k)
        if next_sample < len(sample_steps) and sample_steps[next_sample] == k + 1:
            out[next_sample] = v
            next_sample += 1
    return sample_steps * realization.dt, out


def run_polar_trajectory(initial: AngularState, b: float, realization: WienerRealization, stride: int = 1):
    """Polar-form trajectory; returns (times, r, theta)."""
    state = initial
    sample_steps = _sample_steps(realization.steps, stride)
    radius, angle = np.empty(len(sample_steps)), np.empty(len(sample_steps))
    radius[0], angle[0] = state.r, state.theta
    next_sample = 1
    for k, dw in enumerate(realization.increments.tolist()):
        try:
            state = polar_step(state, b, realization.dt, dw)
        except NumericalFailure as e:
            raise e.at_step(k) from e
        if next_sample < len(sample_steps) and sample_steps[next_sample] == k + 1:
            radius[next_sample], angle[next_sample] = state.r, state.theta
            next_sample += 1
    return sample_steps * realization.dt, radius, angle


def run_bloch_ensemble(
    initial: BlochState, b: float, dt: float, steps: int, size: int, seed: None | int, stride: int = DEFAULT_STRIDE
):
    """Independent single-qubit trajectories advanced together as one batch of Kraus updates.

    Every member draws its own increments from one generator and stays a valid state, so its Bloch
    vector never leaves the unit ball.

    Returns:
        (times, samples) with samples of shape (S, size, 3) holding (rho_x, rho_y, rho_z).

    Raises:
        NumericalFailure: labelled with the failing step index.
    """
    ops = build_collective_ops(1)
    rng = make_rng(seed)
    sd = math.sqrt(dt)
    rho = np.broadcast_to(initial.to_matrix(ops).data, (size, 2, 2)).copy()
    sample_steps = _sample_steps(steps, stride)
    out = np.empty((len(sample_steps), size, 3))
    out[0] = initial.to_array()
    next_sample = 1
    for k in range(steps):
        dy = emit_measurement(rho, ops, dt, rng.normal(0.0, sd, size=size))
        try:
            rho = kraus_update(rho, ops, b, dt, dy)
        except NumericalFailure as e:
            raise e.at_step(k) from e
        if next_sample < len(sample_steps) and sample_steps[next_sample] == k + 1:
            out[next_sample] = bloch_components(rho, ops)
            next_sample += 1
    return sample_steps * dt, out


def purity_diagnostics(series: TrajectorySeries, ops: CollectiveOps) -> dict[str, np.ndarray]:
    """Per-sample purity summaries.

    Always reports ``mixedness`` = 1 - tr[rho^2]. Single-qubit runs also report the Bloch components,
    ``bloch_defect`` = 1 - |rho|^2 and the angle theta of (rho_x, rho_z).
    """
    states = series.states
    purity = np.einsum("...ij,...ji->...", states, states).real
    diagnostics = {"t": series.times, "mixedness": 1 - purity}
    if ops.n_qubits == 1:
        x, y, z = (2 * expectation(states, op) for op in (ops.jx, ops.jy, ops.jz))
        diagnostics.update(
            rho_x=x,
            rho_y=y,
            rho_z=z,
            bloch_defect=1 - (x * x + y * y + z * z),
            theta=np.arctan2(z, x),
        )
    return diagnostics


def bloch_distance(states_a: np.ndarray, states_b: np.ndarray, ops: CollectiveOps) -> np.ndarray:
    """Euclidean distance between single-qubit Bloch vectors."""
    delta = states_a - states_b
    return np.sqrt(sum((2 * expectation(delta, op)) ** 2 for op in (ops.jx, ops.jy, ops.jz)))


def matrix_l1_distance(states_a: np.ndarray, states_b: np.ndarray) -> np.ndarray:
    """sum_ij |a_ij - b_ij|"""
    return np.abs(states_a - states_b).sum(axis=(-2, -1))


def purity_bound_slack(mixedness: np.ndarray, rho_z: np.ndarray, dw: np.ndarray, dt: float) -> np.ndarray:
    """Slack of ln eps_t <= ln eps_0 - t + sum(-2 rho_z dW) along a single-qubit path.

    Args:
        mixedness: eps = 1 - |rho|^2 at steps 0..K.
        rho_z: rho_z at steps 0..K.
        dw: Innovations dW_1..dW_K.
        dt: Time step.

    Returns:
        bound - ln eps at steps 0..K; non-negative up to discretisation error.
    """
    rho_z = np.asarray(rho_z, dtype=float)
    times = dt * np.arange(len(mixedness))
    martingale = np.concatenate([[0.0], np.cumsum(-2 * rho_z[:-1] * np.asarray(dw))])
    log_eps = np.log(mixedness)
    return log_eps[0] - times + martingale - log_eps


def rho_y_closed_form(rho_y0: float, rho_z: np.ndarray, dw: np.ndarray, dt: float) -> np.ndarray:
    """rho_y(t) = rho_y0 exp(-t/2 - int rho_z^2 ds / 2 - int rho_z dW), on steps 0..K."""
    rho_z = np.asarray(rho_z, dtype=float)[: len(dw)]
    exponent = np.cumsum(-0.5 * dt - 0.5 * rho_z * rho_z * dt - rho_z * np.asarray(dw))
    return rho_y0 * np.exp(np.concatenate([[0.0], exponent]))


def purification_time_bound(eps: float, delta: float) -> float:
    """Time after which P(time-averaged mixedness > eps) < delta: 4/delta + 2 ln(1/eps)."""
    if not 0 < eps < 1:
        raise ValueError(f"eps should lie in (0, 1), entered: {eps}")
    if delta <= 0:
        raise ValueError(f"delta should be positive, entered: {delta}")
    return 4 / delta + 2 * math.log(1 / eps)


def propagator_rank_ratio(ops: CollectiveOps, b: float, record: MeasurementRecord, stride: int = DEFAULT_STRIDE):
    """Second-to-first singular value ratio of the normalised Kraus product Omega_K ... Omega_1.

    The ratio goes to zero when the product becomes a rank-one projector, i.e. when the conditioned
    state no longer remembers where it started.

    Returns:
        (times, ratios) at the sampled steps.
    """
    sample_steps = _sample_steps(record.steps, stride)
    ratios = np.empty(len(sample_steps))
    ratios[0] = 1.0
    propagator = ops.identity.copy()
    next_sample = 1
    for k, dy in enumerate(record.increments):
        propagator = kraus_operator(ops, b, record.dt, dy) @ propagator
        propagator /= np.linalg.norm(propagator)
        if next_sample < len(sample_steps) and sample_steps[next_sample] == k + 1:
            singular = np.linalg.svd(propagator, compute_uv=False)
            ratios[next_sample] = singular[1] / singular[0]
            next_sample += 1
    return sample_steps * record.dt, ratios


@dataclass
class LyapunovPoint:
    theta: float
    v: float
    predicted: float
    mean_dv: float
    std_error: float

    @property
    def z_score(self) -> float:
        if self.std_error == 0:
            return 0.0 if abs(self.mean_dv - self.predicted) < 1e-15 else math.inf
        return (self.mean_dv - self.predicted) / self.std_error

    def within(self, sigmas: float = 5.0) -> bool:
        return abs(self.mean_dv - self.predicted) <= sigmas * self.std_error + 1e-15


def lyapunov_check(
    theta_samples, dt: float, draws: int, seed: None | int, b: float = 0.0
) -> list[LyapunovPoint]:
    """Monte-Carlo single-step drift of v(theta) = |cos theta| against -|cos theta| dt / 2.

    Each angle gets its own random stream so adding angles does not change earlier results.
    """
    dt = TimeStep.validate_time_step(dt)
    draws = PositiveInt.validate_positive_int(draws)
    points = []
    for index, theta in enumerate(np.atleast_1d(np.asarray(theta_samples, dtype=float))):
        dw = make_rng(seed, index).normal(0.0, math.sqrt(dt), size=draws)
        v = abs(math.cos(theta))
        dv = np.abs(np.cos(angular_step(theta, b, dt, dw))) - v
        points.append(
            LyapunovPoint(
                theta=float(theta),
                v=v,
                predicted=-0.5 * v * dt,
                mean_dv=float(dv.mean()),
                std_error=float(dv.std(ddof=1) / math.sqrt(draws)) if draws > 1 else 0.0,
            )
        )
    return points
