import math

import numpy as np
import pytest

from source.collective_spin import build_collective_ops, coherent_state_x, max_entropy_state, qubit_state
from source.datamodels import AngularState, BlochState, DensityMatrix, MeasurementRecord, WienerRealization
from source.errors import DegenerateInput, NumericalFailure
from source.trajectory import (
    angular_step,
    apply_kraus,
    bloch_components,
    bloch_step,
    emit_measurement,
    euler_update,
    generate_wiener,
    iter_angular_path,
    kraus_update,
    lyapunov_check,
    measurement_mean,
    polar_step,
    propagator_rank_ratio,
    purification_time_bound,
    purity_bound_slack,
    purity_diagnostics,
    repair_positivity,
    replay_angular_pair_step,
    rho_y_closed_form,
    run_bloch_ensemble,
    run_bloch_trajectory,
    run_trajectory,
    sme_step_euler,
    sme_step_kraus,
)
from source.utils import circular_distance, make_rng


def test_generate_wiener_is_reproducible():
    a = generate_wiener(0.01, 100, seed=7)
    b = generate_wiener(0.01, 100, seed=7)
    other = generate_wiener(0.01, 100, seed=7, stream=1)
    np.testing.assert_array_equal(a.increments, b.increments)
    assert not np.array_equal(a.increments, other.increments)
    assert a.seed == 7 and a.steps == 100


@pytest.mark.parametrize("dt, steps", [(0.0, 10), (-0.1, 10), (0.01, -1)])
def test_generate_wiener_rejects(dt, steps):
    with pytest.raises(ValueError):
        generate_wiener(dt, steps, seed=0)


def test_euler_matches_bloch_form(qubit_ops):
    start = BlochState(0.3, 0.2, 0.4)
    rho = start.to_matrix(qubit_ops).data
    updated = euler_update(rho, qubit_ops, 0.7, 0.01, 0.05)
    expected = bloch_step(start, 0.7, 0.01, 0.05)
    np.testing.assert_allclose(BlochState.from_matrix(updated, qubit_ops).to_array(), expected.to_array(), atol=1e-12)


def test_sme_step_euler_worked_example(qubit_ops):
    start = BlochState(0.5, 0.0, -0.5)
    updated = sme_step_euler(start.to_matrix(qubit_ops), qubit_ops, 1.0, 1e-3, 0.02)
    assert isinstance(updated, DensityMatrix)
    components = BlochState.from_matrix(updated.data, qubit_ops).to_array()
    np.testing.assert_allclose(components, bloch_step(start, 1.0, 1e-3, 0.02).to_array(), atol=1e-12)
    np.testing.assert_allclose(components, [0.50525, 0.0, -0.4845], atol=1e-12)


@pytest.mark.parametrize("state, dw, expected", [("coherent", -0.05, -0.05), ("max_entropy", 0.3, 0.3)])
def test_emit_measurement_on_unpolarised_states(state, dw, expected):
    ops = build_collective_ops(2)
    rho = coherent_state_x(ops) if state == "coherent" else max_entropy_state(ops)
    assert emit_measurement(rho, ops, 0.01, dw) == pytest.approx(expected, abs=1e-15)


def test_emit_measurement_adds_the_drift(qubit_ops):
    up = BlochState(0.0, 0.0, 1.0).to_matrix(qubit_ops)
    assert emit_measurement(up, qubit_ops, 0.01, 0.02) == pytest.approx(0.03)
    batch = np.stack([up.data, max_entropy_state(qubit_ops).data])
    np.testing.assert_allclose(emit_measurement(batch, qubit_ops, 0.01, np.array([0.0, 0.1])), [0.01, 0.1])


def test_generated_record_is_emitted_from_each_state(qubit_ops):
    realization = generate_wiener(0.01, 50, seed=9)
    series = run_trajectory(coherent_state_x(qubit_ops), qubit_ops, 1.0, realization, stride=1)
    emitted = emit_measurement(series.states[:-1], qubit_ops, 0.01, realization.increments)
    np.testing.assert_allclose(series.record.increments, emitted, atol=1e-15)


def test_kraus_agrees_with_euler_on_one_step(qubit_ops):
    rho = qubit_state(0.3, 0.4, rho_y=0.1, ops=qubit_ops).data
    dt, dy = 1e-4, 0.01
    dw = dy - measurement_mean(rho, qubit_ops) * dt
    kraus = kraus_update(rho, qubit_ops, 1.0, dt, dy)
    euler = euler_update(rho, qubit_ops, 1.0, dt, dw)
    assert np.max(np.abs(kraus - euler)) < 1e-5


def test_kraus_step_keeps_density_matrix(ops5):
    rho = sme_step_kraus(coherent_state_x(ops5), ops5, 2.0, 0.01, 0.3)
    assert isinstance(rho, DensityMatrix)
    DensityMatrix.validate_density_matrix(rho.data)


def test_polar_agrees_with_bloch_on_one_step():
    start = AngularState(0.8, 0.3)
    dt, dw = 4e-4, 0.02
    polar = polar_step(start, 1.0, dt, dw).to_bloch().to_array()
    bloch = bloch_step(start.to_bloch(), 1.0, dt, dw).to_array()
    np.testing.assert_allclose(polar, bloch, atol=1e-4)


def test_polar_keeps_pure_radius():
    assert polar_step(AngularState(1.0, 0.3), 1.0, 0.01, 0.2).r == 1.0


def test_polar_degenerate_radius():
    with pytest.raises(DegenerateInput):
        polar_step(AngularState(1e-13, 0.3), 1.0, 0.01, 0.1)


def test_angular_step_is_pure_polar_step():
    theta = angular_step(0.4, 0.5, 0.01, -0.07)
    assert theta == pytest.approx(polar_step(AngularState(1.0, 0.4), 0.5, 0.01, -0.07).theta, abs=1e-14)


def test_replay_pair_coincides_on_the_reference():
    theta, theta_ref = replay_angular_pair_step(1.1, 1.1, 0.3, 0.01, 0.05)
    assert theta == theta_ref == angular_step(1.1, 0.3, 0.01, 0.05)


def test_replay_pair_pulls_towards_reference():
    # zero noise: only the innovation term separates the replayed angle from a free one
    theta, _ = replay_angular_pair_step(0.0, 1.0, 0.0, 0.01, 0.0)
    assert theta == pytest.approx(0.01 * math.sin(1.0))


def test_batched_run_matches_individual_runs(qubit_ops):
    realization = generate_wiener(0.01, 300, seed=3)
    starts = np.stack([coherent_state_x(qubit_ops).data, max_entropy_state(qubit_ops).data])
    batched = run_trajectory(starts, qubit_ops, 1.0, realization, stride=50)
    for i, start in enumerate(starts):
        single = run_trajectory(start, qubit_ops, 1.0, realization, stride=50)
        np.testing.assert_allclose(batched.states[:, i], single.states, atol=1e-12)
        np.testing.assert_allclose(batched.record.increments[:, i], single.record.increments, atol=1e-12)


def test_generation_record_and_sampling(short_record, qubit_ops):
    assert short_record.b_true == 1.0
    assert short_record.steps == 500
    series = run_trajectory(coherent_state_x(qubit_ops), qubit_ops, 1.0, short_record, stride=150)
    np.testing.assert_array_equal(series.sample_steps, [0, 150, 300, 450, 500])
    assert series.times[-1] == pytest.approx(5.0)


def test_replay_of_own_record_is_exact(qubit_ops):
    realization = generate_wiener(0.01, 400, seed=5)
    start = coherent_state_x(qubit_ops)
    generated = run_trajectory(start, qubit_ops, 0.8, realization, stride=1)
    replayed = run_trajectory(start, qubit_ops, 0.8, generated.record, stride=1)
    np.testing.assert_array_equal(replayed.states, generated.states)
    np.testing.assert_allclose(replayed.innovations, realization.increments, atol=1e-12)


def test_euler_integrator_generation(qubit_ops):
    realization = generate_wiener(0.001, 200, seed=2)
    series = run_trajectory(coherent_state_x(qubit_ops), qubit_ops, 1.0, realization, integrator="euler", stride=1)
    trace = np.trace(series.states, axis1=-2, axis2=-1).real
    np.testing.assert_allclose(trace, 1.0, atol=1e-3)


@pytest.mark.parametrize("integrator", ["kraus", "euler"])
def test_nan_in_record_names_the_step(qubit_ops, integrator):
    record = MeasurementRecord(dt=0.01, increments=[0.01, math.nan, 0.02])
    with pytest.raises(NumericalFailure) as excinfo:
        run_trajectory(coherent_state_x(qubit_ops), qubit_ops, 1.0, record, integrator=integrator)
    assert excinfo.value.step == 1
    assert "step 1" in str(excinfo.value)


def test_euler_overflow_is_reported(qubit_ops):
    record = MeasurementRecord(dt=0.01, increments=[0.0] + [1e200] * 5)
    with np.errstate(all="ignore"), pytest.raises(NumericalFailure, match="non-finite") as excinfo:
        run_trajectory(coherent_state_x(qubit_ops), qubit_ops, 1.0, record, integrator="euler")
    assert excinfo.value.step >= 1


def test_bloch_trajectory_stops_on_a_non_finite_state():
    realization = WienerRealization(dt=0.01, increments=[0.01, math.nan, 0.0])
    with pytest.raises(NumericalFailure) as excinfo:
        run_bloch_trajectory(BlochState(0.5, 0.0, -0.5), 1.0, realization)
    assert excinfo.value.step == 1


def test_bloch_ensemble_stays_in_the_ball():
    # coarse step on purpose: Bloch-form Euler members leave the ball here
    times, samples = run_bloch_ensemble(BlochState(0.0, 0.5, 0.0), 1.0, 0.05, 200, 2000, seed=0, stride=50)
    np.testing.assert_allclose(times, [0.0, 2.5, 5.0, 7.5, 10.0])
    assert samples.shape == (5, 2000, 3)
    assert np.all(np.isfinite(samples))
    assert np.max(np.sum(samples**2, axis=-1)) <= 1 + 1e-9
    np.testing.assert_array_equal(samples[0], np.tile([0.0, 0.5, 0.0], (2000, 1)))


def test_bloch_ensemble_is_reproducible():
    first = run_bloch_ensemble(BlochState(0.3, 0.0, 0.4), 1.0, 0.01, 20, 50, seed=4, stride=10)[1]
    second = run_bloch_ensemble(BlochState(0.3, 0.0, 0.4), 1.0, 0.01, 20, 50, seed=4, stride=10)[1]
    np.testing.assert_array_equal(first, second)


def test_unknown_drive_type(qubit_ops):
    with pytest.raises(TypeError):
        run_trajectory(coherent_state_x(qubit_ops), qubit_ops, 1.0, [0.1, 0.2])


def test_unknown_integrator(qubit_ops, short_record):
    with pytest.raises(ValueError):
        run_trajectory(coherent_state_x(qubit_ops), qubit_ops, 1.0, short_record, integrator="milstein")


def test_repair_positivity_clips_small_negative():
    rho = np.diag([1 + 1e-10, -1e-10]).astype(complex)
    with pytest.warns(UserWarning, match="clipping"):
        repaired = repair_positivity(rho)
    np.testing.assert_allclose(repaired, np.diag([1.0, 0.0]), atol=1e-15)


def test_repair_positivity_leaves_positive_state():
    rho = np.diag([0.4, 0.6]).astype(complex)
    assert repair_positivity(rho) is rho


def test_repair_positivity_fails_on_large_negative():
    with pytest.raises(NumericalFailure, match="positivity"):
        repair_positivity(np.diag([1 + 1e-6, -1e-6]).astype(complex))


def test_apply_kraus_vanishing_norm(qubit_ops):
    with pytest.raises(NumericalFailure, match="normalisation"):
        apply_kraus(np.eye(2, dtype=complex) / 2, np.zeros((2, 2), dtype=complex))


def test_purification_time_bound():
    assert purification_time_bound(0.01, 0.1) == pytest.approx(40 + 2 * math.log(100))
    with pytest.raises(ValueError):
        purification_time_bound(1.0, 0.1)
    with pytest.raises(ValueError):
        purification_time_bound(0.5, 0.0)


def test_rho_y_closed_form_without_rho_z():
    dw = make_rng(1).normal(0.0, 0.1, size=10)
    values = rho_y_closed_form(0.5, np.zeros(11), dw, 0.01)
    np.testing.assert_allclose(values, 0.5 * np.exp(-0.005 * np.arange(11)), rtol=1e-12)


def test_rho_y_closed_form_tracks_bloch_path():
    realization = generate_wiener(1e-4, 2000, seed=4)
    v = np.array([0.3, 0.5, 0.2])
    path = [v]
    for dw in realization.increments:
        v = bloch_step(v, 1.0, realization.dt, dw)
        path.append(v)
    path = np.array(path)
    closed = rho_y_closed_form(0.5, path[:, 2], realization.increments, realization.dt)
    assert np.max(np.abs(closed - path[:, 1])) < 1e-2


def test_purity_bound_slack_on_exact_path():
    rng = make_rng(8)
    dt, steps = 0.01, 50
    rho_z = rng.uniform(-1, 1, size=steps + 1)
    dw = rng.normal(0.0, 0.1, size=steps)
    times = dt * np.arange(steps + 1)
    martingale = np.concatenate([[0.0], np.cumsum(-2 * rho_z[:-1] * dw)])
    extra = 0.01 * np.arange(steps + 1)
    mixedness = 0.5 * np.exp(-times + martingale - extra)
    np.testing.assert_allclose(purity_bound_slack(mixedness, rho_z, dw, dt), extra, atol=1e-12)


def test_purity_bound_holds_on_a_kraus_path(qubit_ops):
    realization = generate_wiener(0.001, 5000, seed=12)
    series = run_trajectory(qubit_state(0.5, -0.5, ops=qubit_ops), qubit_ops, 1.0, realization, stride=1)
    path = bloch_components(series.states, qubit_ops)
    defect = 1 - np.sum(path**2, axis=1)
    slack = purity_bound_slack(defect, path[:, 2], series.innovations, realization.dt)
    assert slack[0] == 0.0
    assert slack.min() > -0.05
    # the continuous-time slack is the integral of rho_z^2
    integral = np.concatenate([[0.0], np.cumsum(path[:-1, 2] ** 2) * realization.dt])
    assert abs(slack[-1] - integral[-1]) < 0.5


def test_purity_diagnostics_for_qubit(qubit_ops, short_record):
    series = run_trajectory(qubit_state(0.5, -0.5, ops=qubit_ops), qubit_ops, 1.0, short_record, stride=100)
    diagnostics = purity_diagnostics(series, qubit_ops)
    assert diagnostics["bloch_defect"][0] == pytest.approx(0.5)
    # for a qubit 1 - tr rho^2 is half the Bloch defect
    np.testing.assert_allclose(diagnostics["mixedness"], 0.5 * diagnostics["bloch_defect"], atol=1e-12)
    assert diagnostics["theta"][0] == pytest.approx(-math.pi / 4)


def test_propagator_forgets_its_start(qubit_ops):
    realization = generate_wiener(0.01, 4000, seed=9)
    record = run_trajectory(coherent_state_x(qubit_ops), qubit_ops, 1.0, realization, stride=4000).record
    times, ratios = propagator_rank_ratio(qubit_ops, 1.0, record, stride=1000)
    assert times[-1] == pytest.approx(40.0)
    assert ratios[0] == 1.0
    assert ratios[-1] < 1e-3


def test_zero_field_path_is_trapped_at_the_poles():
    chunks = list(iter_angular_path(0.3, 0.0, 1e-3, 20_000, make_rng(6), chunk=7_000))
    assert [len(c) for c in chunks] == [7_000, 7_000, 6_000]
    assert abs(math.cos(chunks[-1][-1])) < 1e-3


def test_lyapunov_drift():
    points = lyapunov_check((0.0, 0.5, 1.0), 1e-3, 100_000, seed=0)
    for point in points:
        assert point.predicted == pytest.approx(-0.5 * abs(math.cos(point.theta)) * 1e-3)
        assert point.within(5.0), point


def test_lyapunov_streams_are_per_angle():
    first = lyapunov_check((0.5,), 1e-3, 1000, seed=3)[0]
    second = lyapunov_check((0.5, 1.0), 1e-3, 1000, seed=3)[0]
    assert first.mean_dv == second.mean_dv


@pytest.mark.slow
def test_rho_y_ensemble_decay():
    initial = BlochState(0.0, 0.5, 0.0)
    times, samples = run_bloch_ensemble(initial, 1.0, 0.0025, 2000, 10_000, seed=0, stride=400)
    rho_y = samples[:, :, 1]
    std_error = rho_y.std(axis=1, ddof=1) / math.sqrt(10_000)
    predicted = 0.5 * np.exp(-times / 2)
    assert np.all(np.abs(rho_y.mean(axis=1) - predicted)[1:] <= 5 * std_error[1:])


@pytest.mark.slow
def test_mixed_states_purify_on_a_shared_realization(qubit_ops):
    realization = generate_wiener(0.01, 40_000, seed=0)
    starts = np.stack([qubit_state(x, z, ops=qubit_ops).data for x, z in ((0.5, -0.5), (-0.5, 0.5))])
    series = run_trajectory(starts, qubit_ops, 1.0, realization, stride=40_000)
    diagnostics = purity_diagnostics(series, qubit_ops)
    assert np.max(diagnostics["bloch_defect"][-1]) < 1e-3
    assert circular_distance(diagnostics["theta"][-1, 0], diagnostics["theta"][-1, 1]) < 1e-2


@pytest.mark.slow
@pytest.mark.parametrize("n_qubits", [1, 10, 50])
def test_kraus_stays_positive_over_a_million_steps(n_qubits):
    ops = build_collective_ops(n_qubits)
    realization = generate_wiener(1e-3, 1_000_000, seed=n_qubits)
    series = run_trajectory(max_entropy_state(ops), ops, 1.0, realization, stride=100_000)
    lowest = np.linalg.eigvalsh(series.states)[:, 0]
    assert len(series.states) == 11
    assert lowest.min() >= -1e-12
    np.testing.assert_allclose(np.trace(series.states, axis1=-2, axis2=-1).real, 1.0, atol=1e-12)
