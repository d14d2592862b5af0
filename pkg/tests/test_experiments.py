import json
import math

import numpy as np
import pytest

from source import cli_lab
from source.autocomplete import get_autocomplete
from source.cli_lab import EXIT_ACCEPTANCE_FAILURE, EXIT_CONFIG_ERROR, EXIT_NUMERICAL_FAILURE, EXIT_OK, LabShell, main
from source.errors import CommandNotSupported, ConfigError, LabSigStop, NumericalFailure
from source.experiments import (
    EXPERIMENTS,
    Check,
    ExperimentConfig,
    ExperimentOutcome,
    kl_initial_pair,
    load_config_file,
    run_experiment,
    tail_tracking,
)
from source.fokker_planck import C0
from source.reader import save_record


def _config(experiment, tmp_path, **values):
    return ExperimentConfig.from_values(experiment, {"out": str(tmp_path), **values})


def test_experiment_defaults_are_applied():
    config = ExperimentConfig.from_values("fig4_replay")
    assert config.b == 0.1
    assert config.total_time == 400.0
    assert config.steps == 40_000
    assert config.sweep_fields == (0.1,)


def test_later_layers_win():
    config = ExperimentConfig.from_values("fig1_convergence", {"b": "2", "dt": "0.02"}, {"b": 3.0, "seed": None})
    assert config.b == 3.0
    assert config.dt == 0.02
    assert config.seeds == 5
    assert config.seed == 0


def test_aliases_and_hyphens():
    config = ExperimentConfig.from_values("fig5_multiqubit", {"time": "5", "n": "3", "grid-step": "0.1"})
    assert config.total_time == 5.0
    assert config.n_qubits == 3
    assert config.grid_step == 0.1


def test_lists_and_flags_are_parsed():
    config = ExperimentConfig.from_values("fig3_current", {"b_values": "0.5, 1", "check": "yes", "gamma": "none"})
    assert config.b_values == (0.5, 1.0)
    assert config.check is True
    assert config.gamma is None


@pytest.mark.parametrize(
    "experiment, values, message",
    [
        ("fig9", {}, "Unknown experiment"),
        ("fig3_current", {"colour": "red"}, "Unknown configuration key"),
        ("fig3_current", {"dt": "abc"}, "dt"),
        ("fig3_current", {"seed": 2**64}, "seed"),
        ("fig3_current", {"integrator": "rk4"}, "integrator"),
        ("fig3_current", {"max_order": 7}, "max_order"),
        ("fig3_current", {"dt": 1.0, "total_time": 0.5}, "at least one time step"),
        ("fig6_online", {"b0": 3.0}, "b0"),
        ("fig6_scan", {"grid_start": 1.0, "grid_stop": -1.0}, "Grid stop"),
        ("fig3_current", {"check": "maybe"}, "check"),
    ],
)
def test_invalid_configuration(experiment, values, message):
    with pytest.raises(ConfigError, match=message):
        ExperimentConfig.from_values(experiment, values)


def test_scan_grid():
    grid = ExperimentConfig.from_values("fig6_scan").b_grid()
    assert len(grid) == 61
    assert grid[0] == -1.5 and grid[-1] == 1.5
    assert 1.0 in grid and -1.0 in grid


def test_load_config_file(tmp_path):
    path = tmp_path / "lab.cfg"
    path.write_text("# sweep\nb_values = 0.5,1\n\nmax-order=600  # cap\n")
    assert load_config_file(str(path)) == {"b_values": "0.5,1", "max-order": "600"}


def test_load_config_file_errors(tmp_path):
    path = tmp_path / "lab.cfg"
    path.write_text("dt=0.1\nno value here\n")
    with pytest.raises(ConfigError, match="line 2"):
        load_config_file(str(path))
    with pytest.raises(ConfigError, match="does not exist"):
        load_config_file(str(tmp_path / "missing.cfg"))


def test_check_semantics():
    assert Check("small", 0.5, 1.0).passed
    assert not Check("small", 1.0, 1.0).passed
    assert Check("large", 2.0, 1.0, upper=False).passed
    assert not Check("nan", math.nan, 1.0).passed
    assert Check("small", 0.5, 1.0).to_json()["bound"] == "upper"


def test_check_with_numpy_values_serialises():
    check = Check("z_score", np.float64(1.5), np.int64(5))
    assert check.passed is True
    assert type(check.value) is float
    payload = json.loads(json.dumps(check.to_json()))
    assert payload == {"name": "z_score", "value": 1.5, "threshold": 5.0, "bound": "upper", "passed": True}
    assert Check("z_score", np.float64(np.nan), 5.0).passed is False


def test_outcome_summary_line():
    outcome = ExperimentOutcome("demo", [Check("a", 0.5, 1.0), Check("b", 2.0, 1.0)])
    assert not outcome.passed
    assert [c.name for c in outcome.failed_checks()] == ["b"]
    assert outcome.summary_line() == "demo: FAIL (2 checks; b=2)"
    assert ExperimentOutcome("demo", []).summary_line() == "demo: done, no checks"


def test_registry_descriptions():
    assert {"fig1_convergence", "fig2_stationary", "fig3_current", "fig4_replay", "fig5_multiqubit",
            "fig6_online", "fig6_scan", "fig6_gradient", "ergodicity", "lyapunov", "kl_monotone",
            "rho_y_decay", "cross_integrator"} <= set(EXPERIMENTS)
    assert all(experiment.description for experiment in EXPERIMENTS.values())


def test_kl_initial_pair():
    p, q = kl_initial_pair(8)
    assert p[8] == q[8] == C0
    assert p[10] == p[6] == C0 / 4
    assert q[10] == np.conj(q[6]) == 1j * C0 / 4


def test_current_sweep_run(tmp_path):
    outcome = run_experiment(_config("fig3_current", tmp_path, b_values="0.5,1,2"))
    checks = {check.name: check for check in outcome.checks}
    assert checks["ratio_increasing"].passed
    assert checks["mean_theta_peak_offset"].passed
    assert outcome.values["mean_theta_peak_b"] == 0.5

    rows = (tmp_path / "fig3_current_sweep.csv").read_text().splitlines()
    assert rows[0] == "B,J_sta,J_ratio,mean_theta"
    assert len(rows) == 4
    summary = json.loads((tmp_path / "fig3_current_summary.json").read_text())
    assert summary["config"]["b_values"] == [0.5, 1.0, 2.0]
    assert summary["files"] == ["fig3_current_sweep.csv"]
    assert summary["passed"] == outcome.passed


def test_short_relative_entropy_run(tmp_path):
    outcome = run_experiment(_config("kl_monotone", tmp_path, max_order=16, total_time=2.0, dt=0.1))
    checks = {check.name: check for check in outcome.checks}
    assert set(checks) == {"max_entropy_increase", "final_l2_distance"}
    assert not checks["final_l2_distance"].passed
    assert len((tmp_path / "kl_monotone_entropy.csv").read_text().splitlines()) == 22


def test_replay_run_is_reproducible(tmp_path):
    first = run_experiment(_config("fig4_replay", tmp_path / "a", total_time=1.0, seed=4))
    second = run_experiment(_config("fig4_replay", tmp_path / "b", total_time=1.0, seed=4))
    assert first.values == second.values
    for name in ("fig4_replay_replay.csv", "fig4_replay_rank_ratio.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_replay_from_a_record_file(tmp_path, short_record):
    path = save_record(short_record, str(tmp_path / "input.rec"))
    outcome = run_experiment(_config("fig4_replay", tmp_path, record=path, b=1.0))
    assert len(outcome.checks) == 1
    with pytest.raises(ConfigError, match="dt"):
        run_experiment(_config("fig4_replay", tmp_path, record=path, dt=0.02))


def test_ensemble_run_writes_its_summary(tmp_path):
    outcome = run_experiment(_config("rho_y_decay", tmp_path, ensemble=200, total_time=1.0, dt=0.01))
    assert [check.name for check in outcome.checks] == ["z_t1"]
    summary = json.loads((tmp_path / "rho_y_decay_summary.json").read_text())
    assert summary["checks"][0]["passed"] is outcome.checks[0].passed
    assert isinstance(summary["values"]["pathwise_closed_form_max_deviation"], float)
    assert len((tmp_path / "rho_y_decay_ensemble.csv").read_text().splitlines()) == 4


def test_convergence_run_checks_the_purity_bound(tmp_path):
    outcome = run_experiment(_config("fig1_convergence", tmp_path, total_time=2.0, seeds=1))
    checks = {check.name: check for check in outcome.checks}
    assert set(checks) == {"final_defect", "theta_spread", "purity_bound_slack"}
    assert checks["purity_bound_slack"].passed
    assert not checks["purity_bound_slack"].upper


def test_scan_run_compares_integrators_at_two_steps(tmp_path):
    outcome = run_experiment(_config("fig6_scan", tmp_path, total_time=5.0, grid_step=0.5))
    names = {check.name for check in outcome.checks}
    assert {"integrator_argmax_gap", "integrator_argmax_gap_fine", "slope_sign_agreement"} <= names
    assert outcome.values["slope_b"] == 0.5
    assert {"slope_b", "slope_gradient", "scan_slope"} <= set(outcome.values)
    header = (tmp_path / "fig6_scan_scan.csv").read_text().splitlines()[0]
    assert header == "B,loglik_kraus,loglik_euler,loglik_kraus_fine,loglik_euler_fine"


def test_scan_run_on_a_loaded_record_has_no_refined_check(tmp_path, short_record):
    path = save_record(short_record, str(tmp_path / "input.rec"))
    outcome = run_experiment(_config("fig6_scan", tmp_path, record=path, grid_step=0.5))
    names = {check.name for check in outcome.checks}
    assert "integrator_argmax_gap" in names
    assert "integrator_argmax_gap_fine" not in names


def test_gradient_run_reports_the_lockstep_gap(tmp_path):
    outcome = run_experiment(_config("fig6_gradient", tmp_path, total_time=5.0, db=0.005))
    assert outcome.values["lockstep_gap"] > 0
    assert outcome.values["lockstep_gap_fine"] > 0
    assert [check.name for check in outcome.checks] == ["relative_deviation"]


def test_tail_tracking_uses_the_window():
    times = np.arange(10.0)
    true = (np.zeros(10), np.zeros(10))
    estimated = (np.full(10, 0.01), np.zeros(10))
    estimated[0][:5] = 5.0
    estimated[1][9] = 0.5
    median, mean = tail_tracking(times, 5.0, estimated, true)
    assert median == pytest.approx(0.01)
    assert mean == pytest.approx((4 * 0.01 + 0.5) / 5)


def test_cli_success(tmp_path):
    assert main(["lyapunov", "--draws", "1000", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "lyapunov_drift.csv").exists()


@pytest.mark.parametrize(
    "argv",
    [["fig3_current", "--dt", "-1"], ["fig9"], ["fig3_current", "--b", "x"], ["fig6_online", "--b0", "5"]],
)
def test_cli_configuration_errors(tmp_path, argv):
    assert main([*argv, "--out", str(tmp_path)]) == EXIT_CONFIG_ERROR


def test_cli_numerical_failure(tmp_path, monkeypatch):
    def broken(config):
        raise NumericalFailure("denominator vanished", step=12)

    monkeypatch.setattr(cli_lab, "run_experiment", broken)
    assert main(["fig3_current", "--out", str(tmp_path)]) == EXIT_NUMERICAL_FAILURE


def test_cli_acceptance_failure(tmp_path):
    argv = ["fig3_current", "--b-values", "1,2", "--out", str(tmp_path)]
    assert main(argv) == EXIT_OK
    assert main([*argv, "--check"]) == EXIT_ACCEPTANCE_FAILURE


def test_cli_config_file(tmp_path):
    config = tmp_path / "sweep.cfg"
    config.write_text(f"b_values=0.5,1\nout={tmp_path / 'out'}\n")
    assert main(["fig3_current", "--config", str(config)]) == EXIT_OK
    summary = json.loads((tmp_path / "out" / "fig3_current_summary.json").read_text())
    assert summary["config"]["b_values"] == [0.5, 1.0]


def test_shell_parse_input():
    assert LabShell.parse_input("RUN fig3_current --b-values '0.5,1'") == ("run", ["fig3_current", "--b-values", "0.5,1"])
    command, args = LabShell.parse_input("exit")
    assert command == "exit" and "Bye" in args[0]


def test_shell_commands(tmp_path):
    shell = LabShell()
    assert "fig3_current:" in shell.execute_command("list", [])
    assert "Defaults: b=0.1" in shell.execute_command("show", ["fig4_replay"])
    assert shell.execute_command("show", []).startswith("Command 'show' failed")
    assert shell.execute_command("help", []).startswith("Supported commands:")
    assert "Run an experiment" in shell.execute_command("help", ["run"])
    assert shell.execute_command("run", []).startswith("Command 'run' failed")
    assert shell.execute_command("run", ["shell"]).startswith("Command 'run' failed")
    assert shell.execute_command("run", ["fig3_current", "--b", "x"]).startswith("Command 'run' failed")

    line = shell.execute_command("run", ["fig3_current", "--b-values", "0.5", "--out", str(tmp_path)])
    assert line.startswith("fig3_current: ")


def test_shell_stop_and_unknown_command():
    shell = LabShell()
    with pytest.raises(CommandNotSupported):
        shell.execute_command("fly", [])
    with pytest.raises(LabSigStop, match="Bye"):
        shell.execute_command(*LabShell.parse_input("close"))


def test_autocomplete_table():
    table = get_autocomplete(["fig3_current", "lyapunov"], ["run", "show", "help", "exit"])
    assert "--b-values" in table["run"]["fig3_current"]
    assert table["show"] == {"fig3_current": None, "lyapunov": None}
    assert set(table["help"]) == {"run", "show", "help", "exit"}
    assert table["exit"] is None


@pytest.mark.slow
@pytest.mark.parametrize(
    "experiment, overrides",
    [
        ("fig1_convergence", {}),
        ("fig2_stationary", {}),
        ("fig3_current", {}),
        ("fig4_replay", {}),
        ("fig5_multiqubit", {}),
        ("fig6_online", {}),
        ("fig6_scan", {}),
        ("fig6_gradient", {"db": 0.005}),
        ("ergodicity", {}),
        ("lyapunov", {}),
        ("kl_monotone", {}),
        ("rho_y_decay", {}),
        ("cross_integrator", {}),
    ],
)
def test_experiment_meets_its_thresholds(tmp_path, experiment, overrides):
    outcome = run_experiment(_config(experiment, tmp_path, **overrides))
    assert outcome.passed, outcome.summary_line()
