import json
import math

import numpy as np
import pytest
import yaml

from dbsynth.abstraction import load_abstraction, save_abstraction
from dbsynth.cli import (EXIT_EMPTY, EXIT_INFEASIBLE, EXIT_OK, EXIT_RELATION, EXIT_USAGE, main)
from dbsynth.network import bundled_config
from dbsynth.synthesis import Controller

from oracles import eta_bound_linear, pair_spectral_radius

S5 = 2.2361


def write_config(tmp_path, name, edit):
    cfg = yaml.safe_load(bundled_config(name).read_text())
    edit(cfg)
    path = tmp_path / f"{name}_edited.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


# --- check ------------------------------------------------------------------------------

def test_check_reports_the_case_study_parameters(tmp_path, capsys):
    out = tmp_path / "check.json"
    assert main(["check", "--config", "paper_n3", "--out", str(out)]) == EXIT_OK
    assert "lambda_max=0.4606" in capsys.readouterr().out
    rep = json.loads(out.read_text())
    assert rep["small_gain"]["lambda_max"] == pytest.approx(pair_spectral_radius(1, 1, 0.3162, 0.6708), abs=1e-9)
    assert rep["small_gain_cross_check"]["feasible"] is True
    assert rep["subsystems"]["sigma1_2"]["eta_max_euclid"] == pytest.approx(0.0236, abs=5e-4)
    assert rep["subsystems"]["sigma1_2"]["eta_max_inf"] == pytest.approx(0.0275, abs=5e-4)
    assert rep["subsystems"]["sigma2_2"]["eta_max_inf"] == pytest.approx(0.0228, abs=5e-4)


def test_check_of_the_decoupled_network(tmp_path):
    out = tmp_path / "check.json"
    assert main(["check", "--config", "decoupled", "--out", str(out)]) == EXIT_OK
    rep = json.loads(out.read_text())
    assert rep["small_gain"]["lambda_max"] == 0.0
    for sid, s_d in (("sigma1", 0.3162), ("sigma2", 0.6708)):
        row = rep["subsystems"][sid]
        assert row["eps_tilde"] == [] and row["psi"] == 0.0
        mono = eta_bound_linear(1, S5, S5, S5, s_d, S5, 0.1, 0.7, 0.1, 0.0, 0.0)
        assert row["eta_max"] == pytest.approx(mono, rel=1e-12)


def test_inflated_coupling_is_infeasible(tmp_path, capsys):
    def inflate(cfg):
        for t in cfg["templates"].values():
            t["lyapunov"]["sigma_d"] *= 10
            t["lyapunov"]["c_sigma"] *= 10
    path = write_config(tmp_path, "paper_n3", inflate)
    assert pair_spectral_radius(1, 1, 3.162, 6.708) > 1
    assert main(["check", "--config", path]) == EXIT_INFEASIBLE
    assert "feasible=False" in capsys.readouterr().out
    assert main(["abstract", "--config", path, "--out", str(tmp_path / "a")]) == EXIT_INFEASIBLE


def test_bad_configs_are_usage_errors(tmp_path, capsys):
    assert main(["check", "--config", str(tmp_path / "missing.yaml")]) == EXIT_USAGE
    path = write_config(tmp_path, "desk_1d", lambda c: c.pop("tau"))
    assert main(["check", "--config", path]) == EXIT_USAGE
    assert "tau" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["frobnicate"])


# --- artefacts --------------------------------------------------------------------------

def test_stepwise_commands_and_round_trip(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["abstract", "--config", "desk_1d", "--out", str(out)]) == EXIT_OK
    assert main(["synthesize", "--config", "desk_1d", "--out", str(out)]) == EXIT_OK
    assert main(["simulate", "--config", "desk_1d", "--out", str(out)]) == EXIT_OK
    assert "all safe=True" in capsys.readouterr().out
    # two subsystems share one template: one file of each kind
    assert sorted(p.name for p in out.iterdir()) == ["abstraction_scalar.bin", "controller_scalar.txt",
                                                     "trajectory.csv", "trajectory_meta.json"]
    a, bits = load_abstraction(out / "abstraction_scalar.bin")
    save_abstraction(tmp_path / "again.bin", a, bits)
    assert (tmp_path / "again.bin").read_bytes() == (out / "abstraction_scalar.bin").read_bytes()
    c = Controller.load(out / "controller_scalar.txt")
    c.save(tmp_path / "again.txt")
    assert (tmp_path / "again.txt").read_text() == (out / "controller_scalar.txt").read_text()
    meta = json.loads((out / "trajectory_meta.json").read_text())
    assert meta["controllers"]["scalar"] == a.state_grid.digest() == c.meta["grid"]


def test_zero_dynamics_table_is_all_self_loops(tmp_path):
    out = tmp_path / "z"
    assert main(["abstract", "--config", "zero_dynamics", "--out", str(out)]) == EXIT_OK
    a, _ = load_abstraction(out / "abstraction_still.bin")
    own = a.state_grid.subs(np.arange(a.n_states))[:, None, :]
    assert np.all(a.lo == own) and np.all(a.hi == own)


def test_artifacts_from_another_config_are_rejected(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["abstract", "--config", "desk_1d", "--out", str(out)]) == EXIT_OK
    path = write_config(tmp_path, "desk_1d", lambda c: c["templates"]["scalar"].update(omega=0.05))
    assert main(["synthesize", "--config", path, "--out", str(out)]) == EXIT_USAGE
    assert "different" in capsys.readouterr().err
    assert main(["simulate", "--config", "desk_1d", "--out", str(tmp_path / "nothing")]) == EXIT_USAGE


def test_empty_target_gives_an_empty_controller(tmp_path, capsys):
    def far_target(cfg):
        cfg["templates"]["still"]["spec"] = {"objective": "reach_while_avoid",
                                             "target": {"ellipsoid": {"center": [5, 5], "level": 0.1}}}
    path = write_config(tmp_path, "zero_dynamics", far_target)
    out = tmp_path / "e"
    assert main(["pipeline", "--config", path, "--out", str(out)]) == EXIT_EMPTY
    assert "empty winning set" in capsys.readouterr().err


def test_start_outside_the_controller_is_a_runtime_error(tmp_path, capsys):
    path = write_config(tmp_path, "desk_1d", lambda c: c["simulation"].update(initial_states={"a": [0.999]}))
    assert main(["pipeline", "--config", path, "--out", str(tmp_path / "r")]) == EXIT_RELATION
    assert "outside the controller domain" in capsys.readouterr().err


def test_verify_bisim_on_the_scalar_network(tmp_path):
    out = tmp_path / "bisim.json"
    assert main(["verify-bisim", "--config", "desk_1d", "--out", str(out)]) == EXIT_OK
    (res,) = json.loads(out.read_text())
    assert res["holds"] and res["certified"] and res["pairs_checked"] > 0
    assert res["states"][1] == 25


def test_pipeline_is_deterministic(tmp_path):
    for d in ("one", "two"):
        assert main(["pipeline", "--config", "desk_1d", "--out", str(tmp_path / d)]) == EXIT_OK
    for name in ("controller_scalar.txt", "trajectory.csv", "abstraction_scalar.bin"):
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()


def test_second_template_controller_covers_its_target(n3_run):
    net = n3_run.net
    a = n3_run.abstractions["sigma2"]
    spec = net.abstract_spec("sigma2", a.state_grid)
    c = n3_run.controllers["sigma2"]
    # target points the closed loop can also stay safe from are all won with rank 0
    goal = spec.target & c.invariant
    assert goal.any() and c.winning[goal].all()
    assert np.all(c.rank[goal] == 0)
    assert np.array_equal(c.winning & spec.target, goal)


def test_shared_templates_in_the_three_pair_run(n3_run):
    files = sorted(p.name for p in n3_run.out.glob("controller_*.txt"))
    assert files == ["controller_sigma1.txt", "controller_sigma2.txt"]
    assert math.isclose(n3_run.report["templates"]["sigma1"]["eta"], 0.99 * 0.023602, rel_tol=1e-3)
