import pandas as pd
import pytest

from app import main
from modules.field import read_checkpoint


def _small_trajectory_config(configs, tmp_path):
    text = (configs / "circle_single_step.cfg").read_text()
    text = text.replace("initial_global_cycles = 4", "initial_global_cycles = 2")
    text = text.replace("initial_boundary_cycles = 3", "initial_boundary_cycles = 1")
    text = text.replace("steps = 1\n", "steps = 2\n").replace("substeps = 5", "substeps = 2")
    path = tmp_path / "small.cfg"
    path.write_text(text)
    return path


def test_bad_config_path_is_invalid_input(tmp_path):
    assert main(["solve", str(tmp_path / "missing.cfg")]) == 1


def test_missing_subcommand():
    with pytest.raises(SystemExit):
        main([])


def test_solve_writes_series(configs, tmp_path):
    out = tmp_path / "run"
    assert main(["solve", str(configs / "donea_huerta.cfg"), "--output", str(out), "--deterministic"]) == 0
    assert len(list(out.glob("step_*.vtk"))) == 121
    history = pd.read_csv(out / "history.csv")
    assert len(history) == 121
    field, _, t = read_checkpoint(out / "checkpoint.txt")
    assert t == 1.2
    assert field.values.min() >= -1e-8
    again = tmp_path / "again"
    main(["solve", str(configs / "donea_huerta.cfg"), "--output", str(again), "--deterministic"])
    assert (out / "step_0120.vtk").read_bytes() == (again / "step_0120.vtk").read_bytes()


def test_solve_with_verification(configs, tmp_path):
    assert main(["solve", str(configs / "mms1d.cfg"), "--output", str(tmp_path)]) == 0
    errors = pd.read_csv(tmp_path / "errors.csv")
    assert list(errors.columns) == ["step", "time", "error"]
    assert errors["error"].iloc[-1] < 1e-3


def test_verify_cases(configs, tmp_path):
    assert main(["verify", "exact_steady", "--output", str(tmp_path)]) == 0
    assert (tmp_path / "exact_steady.csv").exists()
    assert main(["verify", str(configs / "mms1d.cfg"), "--mode", "spatial", "--output", str(tmp_path)]) == 0
    orders = pd.read_csv(tmp_path / "mms1d_orders.csv")
    assert orders["v"].iloc[0] == -5.0
    assert 1.9 <= orders["p"].iloc[0] <= 2.1
    assert main(["verify", "nonsense", "--output", str(tmp_path)]) == 1


def test_simulate_then_resume(configs, tmp_path):
    config = _small_trajectory_config(configs, tmp_path)
    out = tmp_path / "traj"
    assert main(["simulate", str(config), "--output", str(out), "--deterministic"]) == 0
    table = pd.read_csv(out / "trajectory.csv")
    assert table["step"].tolist() == [0, 1, 2]
    assert (out / "step_0002_pci.csv").exists()
    assert main(["resume", str(out / "checkpoint.txt"), str(config), "--steps", "1", "--output", str(out)]) == 0
    resumed = pd.read_csv(out / "trajectory.csv")
    assert resumed["step"].tolist() == [2, 3]
    assert resumed["r1"].iloc[0] == pytest.approx(table["r1"].iloc[-1], rel=1e-12, abs=1e-15)


def test_landscape(configs, tmp_path):
    config = _small_trajectory_config(configs, tmp_path)
    assert main(["landscape", str(config), "--samples", "5", "--output", str(tmp_path)]) == 0
    table = pd.read_csv(tmp_path / "landscape.csv")
    assert len(table) == 10
    assert set(table["axis"]) == {"theta", "r1"}
    assert main(["landscape", str(configs / "donea_huerta.cfg"), "--output", str(tmp_path)]) == 1


def test_resume_rejects_a_bad_checkpoint(configs, tmp_path):
    bad = tmp_path / "checkpoint.txt"
    bad.write_text("not a checkpoint\n")
    assert main(["resume", str(bad), str(configs / "circle_single_step.cfg"), "--output", str(tmp_path)]) == 2
