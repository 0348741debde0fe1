import csv
import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from dualstop import cli, pipeline
from dualstop.config import ConfigError, load_config, parse_config, reference_config_path

MODEL = """
model.r = 0.02
model.mu = 0.06
model.sigma = 0.3
model.gamma = 0.5
model.b = 1.0
model.K = 0.5
model.beta = {beta}
model.T = 1.0
"""
SMALL = MODEL + """
grid.n_space = 100
grid.n_time = 100
grid.n_x = 100
mc.n_paths = 4000
mc.seed = 3
"""


def write_cfg(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def small_cfg(tmp_path, beta=0.1, extra=""):
    return write_cfg(tmp_path, SMALL.format(beta=beta) + extra)


def read_csv(path):
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


# -- parsing ----------------------------------------------------------------

def test_parse_minimal_config_uses_defaults():
    cfg = parse_config(MODEL.format(beta=0.1))
    assert cfg.model.beta == 0.1
    assert cfg.grid.n_space == 400
    assert cfg.mc.sim.n_paths == 100_000
    assert cfg.outputs.dir == "out"


def test_parse_vectors_and_matrices():
    text = MODEL.format(beta=0.1).replace("model.mu = 0.06", "model.mu = 0.06, 0.04") \
        .replace("model.sigma = 0.3", "model.sigma = 0.3, 0.0; 0.1, 0.2")
    cfg = parse_config(text)
    assert cfg.model.n_assets == 2
    assert np.array_equal(cfg.model.sigma, [[0.3, 0.0], [0.1, 0.2]])


def test_comments_and_blank_lines_are_ignored():
    cfg = parse_config("# header\n\n" + MODEL.format(beta=0.1) + "run.name = x  # trailing\n")
    assert cfg.name == "x"


@pytest.mark.parametrize("text, line, key", [
    ("model.r 0.02\n", 1, None),
    ("\nmodel.nope = 1\n", 2, "model.nope"),
    ("model.r = abc\n", 1, "model.r"),
    ("r = 0.02\n", 1, "r"),
    ("model.r = 0.02\nmodel.r = 0.03\n", 2, "model.r"),
])
def test_parse_errors_carry_line_and_key(text, line, key):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.line == line
    assert err.value.key == key
    assert f"line {line}" in str(err.value)


def test_duplicate_key_names_first_line():
    with pytest.raises(ConfigError, match="first set on line 1"):
        parse_config("model.r = 0.02\nmodel.r = 0.03\n")


def test_missing_model_keys_are_listed():
    with pytest.raises(ConfigError, match="model.beta"):
        parse_config("model.r = 0.02\n")


def test_invalid_parameter_names_its_key():
    text = MODEL.format(beta=0.1).replace("model.gamma = 0.5", "model.gamma = 1.5")
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.key == "model.gamma"
    assert err.value.line == 5


def test_simulation_step_must_resolve_horizon():
    with pytest.raises(ConfigError) as err:
        parse_config(MODEL.format(beta=0.1) + "mc.dt_sim = 0.02\n")
    assert err.value.key == "mc.dt_sim"


@pytest.mark.parametrize("extra", ["grid.n_space = 10\n", "grid.n_x = 12.5\n",
                                   "mc.n_paths = 10\n", "outputs.include_timings = maybe\n",
                                   "model.T = inf\n"])
def test_out_of_range_values_rejected(extra):
    text = MODEL.format(beta=0.1).replace("model.T = 1.0\n", "") if "model.T" in extra \
        else MODEL.format(beta=0.1)
    with pytest.raises(ConfigError):
        parse_config(text + extra)


def test_missing_file_reported():
    with pytest.raises(FileNotFoundError):
        load_config("/nonexistent/run.cfg")


@pytest.mark.parametrize("case", ["I", "II_strict", "II_equal", "III", "IV"])
def test_reference_configs_load(case):
    cfg = load_config(reference_config_path(case))
    assert cfg.name == f"case_{case}"


# -- CLI: classify and input errors -----------------------------------------

@pytest.mark.parametrize("case", ["I", "IV"])
def test_classify_prints_case(case, capsys):
    assert cli.run(["classify", "--config", str(reference_config_path(case))]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["case"] == case
    assert out["x_hat"] > out["k"] > 0.0


def test_bad_parameter_exits_2(tmp_path, capsys):
    path = write_cfg(tmp_path, MODEL.format(beta=0.1).replace("gamma = 0.5", "gamma = 1.5"))
    assert cli.run(["classify", "--config", path]) == 2
    assert "gamma" in capsys.readouterr().err


def test_missing_config_exits_2(tmp_path, capsys):
    assert cli.run(["classify", "--config", str(tmp_path / "absent.cfg")]) == 2
    assert "absent.cfg" in capsys.readouterr().err


def test_unwritable_output_exits_2(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("")
    path = small_cfg(tmp_path)
    assert cli.run(["solve", "--config", path, "--out", str(blocker / "sub")]) == 2
    assert "error" in capsys.readouterr().err


def test_bad_thread_count_exits_2(tmp_path, monkeypatch):
    monkeypatch.setenv("SOLVER_THREADS", "0")
    assert cli.run(["classify", "--config", small_cfg(tmp_path)]) == 2


def test_thread_count_is_applied(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SOLVER_THREADS", "1")
    assert cli.run(["classify", "--config", small_cfg(tmp_path)]) == 0
    import numba
    assert numba.get_num_threads() == 1


def test_negative_refine_rejected(tmp_path):
    with pytest.raises(SystemExit) as err:
        cli.run(["solve", "--config", small_cfg(tmp_path), "--refine", "-1"])
    assert err.value.code == 2


# -- CLI: solve outputs -----------------------------------------------------

@pytest.fixture(scope="module")
def solved_dir(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("solve")
    path = small_cfg(tmp)
    out = tmp / "out"
    assert cli.run(["solve", "--config", path, "--out", str(out)]) == 0
    return out


def test_solve_writes_all_files(solved_dir):
    names = sorted(p.name for p in solved_dir.iterdir())
    assert names == ["dual_boundaries.csv", "primal_boundaries.csv", "primal_surface.csv",
                     "report.json", "v_surface.csv"]


def test_csv_fields_parse(solved_dir):
    for name in ("v_surface.csv", "dual_boundaries.csv", "primal_surface.csv",
                 "primal_boundaries.csv"):
        header, rows = read_csv(solved_dir / name)
        assert all(len(r) == len(header) for r in rows)
        for r in rows:
            for cell in r:
                if cell:
                    float(cell)


def test_case_one_boundaries_are_encoded(solved_dir):
    header, rows = read_csv(solved_dir / "primal_boundaries.csv")
    H = [r[header.index("H")] for r in rows]
    assert set(H) == {"inf"}
    header, rows = read_csv(solved_dir / "dual_boundaries.csv")
    g = [r[header.index("g")] for r in rows]
    assert all(cell == "" or math.isfinite(float(cell)) for cell in g)


def test_report_is_sorted_and_finite(solved_dir):
    raw = (solved_dir / "report.json").read_text()
    rep = json.loads(raw, parse_constant=lambda c: pytest.fail(f"non-finite {c}"))
    assert list(rep) == sorted(rep)
    assert rep["case"]["case"] == "I"
    assert rep["refinement"] is None
    assert "timings" not in rep


def test_csv_round_trips_bit_exact(solved):
    s = solved("I")
    files = pipeline.surface_files(s)
    rows = list(csv.reader(io.StringIO(files["primal_surface.csv"])))
    V = np.array([float(r[2]) for r in rows[1:]])
    assert np.array_equal(V, s.ps.V.ravel())


def test_fmt_special_values():
    assert pipeline._fmt(float("nan")) == ""
    assert pipeline._fmt(float("inf")) == "inf"
    assert pipeline._fmt(float("-inf")) == "-inf"
    assert float(pipeline._fmt(0.1)) == 0.1


def test_repeat_runs_are_identical(tmp_path, solved_dir):
    path = small_cfg(tmp_path)
    out = tmp_path / "again"
    assert cli.run(["solve", "--config", path, "--out", str(out)]) == 0
    for f in solved_dir.iterdir():
        assert (out / f.name).read_bytes() == f.read_bytes(), f.name


def test_refine_records_deltas(tmp_path):
    path = small_cfg(tmp_path)
    out = tmp_path / "fine"
    assert cli.run(["solve", "--config", path, "--out", str(out), "--refine", "1"]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["grid"]["n_space"] == 199
    assert rep["grid"]["n_time"] == 200
    ref = rep["refinement"]
    assert len(ref["delta_v_probes"]) > 0
    out2 = tmp_path / "finer"
    assert cli.run(["solve", "--config", path, "--out", str(out2), "--refine", "2"]) == 0
    ref2 = json.loads((out2 / "report.json").read_text())["refinement"]
    assert ref2["max_abs_delta_v"] < 0.6 * ref["max_abs_delta_v"]


def test_refine_halves_steps():
    cfg = load_config(reference_config_path("I"))
    fine = pipeline.refine_config(cfg, 2)
    assert (fine.grid.n_space - 1) == 4 * (cfg.grid.n_space - 1)
    assert fine.grid.n_time == 4 * cfg.grid.n_time
    assert fine.mc.sim.dt_sim == cfg.mc.sim.dt_sim / 4


def test_timings_only_when_requested(tmp_path):
    path = small_cfg(tmp_path, extra="outputs.include_timings = true\n")
    out = tmp_path / "timed"
    assert cli.run(["solve", "--config", path, "--out", str(out)]) == 0
    rep = json.loads((out / "report.json").read_text())
    assert rep["timings"]["dual_solve_s"] >= 0.0


# -- CLI: simulate and verify -----------------------------------------------

def test_simulate_reports_estimate(tmp_path, capsys):
    path = small_cfg(tmp_path)
    out = tmp_path / "sim"
    assert cli.run(["simulate", "--config", path, "--out", str(out), "--seed", "9"]) == 0
    line = json.loads(capsys.readouterr().out)
    rep = json.loads((out / "report.json").read_text())
    assert rep["sim"]["seed"] == 9
    assert line["estimate"] == rep["solver_policy"]["estimate"]
    assert rep["stop_now"]["std_error"] == 0.0


def test_verify_fails_when_beta_sign_is_flipped(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(pipeline, "TAMPER", pipeline.flip_beta_sign)
    path = small_cfg(tmp_path)
    code = cli.run(["verify", "--config", path, "--out", str(tmp_path / "v")])
    assert code == 1
    out = capsys.readouterr()
    assert "[FAIL]" in out.out or "numerical failure" in out.err


def test_console_script_runs():
    res = subprocess.run([sys.executable, "-m", "dualstop.cli", "classify", "--config",
                          str(reference_config_path("II_strict"))],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0
    assert json.loads(res.stdout)["case"] == "II_strict"
