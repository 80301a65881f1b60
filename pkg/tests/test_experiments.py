import json
import subprocess
import sys

import numpy as np
import pytest

from koopman_mpc import cli, io
from koopman_mpc import experiments as ex
from koopman_mpc import koopman as kp
from koopman_mpc import mpc
from koopman_mpc.config import ConfigError, format_config, parse_config
from koopman_mpc.dataset import load_dataset

TINY = """\
# small and fast
n_base = 12
n_eigenvalues = 5
T_sim = 0.2
"""


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    out = root / "out"
    for verb in ("generate", "identify", "evaluate", "drift", "spiral", "compare"):
        assert cli.main([verb, "--config", str(cfg), "--out-dir", str(out), "--seed", "3"]) == 0
    return cfg, out


# -- config ---------------------------------------------------------------------

def test_parse_config_types():
    got = parse_config("a = 1\nb = 2.5\nc = true\nd = word  # note\n\n")
    assert {k: v for k, (v, _) in got.items()} == {"a": 1, "b": 2.5, "c": True, "d": "word"}
    assert got["d"][1] == 4


@pytest.mark.parametrize("text, line", [("a = 1\nbad line\n", 2), ("a = 1\na = 2\n", 2),
                                        ("x =\n", 1)])
def test_parse_config_errors_carry_line(text, line):
    with pytest.raises(ConfigError) as err:
        parse_config(text, "f.cfg")
    assert err.value.line == line and f"f.cfg:{line}:" in str(err.value)


def test_format_parse_roundtrip():
    values = {"a": 0.1, "b": 3, "c": False, "d": 1e-12}
    back = {k: v for k, (v, _) in parse_config(format_config(values)).items()}
    assert back == values


def test_load_settings_unknown_key(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("n_base = 10\nno_such_key = 1\n")
    with pytest.raises(ConfigError) as err:
        ex.load_settings(p)
    assert err.value.line == 2


def test_load_settings_bad_value(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("n_base = many\n")
    with pytest.raises(ConfigError):
        ex.load_settings(p)


def test_load_settings_vehicle_override(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("mass = 1500\nzeta = 1e-10\n")
    s = ex.load_settings(p)
    assert s.vehicle.mass == 1500.0 and s.experiment.zeta == 1e-10


def test_presets():
    assert ex.PRESETS["paper"].n_total == 1078
    assert ex.PRESETS["desk"].n_eigenvalues == ex.PRESETS["paper"].n_eigenvalues == 51
    s = ex.load_settings(scale="paper")
    train, test = ex.start_points(s)
    assert len(train) + len(test) == 1078


def test_derived_seeds_stable():
    assert ex.derived_seeds(5) == ex.derived_seeds(5) != ex.derived_seeds(6)


# -- io --------------------------------------------------------------------------

def test_container_roundtrip(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([np.pi])}
    io.write_container(tmp_path / "x", b"TESTTEST", {"k": 1}, arrays)
    h, a = io.read_container(tmp_path / "x", b"TESTTEST")
    assert h["k"] == 1 and np.array_equal(a["a"], arrays["a"]) and a["b"][0] == np.pi
    with pytest.raises(io.FormatError):
        io.read_container(tmp_path / "x", b"OTHEROTH")


def test_csv_float_format():
    text = io.csv_text(["v", "w"], [[0.1, None], [3, "x"]])
    assert text.splitlines()[1:] == ["0.10000000000000001,", "3,x"]
    assert io.parse_csv(text)[1] == [[0.1, None], [3, "x"]]


# -- scenarios ---------------------------------------------------------------------

def test_spiral_reference_first_row():
    r = ex.spiral_scenario(ex.ExperimentConfig()).reference(0.0)
    assert r[0] == 16.7 and np.isnan(r[1]) and r[2] == 0.0
    r10 = ex.spiral_scenario(ex.ExperimentConfig()).reference(10.0)
    assert r10[2] == pytest.approx(0.5)


def test_drift_start_on_energy_surface():
    from koopman_mpc.vehicle import VehicleParams, kinetic_energy
    c = ex.ExperimentConfig()
    x0 = ex.drift_scenario(c).x0
    assert x0 == (2.0, -27.66, 0.0)
    assert kinetic_energy(x0, VehicleParams()) == pytest.approx(5e5, rel=0.01)


def test_scenario_validation():
    with pytest.raises(ValueError):
        ex.ScenarioSpec("x", (0.1, 0, 0), lambda t: np.zeros(3), 1.0)
    with pytest.raises(ValueError):
        ex.ScenarioSpec("x", (10, 0, 0), lambda t: np.zeros(3), 0.0)


def test_first_time():
    assert ex.first_time(np.array([False, False, True]), 0.5) == 1.0
    assert ex.first_time(np.array([False]), 0.5) is None


# -- pipeline via the CLI ------------------------------------------------------------

def test_generate_outputs(tiny_run):
    _, out = tiny_run
    d = load_dataset(out / ex.DATA_FILES[("uncontrolled", "train")])
    full = [t for t in d if not t.truncated]
    assert all(len(t.states) == 51 for t in full)
    c = load_dataset(out / ex.DATA_FILES[("controlled", "train")])
    assert all(len(t.states) == 11 for t in c if not t.truncated)


def test_identify_outputs(tiny_run):
    _, out = tiny_run
    m = kp.load_model(out / ex.MODEL_FILE)
    assert m.n_lifted == 15 and np.count_nonzero(m.A - np.diag(np.diag(m.A))) == 0
    report = (out / "identify_report.txt").read_text()
    assert "mean_rmse_percent" in report and "std_rmse_percent" in report


def test_manifest_hashes(tiny_run):
    _, out = tiny_run
    man = json.loads((out / ex.MANIFEST).read_text())
    assert set(man["commands"]) == set(ex.VERBS)
    for entry in man["commands"].values():
        assert entry["seed"] == 3
        for name, digest in entry["outputs"].items():
            assert io.sha256(out / name) == digest


def test_scenario_logs_roundtrip(tiny_run):
    _, out = tiny_run
    for name in ("drift_koopman", "drift_linear", "spiral_koopman", "spiral_linear"):
        text = (out / f"{name}.csv").read_text()
        assert mpc.ClosedLoopLog.from_csv(text).to_csv() == text
    spiral = mpc.ClosedLoopLog.from_csv((out / "spiral_linear.csv").read_text())
    assert spiral.refs[0, 0] == 16.7 and np.isnan(spiral.refs[0, 1]) and spiral.refs[0, 2] == 0.0


def test_metrics_and_compare(tiny_run):
    _, out = tiny_run
    met = json.loads((out / "drift_metrics.json").read_text())
    for kind in ("koopman", "linear"):
        assert met[kind]["hard_constraints_ok"] is True
        assert met[kind]["initial_steering_sign"] in (-1, 0, 1)
    spiral = json.loads((out / "spiral_metrics.json").read_text())
    assert spiral["koopman"]["rmse_vy"] is None
    assert spiral["koopman"]["rmse_yaw_rate"] is not None
    header = (out / "compare.csv").read_text().splitlines()[0]
    assert header == ",".join(ex.COMPARE_COLUMNS)


def test_generate_is_deterministic(tiny_run, tmp_path):
    cfg, out = tiny_run
    assert cli.main(["generate", "--config", str(cfg), "--out-dir", str(tmp_path), "--seed", "3"]) == 0
    for name in ex.DATA_FILES.values():
        assert (tmp_path / name).read_bytes() == (out / name).read_bytes()


def test_cli_missing_inputs(tmp_path, capsys):
    assert cli.main(["identify", "--out-dir", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip()
    assert err.startswith("error: ")
    assert json.loads(err[len("error: "):])["error"] == "FileNotFoundError"


def test_cli_config_error_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("n_base = 10\noops\n")
    assert cli.main(["generate", "--config", str(p), "--out-dir", str(tmp_path)]) == 2
    line = json.loads(capsys.readouterr().err.strip()[len("error: "):])
    assert line["line"] == 2 and line["error"] == "ConfigError"


def test_cli_usage_error(capsys):
    assert cli.main(["nonsense"]) == 2
    assert capsys.readouterr().err.startswith("error: ")


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "koopman_mpc", "evaluate", "--out-dir", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 1 and r.stderr.startswith("error: ")
