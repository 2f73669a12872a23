import json
import os
import stat
import subprocess
import sys
from pathlib import Path

import jsonschema
import numpy as np
import pytest

from solenoid_ab.beltrami import ComplexGrid
from solenoid_ab.cli import run
from solenoid_ab.config import ConfigError, parse_config
from solenoid_ab.io import (
    atomic_write_text,
    dumps,
    grid_csv,
    grid_from_bytes,
    grid_to_bytes,
    load_schema,
    read_grid,
    write_grid,
)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

EXPECTED = {
    "diophantine_single_mode": ("solve-diophantine", 0, "CONVERGENT"),
    "diophantine_factorial": ("solve-diophantine", 2, "DIVERGENT"),
    "diophantine_resonant": ("solve-diophantine", 1, None),
    "s_norm": ("s-norm", 0, "DOMINATED"),
    "beltrami_radial": ("solve-beltrami", 0, "SOLVED"),
    "tower_geometric": ("tower", 0, "CAUCHY"),
    "tower_constant": ("tower", 2, "NOT-CAUCHY"),
    "tower_stationary": ("tower", 0, "CAUCHY"),
    "tower_counterexample": ("tower", 2, "NOT-CAUCHY"),
    "counterexample": ("counterexample", 0, "PASS"),
    "counterexample_coarse_step": ("counterexample", 2, "FAIL"),
    "counterexample_single_term": ("counterexample", 0, "PASS"),
    "split_global": ("split-solve", 0, "SOLVED"),
}


def invoke(command, config, out, *extra):
    return run([command, "--config", str(config), "--out", str(out), *extra])


def report(out, command):
    return json.loads((Path(out) / f"{command.replace('-', '_')}.json").read_text())


@pytest.mark.parametrize("name", sorted(EXPECTED))
def test_example_configs(name, tmp_path, capsys):
    command, code, verdict = EXPECTED[name]
    assert invoke(command, CONFIGS / f"{name}.toml", tmp_path, "--json", "--csv") == code
    doc = report(tmp_path, command)
    jsonschema.validate(doc, load_schema(command.replace("-", "_")))
    assert doc["exit_code"] == code and doc["verdict"] == verdict
    assert doc["command"] == command
    if doc["status"] == "ok":
        tables = list(tmp_path.glob(f"{command.replace('-', '_')}_*.csv"))
        assert tables
        assert not any("np." in t.read_text() for t in tables)
    line = capsys.readouterr().out.strip().splitlines()[-1]
    assert line.endswith(f"(exit {code})")


def test_resonant_report_names_the_mode(tmp_path, capsys):
    invoke("solve-diophantine", CONFIGS / "diophantine_resonant.toml", tmp_path)
    doc = report(tmp_path, "solve-diophantine")
    assert doc["status"] == "error" and doc["error"]["type"] in {"ResonantMode", "CertificateFailure"}
    assert doc["error"]["details"]


def test_beltrami_writes_grid_blob(tmp_path):
    invoke("solve-beltrami", CONFIGS / "beltrami_radial.toml", tmp_path, "--grid", "64")
    g = read_grid(tmp_path / "solve_beltrami_f.grid")
    assert g.N == 64
    assert abs(g.samples[32, 32]) < 1e-6  # f(0) = 0


# -- configuration errors --------------------------------------------------------

def write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_field_error_reports_line(tmp_path, capsys):
    cfg = write(tmp_path, "seed = 1\n[beltrami]\nN = 500\nc = 0.2\n")
    assert invoke("solve-beltrami", cfg, tmp_path) == 1
    err = capsys.readouterr().err
    assert f"{cfg}:3: beltrami.N" in err
    doc = report(tmp_path, "solve-beltrami")
    assert doc["error"]["type"] == "ConfigError"
    assert doc["error"]["details"]["diagnostics"][0][0] == 3


def test_unknown_key_and_bad_seed(tmp_path):
    text = "seed = -4\n\n[tower]\nfamly = 'geometric'\n"
    with pytest.raises(ConfigError) as exc:
        parse_config(text, "tower", "t.toml")
    diags = {d[1]: d[0] for d in exc.value.diagnostics}
    assert diags["seed"] == 1
    assert diags["tower.famly"] == 4


def test_toml_syntax_error_has_line(tmp_path):
    with pytest.raises(ConfigError) as exc:
        parse_config("[tower]\nbase = = 1\n", "tower")
    assert exc.value.diagnostics[0][0] == 2


def test_missing_seed_is_usage_error(tmp_path, capsys):
    text = (CONFIGS / "counterexample.toml").read_text()
    text = "\n".join(ln for ln in text.splitlines() if not ln.startswith("seed"))
    cfg = write(tmp_path, text)
    assert invoke("counterexample", cfg, tmp_path) == 1
    assert "seed" in capsys.readouterr().err


def test_unreadable_config_and_bad_flags(tmp_path, capsys):
    assert invoke("tower", tmp_path / "missing.toml", tmp_path) == 1
    with pytest.raises(SystemExit) as exc:
        run(["tower"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        run(["tower", "--config", "x.toml", "--seed", "-1"])
    assert exc.value.code == 1


def test_flag_override_validated(tmp_path):
    assert invoke("solve-beltrami", CONFIGS / "beltrami_radial.toml", tmp_path, "--grid", "100") == 1


def test_seed_flag_overrides_config(tmp_path):
    invoke("split-solve", CONFIGS / "split_global.toml", tmp_path, "--seed", "99", "--grid", "64")
    assert report(tmp_path, "split-solve")["seed"] == 99


def test_solver_failure_maps_to_negative_exit(tmp_path):
    cfg = write(tmp_path, "[beltrami]\nN = 64\nmax_iter = 2\ntol = 1e-14\n")
    assert invoke("solve-beltrami", cfg, tmp_path) == 2
    assert report(tmp_path, "solve-beltrami")["error"]["type"] == "IterationBudgetExceeded"


# -- determinism ------------------------------------------------------------------

def test_repeat_runs_identical_modulo_timestamp(tmp_path):
    docs = []
    for i in range(2):
        out = tmp_path / str(i)
        invoke("split-solve", CONFIGS / "split_global.toml", out, "--grid", "64")
        doc = report(out, "split-solve")
        doc.pop("generated_at")
        docs.append(dumps(doc))
    assert docs[0] == docs[1]


def test_console_script_runs(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "solenoid_ab.cli", "s-norm", "--config",
                           str(CONFIGS / "s_norm.toml"), "--out", str(tmp_path)],
                          capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "DOMINATED" in proc.stdout


# -- io ------------------------------------------------------------------------------

def test_grid_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    s = (rng.normal(size=(8, 8)) + 1j * rng.normal(size=(8, 8))).astype(np.complex64)
    g = ComplexGrid(0.5 - 1j, 3.0, s)
    back = grid_from_bytes(grid_to_bytes(g))
    assert back.center == g.center and back.half_width == 3.0
    assert np.array_equal(back.samples, s.astype(complex))
    data = grid_to_bytes(g)
    assert data[:8] == b"SABGRID1" and len(data) == 40 + 64 * 8
    write_grid(tmp_path / "g.grid", g)
    assert np.array_equal(read_grid(tmp_path / "g.grid").samples, back.samples)


@pytest.mark.parametrize("mangle", [lambda b: b[:10], lambda b: b"XXXXXXXX" + b[8:], lambda b: b[:-8],
                                    lambda b: b[:8] + b"c16b" + b[12:]])
def test_grid_rejects_bad_bytes(mangle):
    g = ComplexGrid(0, 1.0, np.zeros((4, 4)))
    with pytest.raises(ValueError):
        grid_from_bytes(mangle(grid_to_bytes(g)))


def test_grid_csv():
    g = ComplexGrid(0, 1.0, np.full((4, 4), 1 + 2j))
    lines = grid_csv(g).splitlines()
    assert lines[0] == "x,y,re,im" and len(lines) == 17
    assert lines[1] == "-1.0,-1.0,1.0,2.0"


def test_atomic_write_leaves_no_temp_and_honours_umask(tmp_path):
    p = atomic_write_text(tmp_path / "sub" / "r.json", "{}\n")
    assert p.read_text() == "{}\n"
    assert [q.name for q in p.parent.iterdir()] == ["r.json"]
    mask = os.umask(0)
    os.umask(mask)
    assert stat.S_IMODE(p.stat().st_mode) == 0o666 & ~mask


def test_dumps_is_strict_json():
    text = dumps({"b": float("nan"), "a": 1 + 2j, "c": np.float32(0.5)})
    assert json.loads(text) == {"a": [1.0, 2.0], "b": None, "c": 0.5}
    assert text.index('"a"') < text.index('"b"')
