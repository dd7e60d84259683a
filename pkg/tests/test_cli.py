import json
import logging

import numpy as np
import pytest
import yaml

from sbheom import cli
from sbheom.config import validate
from sbheom.errors import ConfigError
from sbheom.series import read_csv, read_manifest

SMALL = {
    "bath": {"s": 1.0, "alpha": 0.1},
    "fit": {"t_max_wc": 100, "NR": 4, "NI": 3, "n_samples": 300, "multistart": 2,
            "tolerance": 1e-3},
    "system": {"omega_c_over_delta": 5},
    "hierarchy": {"H": 3},
    "integration": {"dt": 0.01, "t_eq": 20, "t_resp": 40, "stride": 10},
    "output": {"omega_max": 4, "d_omega": 0.2},
}


@pytest.fixture(scope="module")
def cache_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("cache")


@pytest.fixture(autouse=True)
def _cache_env(cache_dir, monkeypatch):
    monkeypatch.setenv(cli.CACHE_ENV, str(cache_dir))


def write_config(path, doc, **overrides):
    doc = json.loads(json.dumps(doc))
    for dotted, value in overrides.items():
        sec, key = dotted.split("__")
        doc.setdefault(sec, {})[key] = value
    path.write_text(yaml.safe_dump(doc))
    return path


def run(*argv):
    return cli.main(["-q", *map(str, argv)])


def test_missing_alpha_names_the_field(tmp_path, capsys):
    doc = json.loads(json.dumps(SMALL))
    del doc["bath"]["alpha"]
    cfg = write_config(tmp_path / "c.yaml", doc)
    assert run("relax", cfg) == cli.EXIT_CONFIG
    assert "bath.alpha" in capsys.readouterr().err


@pytest.mark.parametrize("section,key,value,path", [
    ("hierarchy", "H", 2.5, "hierarchy.H"),
    ("hierarchy", "depth", 3, "hierarchy.depth"),
    ("bath", "s", -1.0, "bath.s"),
    ("output", "window", "hann", "output.window"),
    ("integration", "t_eq", 20.005, "integration.t_eq"),
    ("hierarchy", "rescale", "yes", "hierarchy.rescale"),
])
def test_schema_errors_carry_field_paths(section, key, value, path):
    doc = json.loads(json.dumps(SMALL))
    doc[section][key] = value
    with pytest.raises(ConfigError) as info:
        validate(doc)
    assert info.value.path == path


def test_defaults_are_echoed():
    cfg = validate({"bath": {"s": 0.5, "alpha": 0.2}})
    assert cfg["fit"]["NR"] == 9 and cfg["hierarchy"]["budget"] == 2_000_000
    assert cfg["integration"]["t_eq"] == 100.0 and cfg["output"]["window"] == "cosine"


def test_sweep_needs_grids_but_not_bath():
    with pytest.raises(ConfigError) as info:
        validate({}, "sweep")
    assert info.value.path == "sweep.s"
    assert validate({"sweep": {"s": [1], "alpha": [0.1, 0.2]}}, "sweep")["bath"]["s"] is None


def test_fit_bath_outputs_and_determinism(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", SMALL, output__dir=str(tmp_path / "a"))
    assert run("fit-bath", cfg) == 0
    doc = json.loads((tmp_path / "a" / "fit.json").read_text())
    assert doc["manifest"]["command"] == "fit-bath"
    assert doc["manifest"]["fit_hash"]
    assert doc["fit"]["quality_ok"] and doc["fit"]["residual"]["max_I"] < 1e-3
    manifest, cols = read_csv(tmp_path / "a" / "fit_errors.csv")
    assert manifest == doc["manifest"]
    assert set(cols) == {"t", "dC_R", "dC_I"}
    _, over = read_csv(tmp_path / "a" / "fit_overlay.csv")
    assert np.allclose(over["fit_R"] - over["C_R"], cols["dC_R"], atol=1e-15)
    cfg2 = write_config(tmp_path / "d.yaml", SMALL, output__dir=str(tmp_path / "b"))
    assert run("fit-bath", cfg2) == 0
    again = json.loads((tmp_path / "b" / "fit.json").read_text())
    assert again["fit"] == doc["fit"]


def test_respond_reuses_cached_equilibrium(tmp_path, caplog):
    cfg = write_config(tmp_path / "c.yaml", SMALL, output__dir=str(tmp_path))
    assert run("relax", cfg) == 0
    caplog.clear()
    with caplog.at_level(logging.INFO, logger="sbheom"):
        assert cli.main(["respond", str(cfg)]) == 0
    assert any("cache hit: equilibrium" in r.getMessage() for r in caplog.records)
    manifest, cols = read_csv(tmp_path / "chi.csv")
    assert list(cols) == ["t", "chi"] and cols["chi"][0] == 0.0
    assert cols["t"][-1] == pytest.approx(40.0)
    assert manifest["hierarchy"]["n_ado"] == 120


def test_isolated_spin_spectrum_peak(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", SMALL, bath__alpha=0.0, system__initial="ground",
                       output__dir=str(tmp_path),
                       output__d_omega=0.05, integration__t_resp=200)
    assert run("spectrum", cfg) == 0
    manifest, peaks = read_csv(tmp_path / "peaks.csv")
    assert peaks["location"].size == 1
    assert abs(peaks["location"][0] - 2.0) <= 0.05
    _, spec = read_csv(tmp_path / "spectrum.csv")
    assert list(spec) == ["omega", "chi2", "chi2_raw"]
    assert manifest["window"] == {"kind": "cosine", "fraction": 0.1}


def test_kernel_outputs(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", SMALL, output__dir=str(tmp_path))
    assert run("kernel", cfg) == 0
    summary = json.loads((tmp_path / "kernel_summary.json").read_text())
    assert summary["kappa0"] > 0 and summary["coherent"]
    _, k = read_csv(tmp_path / "kernel.csv")
    _, dm = read_csv(tmp_path / "delta_m.csv")
    assert k["t"][0] == 0.0 and dm["omega"][0] == 0.0


def test_rerun_from_manifest_is_bitwise_identical(tmp_path):
    out = tmp_path / "orig"
    cfg = write_config(tmp_path / "c.yaml", SMALL, output__dir=str(out))
    for command in ("fit-bath", "relax", "spectrum", "kernel"):
        assert run(command, cfg) == 0
    for f in sorted(out.iterdir()):
        dest = tmp_path / f"re-{f.stem}"
        assert run("rerun", f, "--out", dest) == 0
        assert (dest / f.name).read_bytes() == f.read_bytes(), f.name


def test_sweep_resumes(tmp_path, caplog):
    doc = json.loads(json.dumps(SMALL))
    del doc["bath"]
    doc["sweep"] = {"s": [1.0], "alpha": [0.1, 0.6]}
    doc["output"]["dir"] = str(tmp_path / "sw")
    cfg = write_config(tmp_path / "c.yaml", doc)
    assert run("sweep", cfg) == 0
    assert read_manifest(tmp_path / "sw" / "sweep.csv")["command"] == "sweep"
    with caplog.at_level(logging.INFO, logger="sbheom"):
        assert cli.main(["sweep", str(cfg)]) == 0
    assert any("0 points computed, 2 reused" in r.getMessage() for r in caplog.records)
    _, rows = read_csv_rows(tmp_path / "sw" / "sweep.csv")
    assert [r["status"] for r in rows] == ["ok", "ok"]
    doc["sweep"]["alpha"] = [0.1, 0.3, 0.6]
    cfg = write_config(tmp_path / "c.yaml", doc)
    caplog.clear()
    with caplog.at_level(logging.INFO, logger="sbheom"):
        assert cli.main(["sweep", str(cfg)]) == 0
    assert any("1 points computed, 2 reused" in r.getMessage() for r in caplog.records)
    bound = json.loads((tmp_path / "sw" / "boundary.json").read_text())
    assert "1.0" in bound["boundaries"]


def read_csv_rows(path):
    import csv
    with open(path) as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return None, list(csv.DictReader(lines))


def test_inspect_prints_manifest(tmp_path, capsys, cache_dir):
    cfg = write_config(tmp_path / "c.yaml", SMALL, output__dir=str(tmp_path))
    assert run("relax", cfg) == 0
    capsys.readouterr()
    assert run("inspect", tmp_path / "relax_M.csv") == 0
    assert json.loads(capsys.readouterr().out)["command"] == "relax"
    ado = next((cache_dir / "equilibrium").glob("*.ado"))
    assert run("inspect", ado) == 0
    assert json.loads(capsys.readouterr().out)["role"] == "density"


def test_budget_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", SMALL, hierarchy__H=3, hierarchy__budget=10,
                       output__dir=str(tmp_path))
    assert run("relax", cfg) == cli.EXIT_BUDGET
    assert "120" in capsys.readouterr().err


def test_divergence_exit_code(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.yaml", SMALL, integration__dt=2.0, integration__t_eq=400,
                       output__dir=str(tmp_path))
    assert run("relax", cfg) == cli.EXIT_DIVERGENCE
    assert "diverged" in capsys.readouterr().err
