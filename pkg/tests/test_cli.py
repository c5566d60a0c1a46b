import json
import subprocess
import sys

import pytest

from fractal_control import cli


def run(tmp_path, *args):
    return cli.main(list(args))


def test_unknown_experiment_is_usage_error(capsys):
    assert cli.main(["--experiment", "warp-drive"]) == 2
    assert "usage" in capsys.readouterr().err


def test_missing_experiment(capsys):
    assert cli.main([]) == 2


@pytest.mark.parametrize("flag,value", [("--level", "six"), ("--paths", "1e5x"), ("--horizon", "soon")])
def test_malformed_value_names_flag(flag, value, capsys):
    assert cli.main(["--experiment", "measures", flag, value]) == 2
    assert flag in capsys.readouterr().err


@pytest.mark.parametrize("args", [["--level", "-1"], ["--paths", "0"], ["--horizon", "0"], ["--a", "-2"],
                                  ["--workers", "0"]])
def test_out_of_range_values(args, capsys, tmp_path):
    assert cli.main(["--experiment", "geometry-audit", "--out", str(tmp_path / "g.csv"), *args]) == 2
    assert args[0] in capsys.readouterr().err


def test_level_guard_env(monkeypatch, capsys, tmp_path):
    monkeypatch.setenv("FRACTAL_CONTROL_MAX_LEVEL", "3")
    assert cli.main(["--experiment", "geometry-audit", "--level", "4", "--out", str(tmp_path / "g.csv")]) == 2
    assert "maximum level 3" in capsys.readouterr().err
    monkeypatch.setenv("FRACTAL_CONTROL_MAX_LEVEL", "14")
    assert cli.main(["--experiment", "geometry-audit", "--level", "4", "--out", str(tmp_path / "g.csv")]) == 0


def test_regulator_horizon_fixed(capsys):
    assert cli.main(["--experiment", "regulator", "--horizon", "2"]) == 2


def test_config_file_and_flag_precedence(tmp_path):
    conf = tmp_path / "run.conf"
    out = tmp_path / "m.json"
    conf.write_text(f"# measures run\nexperiment = measures\nlevel=3\nformat=csv\nout={out}\n")
    cfg = cli.parse_config(["--config", str(conf), "--format", "json", "--level", "2"])
    assert (cfg.experiment, cfg.level, cfg.format, cfg.out) == ("measures", 2, "json", str(out))
    assert cli.run_experiment(cfg) == 0
    doc = json.loads(out.read_text())
    assert doc["total_mu"] == "2/1" and len(doc["cells"]) == 9


def test_bad_config_file(tmp_path, capsys):
    conf = tmp_path / "bad.conf"
    conf.write_text("experiment=measures\nlevel=abc\n")
    assert cli.main(["--config", str(conf)]) == 2
    assert "--level" in capsys.readouterr().err
    conf.write_text("colour=blue\n")
    assert cli.main(["--config", str(conf)]) == 2


def test_manifest_always_written(tmp_path):
    out = tmp_path / "reg.json"
    code = cli.main(["--experiment", "regulator", "--level", "4", "--paths", "3000", "--format", "json",
                     "--out", str(out)])
    # too few paths per regression cell
    assert code == 1
    man = json.loads((tmp_path / "reg.json.manifest.json").read_text())
    assert man["exit_status"] == 1 and "BasisDegeneracyError" in man["error"]
    assert man["config"]["paths"] == 3000 and man["version"]


@pytest.mark.parametrize("experiment,extra", [
    ("geometry-audit", ["--level", "5"]),
    ("measures", ["--level", "3"]),
    ("kernel-slope", ["--level", "4", "--paths", "3000"]),
    ("bracket-moments", ["--level", "4", "--paths", "2000"]),
    ("singularity", ["--level", "4", "--paths", "1000"]),
    ("variation-orders", ["--level", "3", "--paths", "300"]),
])
@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_experiments_deterministic(tmp_path, experiment, extra, fmt):
    outs = []
    for i, workers in enumerate(("1", "3")):
        out = tmp_path / f"r{i}.{fmt}"
        assert cli.main(["--experiment", experiment, "--format", fmt, "--out", str(out), "--workers", workers,
                         *extra]) == 0
        outs.append(out.read_bytes())
        assert (tmp_path / f"r{i}.{fmt}.manifest.json").exists()
    assert outs[0] == outs[1]
    if fmt == "json":
        json.loads(outs[0])


def test_kernel_slope_csv_layout(tmp_path):
    out = tmp_path / "k.csv"
    assert cli.main(["--experiment", "kernel-slope", "--level", "4", "--paths", "2000", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "t,p_hat,stderr"
    assert len(lines) == 12 and lines[-1].startswith("# slope,")
    float(lines[1].split(",")[0])


def test_module_entry_point(tmp_path):
    out = tmp_path / "g.csv"
    r = subprocess.run([sys.executable, "-m", "fractal_control", "--experiment", "geometry-audit", "--level", "2",
                        "--out", str(out)], capture_output=True, text=True)
    assert r.returncode == 0
    assert out.read_text().splitlines()[0] == "level,vertices,edges,cells,ok"
