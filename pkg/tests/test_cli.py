import json
import subprocess
import sys

import pytest
from sdpa_oracle import read_sdpa

from windowrisk.cli import EXIT_CHECK, EXIT_INVALID, EXIT_IO, EXIT_OK, EXIT_PARSE, EXIT_USAGE, main, parse_k_range

LINE = """\
name: line
states: [x]
state_set:
  box: [[-1, 1]]
initial_set:
  ball: {center: [0.5], radius: 0.01}
dynamics:
  kind: continuous
  drift: ["-x"]
  diffusion: [["0.2"]]
horizon: 3
window: 1
cost: x
risk: {kind: mean}
"""


@pytest.fixture
def line_file(tmp_path):
    p = tmp_path / "line.yaml"
    p.write_text(LINE)
    return p


def strip_timing(obj):
    if isinstance(obj, dict):
        return {k: strip_timing(v) for k, v in obj.items() if k != "seconds"}
    if isinstance(obj, list):
        return [strip_timing(v) for v in obj]
    return obj


def test_parse_k_range():
    assert parse_k_range("3") == [3]
    assert parse_k_range("1..4") == [1, 2, 3, 4]


@pytest.mark.parametrize("argv, code", [
    (["bound", "--problem", "twist", "--k", "0"], EXIT_INVALID),
    (["bound", "--problem", "twist", "--k", "3..1"], EXIT_INVALID),
    (["bound", "--problem", "twist", "--k", "x"], EXIT_INVALID),
    (["sample", "--problem", "oscillator", "--paths", "0"], EXIT_INVALID),
    (["sample", "--problem", "oscillator", "--dt", "-1"], EXIT_INVALID),
    (["bound", "--problem", "twist", "--risk", "es"], EXIT_INVALID),
    (["bound", "--problem", "twist", "--epsilon", "1.5"], EXIT_INVALID),
    (["bound", "--problem", "no_such_problem.yaml"], EXIT_IO),
])
def test_exit_codes(argv, code, tmp_path):
    assert main(argv + ["--out", str(tmp_path)]) == code


def test_bad_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["bound", "--problem", "twist", "--bogus"])
    assert exc.value.code == EXIT_USAGE


def test_parse_error_exit_code(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text(LINE.replace("cost: x", "cost: x +* 2"))
    assert main(["bound", "--problem", str(p), "--out", str(tmp_path)]) == EXIT_PARSE


def test_unwritable_output(tmp_path, line_file):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["bound", "--problem", str(line_file), "--out", str(blocker / "sub")]) == EXIT_IO


def test_export_only_writes_sdpa(tmp_path):
    assert main(["bound", "--problem", "oscillator", "--k", "1..2", "--solver", "export-only",
                 "--out", str(tmp_path)]) == EXIT_OK
    for k in (1, 2):
        c, sizes, _ = read_sdpa(tmp_path / f"oscillator_mean_k{k}.dat-s")
        assert len(c) > 0 and sizes
    assert not list(tmp_path.glob("*_bounds.*"))


def test_bound_writes_reports(tmp_path, line_file, capsys):
    assert main(["bound", "--problem", str(line_file), "--k", "1..2", "--out", str(tmp_path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "status" in out and "Optimal" in out
    data = json.loads((tmp_path / "line_mean_bounds.json").read_text())
    bounds = [r["bound"] for r in data["results"]]
    assert bounds[0] >= bounds[1] - 1e-5
    assert all(all(m["passed"] for m in r["mass_checks"]) for r in data["results"])
    assert (tmp_path / "line_mean_bounds.txt").read_text().count("\n") >= 3


def test_bound_artifacts_reproducible(tmp_path, line_file):
    runs = []
    for sub in ("a", "b"):
        assert main(["bound", "--problem", str(line_file), "--k", "2", "--out", str(tmp_path / sub)]) == EXIT_OK
        runs.append(strip_timing(json.loads((tmp_path / sub / "line_mean_bounds.json").read_text())))
    assert runs[0] == runs[1]


def test_es_override(tmp_path, line_file):
    assert main(["bound", "--problem", str(line_file), "--epsilon", "0.2", "--k", "1",
                 "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "line_es0.2_bounds.json").exists()


def test_sample_is_deterministic(tmp_path):
    args = ["sample", "--problem", "oscillator", "--paths", "100", "--seed", "1", "--dt", "0.01"]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == ["oscillator_traces.csv", "oscillator_window_mean_max.csv", "oscillator_window_mean_mean.csv"]
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_sample_es_files(tmp_path, line_file):
    assert main(["sample", "--problem", str(line_file), "--epsilon", "0.2", "--paths", "20", "--dt", "0.01",
                 "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "line_window_es_pooled.csv").exists()
    assert (tmp_path / "line_window_es_max.csv").exists()


def test_validate_passes_on_line(tmp_path, line_file, capsys):
    code = main(["validate", "--problem", str(line_file), "--k", "1..2", "--paths", "200", "--dt", "0.01",
                 "--out", str(tmp_path)])
    assert code == EXIT_OK
    assert "overall: pass" in capsys.readouterr().out
    assert json.loads((tmp_path / "line_mean_validate.json").read_text())["passed"] is True


def test_validate_flags_shrunk_state_set(tmp_path, capsys):
    p = tmp_path / "shrunk.yaml"
    p.write_text(LINE.replace("[[-1, 1]]", "[[-1, 0.515]]").replace('"0.2"', '"0.5"').replace("-x", "1"))
    main(["validate", "--problem", str(p), "--k", "1", "--paths", "50", "--dt", "0.01", "--out", str(tmp_path)])
    out = capsys.readouterr().out
    assert "left the state set" in out and "misspecified" in out


def test_validate_fails_when_bound_is_below_samples(tmp_path, monkeypatch, line_file):
    import windowrisk.certify as certify

    real = certify.BoundResult.bound
    monkeypatch.setattr(certify.BoundResult, "bound", property(lambda self: real.fget(self) - 1.0))
    code = main(["validate", "--problem", str(line_file), "--k", "1", "--paths", "50", "--dt", "0.01",
                 "--out", str(tmp_path)])
    assert code == EXIT_CHECK


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "windowrisk", "bound", "--problem", "twist", "--k", "0"],
                       capture_output=True, text=True)
    assert r.returncode == EXIT_INVALID and "--k" in r.stderr
