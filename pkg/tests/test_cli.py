import json
import subprocess
import sys

import numpy as np
import pytest

from macbound.cli import main, parse_grid, parse_window, read_config, render, write_atomic


def run(argv, capsys):
    code = main(argv)
    out = capsys.readouterr()
    return code, out.out, out.err


def data_lines(text):
    return [l for l in text.splitlines() if not l.startswith("#")]


def test_parse_grid():
    np.testing.assert_allclose(parse_grid("1:3:3:lin"), [1, 2, 3])
    np.testing.assert_allclose(parse_grid("1e-3:1e-1:3:log"), [1e-3, 1e-2, 1e-1])
    assert parse_grid("0.5").tolist() == [0.5]
    for bad in ("1:2:3", "0:1:3:log", "2:1:3:lin", "1:2:0:lin", "1:2:3:cubic"):
        with pytest.raises(ValueError):
            parse_grid(bad)


def test_parse_window():
    assert parse_window("-5:60") == (-5.0, 60.0)
    with pytest.raises(ValueError):
        parse_window("3:3")


def test_read_config(tmp_path):
    f = tmp_path / "c.cfg"
    f.write_text("# comment\nchannel = awgn\n--mu-grid=1:2:2:lin  # trailing\n\n")
    assert read_config(str(f)) == {"channel": "awgn", "mu_grid": "1:2:2:lin"}


def test_epsilon_star_m2(capsys):
    code, out, _ = run(["scalar", "--channel", "awgn", "--k", "1", "--tau", "1",
                        "--op", "epsilon-star"], capsys)
    assert code == 0
    assert data_lines(out)[0] == "tau,epsilon-star"
    assert float(data_lines(out)[1].split(",")[1]) == pytest.approx(0.30854, abs=1e-5)
    code, out2, _ = run(["scalar", "--channel", "awgn", "--M", "2", "--tau", "1",
                         "--op", "epsilon-star"], capsys)
    assert data_lines(out2) == data_lines(out)


def test_scalar_grid_and_json(capsys):
    code, out, _ = run(["scalar", "--channel", "qsf", "--k", "3", "--tau", "0.01:1:5:log",
                        "--op", "pi-star", "--format", "json"], capsys)
    assert code == 0
    doc = json.loads(out)
    assert doc["columns"] == ["tau", "pi-star"]
    assert len(doc["rows"]) == 5
    assert doc["meta"]["command"] == "scalar"


@pytest.mark.parametrize("argv", [
    ["scalar", "--channel", "awgn", "--tau", "1", "--op", "mmse"],              # missing k
    ["scalar", "--channel", "awgn", "--k", "1", "--M", "2", "--tau", "1", "--op", "mmse"],
    ["scalar", "--channel", "awgn", "--k", "1", "--tau", "1:2", "--op", "mmse"],
    ["scalar", "--channel", "awgn", "--k", "1", "--tau", "-1", "--op", "mmse"],
    ["scalar", "--channel", "awgn", "--M", "3", "--tau", "1", "--op", "mmse"],
    ["potential", "--channel", "awgn", "--k", "4", "--mu", "0.1", "--E", "5", "--ebn0", "3"],
    ["potential", "--channel", "awgn", "--k", "4", "--mu", "0.1"],
    ["se", "--channel", "awgn", "--k", "4", "--mu", "0.1", "--E", "10", "--omega", "3",
     "--Lambda", "4"],
    ["bound", "--channel", "qsf", "--k", "4", "--eps", "2", "--mu", "0.1"],
    ["bound", "--channel", "qsf", "--k", "4", "--eps", "1e-3"],
    ["simulate", "--channel", "awgn", "--k", "4", "--n", "100", "--K", "16", "--E", "10",
     "--omega", "3", "--Lambda", "16"],
    ["scalar", "--channel", "awgn", "--k", "1", "--tau", "1", "--op", "mmse", "--log-level", "loud"],
    [],
])
def test_usage_errors(argv, capsys):
    code, _, err = run(argv, capsys)
    assert code == 2
    assert err


def test_usage_error_names_flag(capsys):
    code, _, err = run(["bound", "--channel", "qsf", "--k", "4", "--eps", "2", "--mu", "0.1"], capsys)
    assert code == 2 and "--eps" in err and "(0, 1)" in err


def test_potential_csv(capsys, tmp_path):
    out = tmp_path / "land.csv"
    code, _, _ = run(["potential", "--channel", "awgn", "--k", "100", "--mu", "0.02",
                      "--ebn0", "7", "-o", str(out)], capsys)
    assert code == 0
    text = out.read_text()
    lines = data_lines(text)
    assert lines[0] == "tau,F,is_min"
    assert len(lines) == 2001
    assert any(l.endswith(",1") for l in lines[1:])
    assert text.splitlines()[-1].startswith("#")
    assert "# config.mu=0.02" in text


def test_se_csv(capsys):
    code, out, _ = run(["se", "--channel", "awgn", "--k", "4", "--mu", "0.1", "--E", "36.77",
                        "--omega", "3", "--Lambda", "16"], capsys)
    assert code == 0
    lines = data_lines(out)
    assert lines[0] == "t,c,tau_c,Mpsi_c"
    assert "# converged=1" in out


def test_se_nonconverged_exit(capsys):
    code, _, _ = run(["se", "--channel", "awgn", "--k", "4", "--mu", "0.1", "--E", "36.77",
                      "--omega", "3", "--Lambda", "16", "--t-max", "2"], capsys)
    assert code == 1


def test_bound_single_mu(capsys):
    code, out, _ = run(["bound", "--channel", "awgn", "--k", "100", "--eps", "1e-3",
                        "--mu", "0.001"], capsys)
    assert code == 0
    lines = data_lines(out)
    assert lines[0] == "mu,ebn0_db,E,tau_star,pupe,phase_flag"
    assert 0.7 < float(lines[1].split(",")[1]) < 0.85


def test_bound_failed_rows_exit_1(capsys):
    code, out, _ = run(["bound", "--channel", "awgn", "--k", "4", "--eps", "1e-3",
                        "--mu", "0.1", "--window", "40:60"], capsys)
    assert code == 1
    assert "failed" in out


def test_config_file_and_flag_override(capsys, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("channel=awgn\nk=1\ntau=1\nop=epsilon-star\nmu=0.3\n")
    code, out, _ = run(["scalar", "--config", str(cfg)], capsys)
    assert code == 0
    assert float(data_lines(out)[1].split(",")[1]) == pytest.approx(0.30854, abs=1e-5)
    code, out2, _ = run(["scalar", "--config", str(cfg), "--tau", "0.0625"], capsys)
    assert float(data_lines(out2)[1].split(",")[1]) == pytest.approx(0.02275, abs=1e-5)


def test_config_unknown_key(capsys, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("channel=awgn\nbogus=1\n")
    code, _, err = run(["scalar", "--config", str(cfg)], capsys)
    assert code == 2 and "bogus" in err


def test_simulate_deterministic(capsys, tmp_path):
    argv = ["simulate", "--channel", "awgn", "--k", "2", "--n", "480", "--K", "48", "--E", "30",
            "--omega", "3", "--Lambda", "6", "--trials", "2", "--seed", "7"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert run(argv + ["-o", str(a)], capsys)[0] == 0
    assert run(argv + ["-o", str(b), "--threads", "2"], capsys)[0] == 0
    assert a.read_bytes() == b.read_bytes()
    lines = data_lines(a.read_text())
    assert lines[0] == "trial,ser,m_dh,energy_mean"
    assert lines[-1].startswith("mean,")


def test_write_atomic_replaces(tmp_path):
    p = tmp_path / "sub" / "x.csv"
    write_atomic(str(p), "one\n")
    write_atomic(str(p), "two\n")
    assert p.read_text() == "two\n"
    assert [f.name for f in p.parent.iterdir()] == ["x.csv"]


def test_render_trailing_meta():
    text = render(["a", "b"], [(1, 0.5), (2, float("inf"))], {"version": "1"}, "csv")
    assert text == "a,b\n1,0.5\n2,inf\n# version=1\n"
    doc = json.loads(render(["a"], [(float("nan"),)], {}, "json"))
    assert doc["rows"] == [["nan"]]


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "macbound", "scalar", "--channel", "qsf", "--k", "1",
                        "--tau", "1", "--op", "pi-star"], capture_output=True, text=True)
    assert r.returncode == 0
    assert float(data_lines(r.stdout)[1].split(",")[1]) == pytest.approx(0.75, rel=1e-12)
