import subprocess
import sys

import pytest

from aeodelab.cli import main, resolve_threads
from aeodelab.config import KINDS, ConfigError

SMALL = """
[experiment]
kind = tied_vs_untied
seed = 0

[data]
dim = 100
rho_tilde = 1.0, 0.5

[network]
K = 2
std = 1e-3

[train]
s_max = 5
log_factor = 1.5
"""


def _write(tmp_path, text, name="c.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_list_kinds(capsys):
    assert main(["list-kinds"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert [line.split("\t")[0] for line in out] == list(KINDS)
    assert all(line.endswith(".ini") for line in out)


def test_unknown_kind(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL.replace("tied_vs_untied", "bogus"))
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "bogus" in err and all(k in err for k in KINDS)


def test_invalid_field_exit_code(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL.replace("K = 2", "K = 2\nactivation = tanh"))
    assert main(["run", "--config", cfg]) == 2
    assert "network.activation" in capsys.readouterr().err


def test_run_writes_artifacts_deterministically(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL)
    a, b, c = (tmp_path / n for n in "abc")
    assert main(["run", "--config", cfg, "--out", str(a)]) == 0
    assert main(["run", "--config", cfg, "--out", str(b), "--threads", "2"]) == 0
    assert main(["run", "--config", cfg, "--out", str(c), "--seed", "7"]) == 0
    text = (a / "run.csv").read_bytes()
    assert text.startswith(b"# schema=1 kind=tied_vs_untied seed=0\n")
    assert text == (b / "run.csv").read_bytes()
    assert text != (c / "run.csv").read_bytes()
    summary = (a / "summary.txt").read_text()
    assert "final_pmse_tied = " in summary and "pass_untied_reaches_rankK" in summary
    assert (a / "plot.svg").read_text().startswith("<svg")


def test_compare(tmp_path, capsys):
    cfg = _write(tmp_path, SMALL)
    main(["run", "--config", cfg, "--out", str(tmp_path / "a")])
    main(["run", "--config", cfg, "--out", str(tmp_path / "b"), "--seed", "1"])
    a, b = str(tmp_path / "a" / "run.csv"), str(tmp_path / "b" / "run.csv")
    capsys.readouterr()
    assert main(["compare", a, a]) == 0
    out = capsys.readouterr().out
    assert "pmse_tied: max_rel_dev=0 " in out and out.strip().endswith("pass")
    assert main(["compare", a, b, "--tolerance", "1e-12"]) == 1
    assert "FAIL" in capsys.readouterr().out
    dev = tmp_path / "dev.csv"
    assert main(["compare", a, "--columns", "pmse_tied:pmse_untied", "--tolerance", "10", "--out", str(dev)]) == 0
    assert dev.read_text().startswith("# schema=1\ns,rel_dev_pmse_tied:pmse_untied\n")


def test_compare_errors(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("s,pmse\n0,1\n")
    assert main(["compare", str(bad), str(bad)]) == 2
    good = tmp_path / "good.csv"
    good.write_text("# schema=1\ns,pmse\n0,1\n")
    other = tmp_path / "other.csv"
    other.write_text("# schema=1\ns,loss\n0,1\n")
    assert main(["compare", str(good), str(other)]) == 2
    assert main(["compare", str(good)]) == 2
    assert main(["compare", str(good), "--columns", "nope"]) == 2
    assert main(["compare", str(tmp_path / "missing.csv"), str(good)]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_abort(tmp_path, capsys):
    text = SMALL.replace("std = 1e-3", "std = 1.0\nactivation = linear") + "eta = 1e6\n"
    assert main(["run", "--config", _write(tmp_path, text), "--out", str(tmp_path / "o")]) == 3
    assert "numerical abort" in capsys.readouterr().err


def test_degenerate_spike_warning(tmp_path, capsys):
    text = SMALL.replace("tied_vs_untied", "truncated_vs_vanilla").replace("1.0, 0.5", "1.0, 1.0")
    assert main(["run", "--config", _write(tmp_path, text), "--out", str(tmp_path / "o")]) == 0
    assert "warning" in capsys.readouterr().err


def test_threads_resolution(monkeypatch):
    monkeypatch.delenv("AEODELAB_THREADS", raising=False)
    assert resolve_threads(None) == 1
    monkeypatch.setenv("AEODELAB_THREADS", "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(2) == 2
    monkeypatch.setenv("AEODELAB_THREADS", "x")
    with pytest.raises(ConfigError):
        resolve_threads(None)
    with pytest.raises(ConfigError):
        resolve_threads(0)


def test_console_entry_point(tmp_path):
    out = subprocess.run(
        [sys.executable, "-m", "aeodelab.cli", "list-kinds"], capture_output=True, text=True, check=True
    )
    assert "ode_vs_sim" in out.stdout
