import subprocess
import sys

import pytest

from vpcsys.harness import procs
from vpcsys.harness.cli import EXIT_SKIPPED, EXIT_USAGE, EXIT_VIOLATION, main
from vpcsys.icps_sim import read_trace, write_trace


@pytest.fixture(scope="module")
def clean_trace(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["test", "normal", "--samples", "500", "--out", str(out)]) == 0
    return out / "normal-inproc.csv"


def test_normal_case_passes(clean_trace, capsys):
    assert clean_trace.exists()
    assert (clean_trace.with_suffix(".json")).exists()


def test_report_on_clean_trace(clean_trace, capsys):
    assert main(["report", str(clean_trace)]) == 0
    assert "PASS  no_missed" in capsys.readouterr().out


def test_report_names_violated_rule(clean_trace, tmp_path, capsys):
    records, meta = read_trace(str(clean_trace))
    rec = records[10]
    rec.missed, rec.output_bit, rec.t_recv = True, None, 0
    bad = tmp_path / "bad.csv"
    write_trace(str(bad), records, meta)
    assert main(["report", str(bad)]) == EXIT_VIOLATION
    assert "violated: no_missed" in capsys.readouterr().err


def test_report_json(clean_trace, capsys):
    assert main(["report", "--json", str(clean_trace)]) == 0
    assert '"missed_count": 0' in capsys.readouterr().out


def test_malformed_trace(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("not,a,trace\n")
    assert main(["report", str(bad)]) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_missing_trace(tmp_path):
    assert main(["report", str(tmp_path / "absent.csv")]) == EXIT_USAGE


def test_bad_arguments():
    with pytest.raises(SystemExit) as exc:
        main(["test", "no-such-case"])
    assert exc.value.code == 2


def test_invalid_params(capsys):
    assert main(["test", "replacement", "--backups", "0", "--samples", "100"]) == EXIT_USAGE
    assert "backups" in capsys.readouterr().err


def test_run_with_missing_config(tmp_path):
    assert main(["run", "vpc", "--config", str(tmp_path / "none.conf")]) == EXIT_USAGE


def test_run_with_unknown_node(tmp_path):
    cfg = tmp_path / "role.conf"
    cfg.write_text("node = 9\n[peers]\n1 = 127.0.0.1:40001\n")
    assert main(["run", "vpc", "--config", str(cfg)]) == EXIT_USAGE


def test_raw_frames_unavailable_is_skipped(monkeypatch, capsys):
    monkeypatch.setattr(procs, "raw_frames_available", lambda iface="lo": False)
    assert main(["test", "normal", "--channel", "l2", "--samples", "10"]) == EXIT_SKIPPED
    assert "SKIPPED: raw-frame unavailable" in capsys.readouterr().out


def test_module_help():
    out = subprocess.run([sys.executable, "-m", "vpcsys", "--help"], capture_output=True, text=True, timeout=60)
    assert out.returncode == 0
    assert "report" in out.stdout and "test" in out.stdout
