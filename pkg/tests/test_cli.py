import json

import pytest

from sdcsim import cli
from sdcsim.sim import InvariantViolation

TINY = {"fleet_size": 120, "horizon_days": 20, "defect_rate": 0.1}


@pytest.fixture
def conf(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return p


def test_run_writes_artifacts(conf, tmp_path, monkeypatch, capsys):
    monkeypatch.delenv(cli.OUT_ENV, raising=False)
    out = tmp_path / "o"
    assert cli.main(["run", str(conf), "--seed", "3", "--out", str(out)]) == 0
    for name in ("effective_config.json", "events.jsonl", "result.json", "report.json", "report.md"):
        assert (out / name).exists()
    assert "| Metric |" in capsys.readouterr().out
    assert cli.main(["report", str(out), "--format", "csv"]) == 0
    assert capsys.readouterr().out.startswith("metric,value")
    assert cli.main(["report", str(out / "result.json"), "--format", "json"]) == 0
    assert json.loads(capsys.readouterr().out)["seed"] == 3


def test_env_out_dir_wins(conf, tmp_path, monkeypatch):
    env_dir = tmp_path / "env"
    monkeypatch.setenv(cli.OUT_ENV, str(env_dir))
    assert cli.main(["run", str(conf), "--no-log", "--out", str(tmp_path / "flag")]) == 0
    assert (env_dir / "result.json").exists() and not (tmp_path / "flag").exists()


def test_config_errors_exit_1(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"riple": {}}')
    assert cli.main(["run", str(bad), "--no-log", "--out", str(tmp_path)]) == 1
    assert "riple" in capsys.readouterr().err
    bad.write_text('{"fleet_size": }')
    assert cli.main(["run", str(bad), "--no-log", "--out", str(tmp_path)]) == 1


def test_invariant_violation_exits_2(conf, tmp_path, monkeypatch):
    def boom(*a, **k):
        raise InvariantViolation("detections on defect-free machines")
    monkeypatch.setattr(cli, "run", boom)
    assert cli.main(["run", str(conf), "--no-log", "--out", str(tmp_path)]) == 2


def test_selfcheck_exit_codes(monkeypatch, capsys):
    assert cli.main(["selfcheck", "--iterations", "20000"]) == 0
    assert json.loads(capsys.readouterr().out)["passed"] is True

    class Failed:
        passed = False

        def to_dict(self):
            return {"passed": False}
    monkeypatch.setattr(cli, "selfcheck", lambda n: Failed())
    assert cli.main(["selfcheck"]) == 3


def test_sweep(conf, tmp_path, monkeypatch, capsys):
    monkeypatch.delenv(cli.OUT_ENV, raising=False)
    assert cli.main(["sweep", str(conf), "--seeds", "0..2", "--out", str(tmp_path / "s")]) == 0
    agg = json.loads((tmp_path / "s" / "sweep.json").read_text())
    assert agg["seeds"] == [0, 1, 2]
    assert (tmp_path / "s" / "report_seed2.json").exists()


@pytest.mark.parametrize("text, want", [("0..3", [0, 1, 2, 3]), ("5", [5]), ("1,4,9", [1, 4, 9]), ("2..2", [2])])
def test_parse_seeds(text, want):
    assert cli.parse_seeds(text) == want


def test_parse_seeds_rejects_garbage():
    with pytest.raises(Exception):
        cli.parse_seeds("a..b")
    with pytest.raises(Exception):
        cli.parse_seeds("5..1")
