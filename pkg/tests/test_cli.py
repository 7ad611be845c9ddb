import json

import pytest

from specdeck.cli import main
from specdeck.preserve import KeepSet


@pytest.fixture
def grid_files(tmp_path):
    g, x = tmp_path / "g.vtg", tmp_path / "x.xat"
    assert main(["gen-grid", "--scenario", "boundary_bias", "--frames", "4", "--grid", str(g),
                 "--xattn", str(x)]) == 0
    return g, x


def test_simulate_writes_outputs(tmp_path, capsys):
    js, cs, tr, bd = (tmp_path / n for n in ("s.json", "s.csv", "t.jsonl", "b.csv"))
    code = main(["simulate", "--method", "vpsd", "--gamma", "3", "--max-new", "40", "--seeds", "0,1",
                 "--json", str(js), "--csv", str(cs), "--trace", str(tr), "--breakdown", str(bd),
                 "--timeline"])
    assert code == 0
    doc = json.loads(js.read_text())
    assert doc["config"]["gamma"] == 3 and len(doc["runs"]) == 2 and "std" in doc
    assert cs.read_text().startswith("# specdeck-csv v1\n")
    assert bd.read_text().startswith("phase,time\n")
    assert "target |" in capsys.readouterr().err
    assert main(["trace-render", str(tr), "--width", "40"]) == 0
    assert "method=vpsd" in capsys.readouterr().out


def test_env_seed_is_default(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("SPECDECK_SEED", "42")
    assert main(["simulate", "--set", "max_new=16"]) == 0
    assert json.loads(capsys.readouterr().out)["config"]["seeds"] == [42]
    assert main(["simulate", "--set", "max_new=16", "--seeds", "5"]) == 0
    assert json.loads(capsys.readouterr().out)["config"]["seeds"] == [5]
    monkeypatch.setenv("SPECDECK_SEED", "abc")
    assert main(["simulate"]) == 2
    assert "SPECDECK_SEED" in capsys.readouterr().err


def test_config_file_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("method = serial_sd\nmax_new = 20\ngamma = 2\n")
    assert main(["simulate", "--config", str(cfg), "--gamma", "4"]) == 0
    assert json.loads(capsys.readouterr().out)["config"]["gamma"] == 4


@pytest.mark.parametrize("argv,needle", [
    (["simulate", "--set", "gamma=0"], "gamma"),
    (["simulate", "--set", "colour=red"], "colour"),
    (["simulate", "--set", "novalue"], "--set"),
    (["simulate", "--set", "grid_file=missing.vtg", "--set", "xattn_file=missing.xat"], "missing.vtg"),
    (["sweep", "--axis", "method", "--values", "ar"], "axis"),
    (["bias-report", "missing.json"], "missing.json"),
    (["trace-render", "missing.jsonl"], "missing.jsonl"),
])
def test_errors_exit_nonzero_naming_the_culprit(argv, needle, capsys):
    assert main(argv) != 0
    assert needle in capsys.readouterr().err


def test_config_file_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("gamma = 3\nkeep_ration = 0.2\n")
    assert main(["simulate", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "keep_ration" in err and "bad.cfg:2" in err


def test_prune_and_bias_report(grid_files, tmp_path, capsys):
    g, x = grid_files
    out = tmp_path / "out"
    assert main(["prune", "--grid", str(g), "--xattn", str(x), "--out-dir", str(out)]) == 0
    keep = KeepSet.from_json((out / "keep.json").read_text())
    assert len(keep) == 40
    capsys.readouterr()
    csv_path = tmp_path / "b.csv"
    assert main(["bias-report", str(out / "keep.json"), "--csv", str(csv_path)]) == 0
    report = json.loads(capsys.readouterr().out)
    saved = json.loads((out / "bias.json").read_text())["selection"]
    assert report["overall_share"] == saved["overall_share"]
    assert csv_path.read_text().splitlines()[1] == "frame_index,selected,boundary_selected,share"


def test_prune_rejects_swapped_files(grid_files, tmp_path, capsys):
    g, x = grid_files
    assert main(["prune", "--grid", str(x), "--xattn", str(g), "--out-dir", str(tmp_path)]) == 2
    assert "x.xat" in capsys.readouterr().err


def test_sweep_to_file(tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--axis", "alpha", "--values", "0", "0.5,1", "--method", "serial_sd",
                 "--max-new", "24", "--workers", "2", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "# specdeck-csv v1"
    assert [ln.split(",")[0] for ln in lines[3:]] == ["0.0", "0.5", "1.0"]


def test_schema_command(capsys):
    assert main(["schema"]) == 0
    assert "keep_ratio = 0.1" in capsys.readouterr().out
