import json

import pytest

from ccsmppi.cli import main
from test_harness import small_config


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "small.yaml"
    path.write_text(small_config().dumps())
    return path


def test_scenarios_lists_builtins(capsys):
    assert main(["scenarios"]) == 0
    out = capsys.readouterr().out.split()
    assert "track_exp2" in out and "obstacle" in out


def test_run_writes_single_episode(cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", str(cfg_file), "--seed", "4", "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["config.yaml", "stats.json", "traj_ccsmppi_seed4.csv"]
    doc = json.loads((out / "stats.json").read_text())
    assert doc["metadata"]["base_seed"] == 4 and doc["stats"]["n_sim"] == 1
    assert "pr_fail" in capsys.readouterr().out


def test_batch_is_byte_reproducible(cfg_file, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["batch", "--config", str(cfg_file), "--controller", "tube", "--n-sim", "2",
                     "--out", str(out)]) == 0
        outs.append({p.name: p.read_bytes() for p in out.iterdir()})
    assert outs[0] == outs[1]
    assert "traj_tube_seed1.csv" in outs[0]


def test_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("bogus: 1\n")
    assert main(["run", "--config", str(bad)]) == 2
    assert "unknown keys" in capsys.readouterr().err
    assert main(["run", "--config", "no-such-scenario"]) == 2


def test_unwritable_output_exit_code(cfg_file, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["run", "--config", str(cfg_file), "--out", str(blocker / "sub")]) == 3


def test_bad_arguments_exit_nonzero():
    with pytest.raises(SystemExit) as exc:
        main(["batch", "--config", "x", "--controller", "pid"])
    assert exc.value.code == 2
