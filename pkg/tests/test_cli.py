import json

import pytest

from phasegate.cli import main

SMALL_CONFIG = {
    "training": {"batch_size": 20, "offline_epochs": 1, "steps_per_update_batch": 1},
    "network": {"conv_channels": [2], "shared_sizes": [8], "branch_sizes": [4]},
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return path


def test_train_baseline_report_compare(tmp_path, config, capsys):
    rl, fx = tmp_path / "rl", tmp_path / "fx"
    common = ["--scenario", "imbalanced", "--seed", "2", "--hours", "0.4", "--offline-hours", "0.2"]
    assert main(["train", *common, "--config", str(config), "--out", str(rl)]) == 0
    assert main(["baseline", *common, "--out", str(fx)]) == 0
    for d in (rl, fx):
        assert (d / "metrics.csv").read_text().startswith("hour,wait_s,travel_s,queue,reward\n")
        assert (d / "summary.txt").exists()
    assert (rl / "steps.csv").exists() and (rl / "checkpoints").is_dir()
    capsys.readouterr()

    assert main(["report", "--run", str(rl)]) == 0
    assert "controller: rl" in capsys.readouterr().out

    assert main(["compare", "--rl", str(rl), "--fixed", str(fx), "--csv", str(tmp_path / "c.csv")]) == 0
    out = capsys.readouterr().out
    assert "wait_s" in out and "%" in out
    assert (tmp_path / "c.csv").read_text().startswith("metric,fixed,rl,percent_change")


def test_custom_plan(tmp_path, capsys):
    assert main(["baseline", "--scenario", "balanced", "--hours", "0.2", "--offline-hours", "0",
                 "--plan", "10/10", "--out", str(tmp_path / "b")]) == 0


def test_compare_horizon_mismatch(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["baseline", "--scenario", "balanced", "--hours", "0.2", "--offline-hours", "0", "--out", str(a)])
    main(["baseline", "--scenario", "balanced", "--hours", "0.3", "--offline-hours", "0", "--out", str(b)])
    assert main(["compare", "--rl", str(a), "--fixed", str(b)]) == 2
    assert "error" in capsys.readouterr().err


def test_unknown_scenario(tmp_path, capsys):
    assert main(["baseline", "--scenario", "nope", "--out", str(tmp_path)]) == 2


def test_missing_subcommand():
    with pytest.raises(SystemExit):
        main([])
