import csv
import io

import numpy as np
import pytest

from metapi.agent import Agent, save_checkpoint
from metapi.ppo import scaled_config
from metapi.cli import main


@pytest.fixture(scope="module")
def smoke_ckpt(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert main(["train", "--preset", "smoke", "--override", "epochs=2", "--override", "checkpoint_every=1",
                 "--out", str(out)]) == 0
    return out / "checkpoints" / "epoch_00002.bin"


def rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_train_writes_snapshot_and_log(smoke_ckpt):
    run = smoke_ckpt.parent.parent
    assert (run / "config.cfg").exists() and (run / "train_log.csv").exists()
    assert len(rows(run / "train_log.csv")) == 3


def test_train_deterministic_for_fixed_seed(tmp_path):
    args = ["train", "--preset", "smoke", "--override", "epochs=2", "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "checkpoints" / "epoch_00002.bin").read_bytes()
    assert a == (tmp_path / "b" / "checkpoints" / "epoch_00002.bin").read_bytes()


def test_config_file_run_and_snapshot_reproduces(tmp_path):
    cfg = tmp_path / "s.cfg"
    cfg.write_text("preset = smoke\nepochs = 1\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    snap = tmp_path / "a" / "config.cfg"
    assert main(["train", "--config", str(snap), "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a/checkpoints/epoch_00001.bin").read_bytes() == (tmp_path / "b/checkpoints/epoch_00001.bin").read_bytes()


def test_output_dirs_are_create_only(smoke_ckpt, capsys):
    run = smoke_ckpt.parent.parent
    assert main(["train", "--preset", "smoke", "--out", str(run)]) == 2
    assert "already exists" in capsys.readouterr().err


def test_missing_config_file(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "gone.cfg")]) == 2
    assert "gone.cfg" in capsys.readouterr().err


def test_unknown_key(tmp_path, capsys):
    assert main(["train", "--preset", "smoke", "--override", "epoch=3", "--out", str(tmp_path / "x")]) == 2
    assert "epoch" in capsys.readouterr().err


def test_env_var_sets_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("METAPI_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["train", "--preset", "smoke", "--override", "epochs=1"]) == 0
    assert len(list((tmp_path / "root").glob("train-*/checkpoints/*.bin"))) == 1


def test_unknown_experiment_lists_names(smoke_ckpt, tmp_path, capsys):
    assert main(["eval", "histogram", "--checkpoint", str(smoke_ckpt), "--out", str(tmp_path / "e")]) == 2
    err = capsys.readouterr().err
    assert "heatmap" in err and "trajectory" in err


def test_version_mismatch(tmp_path, capsys):
    p = tmp_path / "old.bin"
    save_checkpoint(p, Agent(hidden=4), {"version": 0})
    assert main(["eval", "heatmap", "--checkpoint", str(p), "--out", str(tmp_path / "e")]) == 2
    assert "version" in capsys.readouterr().err


def test_eval_heatmap_shape(smoke_ckpt, tmp_path):
    out = tmp_path / "e"
    assert main(["eval", "heatmap", "--checkpoint", str(smoke_ckpt), "--slice", "K=0.5", "--scale", "full",
                 "--out", str(out)]) == 0
    r = rows(out / "heatmap" / "K=0.5" / "asymptotic_mse.csv")
    assert r[0] == ["tau", "theta", "asymptotic_mse", "converged"]
    assert len(r) == 1 + 16 * 16


def test_eval_trajectory(smoke_ckpt, tmp_path):
    out = tmp_path / "e"
    assert main(["eval", "trajectory", "--checkpoint", str(smoke_ckpt), "--K", "0.5", "--tau", "1.0",
                 "--theta", "0.2", "--out", str(out)]) == 0
    r = rows(out / "trajectory" / "K=0.5,tau=1,theta=0.2" / "step_comparison.csv")
    assert r[0][:4] == ["t", "setpoint", "y_desired", "y_agent"] and len(r) == 221


def test_eval_convergence_single_task(smoke_ckpt, tmp_path):
    out = tmp_path / "c"
    assert main(["eval", "convergence", "--checkpoint", str(smoke_ckpt), "--K", "0.5", "--tau", "0.3",
                 "--theta", "0.06", "--out", str(out)]) == 0
    rows = (out / "convergence/task/convergence_time.csv").read_text().splitlines()
    assert rows[0] == "K,tau,theta,time,converged" and len(rows) == 2


def test_eval_convergence_skips_empty_slice(tmp_path, capsys):
    p = tmp_path / "narrow.bin"
    save_checkpoint(p, Agent(hidden=4), {"config": scaled_config(hidden=4).to_dict()})
    assert main(["eval", "convergence", "--checkpoint", str(p), "--n", "2", "--out", str(tmp_path / "d")]) == 0
    assert "skipped" in capsys.readouterr().err
    assert (tmp_path / "d/convergence/K=0.5/convergence_time.csv").is_file()


def test_eval_tank_noise(smoke_ckpt, tmp_path):
    out = tmp_path / "e"
    assert main(["eval", "tank", "--checkpoint", str(smoke_ckpt), "--noise", "1cm", "--out", str(out)]) == 0
    base = out / "tank" / "noise=1cm"
    assert (base / "levels_tuned.csv").exists() and (base / "gains.csv").exists()


def test_tune_empty_stream(smoke_ckpt, tmp_path, capsys):
    src = tmp_path / "empty.csv"
    src.write_text("")
    assert main(["tune", "--checkpoint", str(smoke_ckpt), "--input", str(src)]) == 0
    assert capsys.readouterr().out == ""


def test_tune_emits_records(smoke_ckpt, tmp_path, capsys):
    src = tmp_path / "s.csv"
    src.write_text("t,setpoint,measurement\n" + "".join(f"{0.05 * k!r},1.0,0.0\n" for k in range(120)))
    assert main(["tune", "--checkpoint", str(smoke_ckpt), "--input", str(src)]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3
    assert all(len(l.split(",")) == 3 for l in lines)
