import numpy as np
import pytest

from edgenat import cli
from edgenat.config import ConfigurationError
from edgenat.data import read_gray, write_pgm


def test_unknown_flag_exits_2(capsys):
    assert cli.main(["train", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err
    assert cli.main(["frobnicate"]) == 2


def test_runtime_failure_exits_1(tmp_path, capsys):
    assert cli.main(["infer", "--ckpt", str(tmp_path / "none.enat"), "--image", "x.png", "--out", "y.pgm"]) == 1
    assert "edgenat infer: error" in capsys.readouterr().err


def test_gradcheck_attn_exits_0(capsys):
    assert cli.main(["-q", "gradcheck", "--module", "attn", "--seeds", "2"]) == 0
    assert "attn: 2 seeds" in capsys.readouterr().out


def test_train_zero_steps_writes_checkpoint(tmp_path, capsys):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[model]\nhead_dim = 2\n[paths]\nsynth_n = 2\nsynth_size = 32\n")
    assert cli.main(["-q", "train", "--config", str(cfg), "--steps", "0", "--out", str(tmp_path / "run")]) == 0
    assert (tmp_path / "run" / "checkpoint.enat").exists()
    assert "steps = 0" in capsys.readouterr().out


def test_synth_infer_eval_pipeline(tmp_path, capsys):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[model]\nhead_dim = 2\n")
    run = tmp_path / "run"
    assert cli.main(["-q", "train", "--config", str(cfg), "--steps", "0", "--out", str(run)]) == 0
    assert cli.main(["-q", "synth", "--n", "2", "--size", "64", "--out", str(tmp_path / "data")]) == 0
    preds = tmp_path / "pred"
    for img in sorted((tmp_path / "data" / "images").glob("*.ppm")):
        for extra in ([], ["--multiscale"]):
            out = preds / f"{img.stem}.pgm"
            assert cli.main(["-q", "infer", "--ckpt", str(run / "checkpoint.enat"), "--image", str(img), "--out", str(out), *extra]) == 0
            assert read_gray(out).shape == (64, 64)
    capsys.readouterr()
    assert cli.main(["-q", "eval", "--pred", str(preds), "--gt", str(tmp_path / "data"), "--matcher", "exact"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("ods = ") and "ois = " in out
    table = (preds / "pr_table.csv").read_text().splitlines()
    assert table[0] == "threshold,tp,fp,fn,precision,recall,f" and len(table) == 100


def test_eval_perfect_prediction(tmp_path, capsys):
    g = np.zeros((32, 32))
    g[10, 3:29] = 1.0
    write_pgm(tmp_path / "gt" / "a.pgm", g)
    write_pgm(tmp_path / "pred" / "a.pgm", g)
    assert cli.main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt")]) == 0
    assert "ods = 1.000000" in capsys.readouterr().out


def test_eval_missing_prediction(tmp_path):
    write_pgm(tmp_path / "gt" / "a.pgm", np.zeros((4, 4)))
    (tmp_path / "pred").mkdir()
    assert cli.main(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(tmp_path / "gt")]) == 1


def test_thread_env(monkeypatch):
    monkeypatch.setenv("EDGENAT_THREADS", "3")
    assert cli.thread_count() == 3
    monkeypatch.setenv("EDGENAT_THREADS", "0")
    assert cli.thread_count() >= 1
    monkeypatch.setenv("EDGENAT_THREADS", "many")
    with pytest.raises(ConfigurationError):
        cli.thread_count()
