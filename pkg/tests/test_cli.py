import hashlib
import json
import os

import pytest

from radcamfuse.cli import main

TINY = ["--set", "preset=\"desk\"", "--set", "stage2.U=2", "--set", "stage2.samples=8", "--set", "stage2.c_b=16",
        "--set", "stage2.hidden=16", "--set", "cmda.heads=2", "--set", "cmda.points=2", "--set",
        "stage2.attn_heads=2", "--set", "optim.epochs=1", "--set", "optim.batch_size=2", "--set",
        "train.eval_every=0"]


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def datagen(out, n, seed=0):
    return main(["datagen", "--seed", str(seed), "--out", str(out), "--set", f"data.n_scenes={n}"])


def test_datagen_deterministic_per_seed(tmp_path, capsys):
    assert datagen(tmp_path / "a", 4) == 0
    assert datagen(tmp_path / "b", 4) == 0
    assert datagen(tmp_path / "c", 4, seed=1) == 0
    assert digest(tmp_path / "a" / "dataset.json") == digest(tmp_path / "b" / "dataset.json")
    assert digest(tmp_path / "a" / "dataset.json") != digest(tmp_path / "c" / "dataset.json")
    assert "wrote 4 frames" in capsys.readouterr().out


def test_datagen_zero_scenes_gives_empty_manifest(tmp_path):
    assert datagen(tmp_path, 0) == 0
    assert json.loads((tmp_path / "dataset.json").read_text())["frames"] == []


def test_datagen_split_ratio(tmp_path):
    assert main(["datagen", "--out", str(tmp_path), "--set", "data.n_scenes=10", "--set",
                 "data.val_fraction=0.3"]) == 0
    frames = json.loads((tmp_path / "dataset.json").read_text())["frames"]
    assert sum(f["split"] == "val" for f in frames) == 3


def test_gradcheck_table_passes(capsys):
    assert main(["gradcheck", "--select", "conv2d", "losses"]) == 0
    out = capsys.readouterr().out
    assert "2/2 passed" in out and "FAIL" not in out


def test_gradcheck_corrupted_backward_reports_failure(capsys):
    assert main(["gradcheck", "--select", "rgiter", "--corrupt"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_gradcheck_empty_selection_is_an_error(capsys):
    assert main(["gradcheck", "--select", "no_such_check"]) == 2
    assert "no gradient checks match" in capsys.readouterr().err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    assert main(["datagen", "--out", str(tmp_path), "--set", "data.n_scene=3"]) == 2
    assert "data.n_scene" in capsys.readouterr().err


def test_train_without_dataset_exits_2(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "run")]) == 2
    assert "datagen" in capsys.readouterr().err


def test_train_eval_infer_round_trip(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["datagen", "--out", str(data), "--set", "data.n_scenes=3", "--set", "data.val_fraction=0.34",
                 *TINY]) == 0
    run = tmp_path / "run"
    assert main(["train", "--data", str(data), "--out", str(run), *TINY]) == 0
    assert (run / "run.json").exists() and (run / "train_log.csv").exists()
    assert main(["eval", "--checkpoint", str(run), "--data", str(data), "--out", str(tmp_path / "ev"),
                 "--region", "corridor"]) == 0
    assert (tmp_path / "ev" / "eval_corridor.csv").exists()
    assert any(p.suffix == ".svg" for p in (tmp_path / "ev").iterdir())
    assert main(["infer", "--checkpoint", str(run / "checkpoints" / "latest.cvfk"), "--data", str(data),
                 "--out", str(tmp_path / "inf")]) == 0
    assert len(list((tmp_path / "inf").glob("*.txt"))) == 3
    assert "corridor: mAP_3d" in capsys.readouterr().out


def test_thread_cap_sets_library_env(monkeypatch, tmp_path):
    for var in ("OMP_NUM_THREADS", "NUMBA_NUM_THREADS"):
        monkeypatch.delenv(var, raising=False)
    monkeypatch.setenv("CVFK_THREADS", "1")
    assert datagen(tmp_path, 0) == 0
    assert os.environ["OMP_NUM_THREADS"] == "1" and os.environ["NUMBA_NUM_THREADS"] == "1"


def test_missing_command_is_a_usage_error():
    with pytest.raises(SystemExit):
        main([])
