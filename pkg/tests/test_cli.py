import csv
import json

import numpy as np
import pytest

from quadgate import tensor as T
from quadgate.cli import main, read_config_file
from quadgate.data import Modality, load_dataset
from quadgate.errors import ConfigurationError


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "data"), "--n", "24", "--side", "64", "--seed", "7"]) == 0
    assert main(["synth", "--out", str(root / "small"), "--n", "4", "--side", "32", "--seed", "1"]) == 0
    ckpts = []
    for seed in (1, 2, 3):
        ck = root / f"m{seed}.ckpt"
        assert main(["train", "--data", str(root / "data"), "--epochs", "1", "--seed", str(seed),
                     "--out", str(ck)]) == 0
        ckpts.append(ck)
    return root, ckpts


def config_line(out):
    first = out.splitlines()[0]
    assert first.startswith("config ")
    return json.loads(first[len("config "):])


# --- config files ---------------------------------------------------------------


def test_config_file_parsing(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# comment line\nepochs = 3\n\nlr=0.01  # trailing comment\ninput_size = 32x32\n")
    assert read_config_file(f) == {"epochs": "3", "lr": "0.01", "input_size": "32x32"}


def test_config_file_rejects_garbage(tmp_path):
    f = tmp_path / "bad.cfg"
    f.write_text("epochs 3\n")
    with pytest.raises(ConfigurationError, match="bad.cfg:1"):
        read_config_file(f)


# --- synth ---------------------------------------------------------------------


def test_synth_writes_images_and_scores(workspace):
    root, _ = workspace
    files = sorted(p.name for p in (root / "data").iterdir())
    assert len([f for f in files if f.endswith(".pgm")]) == 24 and "scores.csv" in files


def test_synth_is_byte_reproducible(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(capsys, "synth", "--out", tmp_path / d, "--n", "5", "--side", "32", "--seed", "7")[0] == 0
    for f in (tmp_path / "a").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_synth_ge_scores_on_levels(tmp_path, capsys):
    code, out, _ = run(capsys, "synth", "--out", tmp_path, "--n", "20", "--side", "32", "--modality", "ge")
    assert code == 0 and config_line(out)["synth"]["modality"] == "ge"
    scores = [s.score for s in load_dataset(tmp_path, modality="ge")]
    assert all(0 <= s <= 8 for s in scores)
    assert np.all(np.isin(scores, Modality.GE.levels))


def test_synth_unwritable_dir(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, out, err = run(capsys, "synth", "--out", blocker / "sub", "--n", "2")
    assert code == 2 and "cannot write" in err
    assert out.startswith("config ")


# --- train ---------------------------------------------------------------------


def test_train_outputs(workspace):
    root, ckpts = workspace
    ck = ckpts[0]
    assert ck.exists()
    for suffix in (".metrics.csv", ".metrics.dat", ".history.png"):
        assert (root / f"m1{suffix}").stat().st_size > 0
    rows = list(csv.reader(open(root / "m1.metrics.csv")))
    assert rows[0] == ["epoch", "split", "mae", "pc", "ae_sd", "lr", "loss"]
    assert [r[:2] for r in rows[1:]] == [["1", "train"]]


def test_train_echoes_resolved_config(workspace, tmp_path, capsys):
    root, _ = workspace
    cfg = tmp_path / "run.cfg"
    cfg.write_text("batch_size = 12\nholdout = 4\naggregator_dim = 32\n")
    code, out, _ = run(capsys, "train", "--data", root / "data", "--config", cfg, "--epochs", "1",
                       "--aggregator", "gap", "--regions", "2", "--no-transmix", "--out", tmp_path / "g.ckpt")
    assert code == 0
    resolved = config_line(out)
    assert resolved["train"]["batch_size"] == 12 and resolved["train"]["transmix"] is False
    assert resolved["model"]["aggregator_kind"] == "gap" and resolved["model"]["num_regions"] == 2
    assert resolved["model"]["aggregator_dim"] == 32 and resolved["options"]["holdout"] == 4
    rows = list(csv.reader(open(tmp_path / "g.metrics.csv")))
    assert [r[1] for r in rows[1:]] == ["train", "test"]


def test_train_unknown_config_key(workspace, tmp_path, capsys):
    root, _ = workspace
    cfg = tmp_path / "run.cfg"
    cfg.write_text("learning_rate = 0.1\n")
    code, _, err = run(capsys, "train", "--data", root / "data", "--config", cfg, "--out", tmp_path / "x.ckpt")
    assert code == 2 and "learning_rate" in err


def test_train_bad_flag_is_usage_error(capsys):
    assert run(capsys, "train", "--regions", "5")[0] == 2


def test_train_nonfinite_loss_exit_3(workspace, tmp_path, capsys):
    root, _ = workspace
    cfg = tmp_path / "run.cfg"
    cfg.write_text("lr = 1e300\nweight_decay = 0\n")
    code, _, err = run(capsys, "train", "--data", root / "data", "--config", cfg, "--epochs", "3",
                       "--out", tmp_path / "nan.ckpt")
    assert code == 3, err
    assert "non-finite" in err
    assert (tmp_path / "nan.ckpt").exists()


# --- eval ----------------------------------------------------------------------


def test_eval_single(workspace, capsys):
    root, ckpts = workspace
    code, out, _ = run(capsys, "eval", "--ckpt", ckpts[0], "--data", root / "data")
    lines = out.splitlines()[1:]
    assert code == 0 and len(lines) == 2 and lines[0].split()[0] == "model"


def test_eval_ensemble(workspace, tmp_path, capsys):
    root, ckpts = workspace
    code, out, _ = run(capsys, "eval", "--ckpt", *ckpts, "--data", root / "data", "--out", tmp_path)
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "eval.csv")))
    assert [r["model"] for r in rows][-1] == "ensemble" and len(rows) == 4
    maes = [float(r["mae"]) for r in rows]
    assert maes[-1] <= max(maes[:-1])
    assert (tmp_path / "predictions.png").exists() and (tmp_path / "predictions.dat").exists()


def test_eval_size_mismatch(workspace, capsys):
    root, ckpts = workspace
    code, _, err = run(capsys, "eval", "--ckpt", ckpts[0], "--data", root / "small")
    assert code == 2 and "expect" in err


def test_eval_missing_checkpoint(workspace, tmp_path, capsys):
    root, _ = workspace
    assert run(capsys, "eval", "--ckpt", tmp_path / "none.ckpt", "--data", root / "data")[0] == 2


# --- gradcheck ------------------------------------------------------------------


def test_gradcheck_layers_pass_and_list_blocks_once(capsys):
    code, out, _ = run(capsys, "gradcheck", "--layers-only")
    assert code == 0
    names = [ln.split()[0] for ln in out.splitlines()[1:-1]]
    assert len(names) == len(set(names)) > 30
    assert out.splitlines()[-1].startswith("PASS")


def test_gradcheck_catches_corrupted_rule(monkeypatch, capsys):
    real = T.gelu

    def bad_gelu(x):
        out = real(x)
        rule = out._backward
        out._backward = lambda g: tuple(1.1 * r for r in rule(g))
        return out

    monkeypatch.setattr(T, "gelu", bad_gelu)
    code, out, _ = run(capsys, "gradcheck", "--layers-only")
    assert code != 0
    assert "FAIL" in out.splitlines()[-1] or any(ln.startswith("FAIL") for ln in out.splitlines())
    assert "op/gelu" in out


def test_gradcheck_bad_size(capsys):
    assert run(capsys, "gradcheck", "--size", "12")[0] == 2


# --- mixdemo --------------------------------------------------------------------


def test_mixdemo_report(workspace, tmp_path, capsys):
    root, ckpts = workspace
    args = ("mixdemo", "--data", root / "data", "--ckpt", ckpts[0], "--pairs", "6", "--seed", "3")
    code, _, _ = run(capsys, *args, "--out", tmp_path / "a")
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "a" / "mixdemo.csv")))
    assert len(rows) == 6
    for r in rows:
        lam, ya, yb, ybar = (float(r[k]) for k in ("lambda", "yA", "yB", "ybar"))
        assert 0.0 <= lam <= 1.0
        assert abs(ybar - (lam * yb + (1 - lam) * ya)) <= 1e-12
    assert len(list((tmp_path / "a").glob("mix*.pgm"))) == 6
    run(capsys, *args, "--out", tmp_path / "b")
    assert (tmp_path / "a" / "mixdemo.csv").read_bytes() == (tmp_path / "b" / "mixdemo.csv").read_bytes()


# --- environment ------------------------------------------------------------------


def test_thread_env_validated(monkeypatch, capsys):
    monkeypatch.setenv("QUADGATE_THREADS", "many")
    assert run(capsys, "gradcheck", "--layers-only")[0] == 2


def test_thread_env_accepted(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("QUADGATE_THREADS", "1")
    assert run(capsys, "synth", "--out", tmp_path, "--n", "2", "--side", "16")[0] == 0
