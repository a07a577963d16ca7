import json

import numpy as np
import pytest
import torch

from vqprior_ad.cli import counterfactual_windows, main
from vqprior_ad.config import PriorConfig, RunConfig, SamplingConfig, TokenizerConfig, TrainConfig
from vqprior_ad.data import SyntheticSpec, write_manifest


def tiny_config(tmp_path, **train):
    t = dict(batch_size=32, stage1_epochs=2, stage2_epochs=3, max_train_windows=60, wall_clock_hours=1.0)
    t.update(train)
    return RunConfig(
        data_dir=str(tmp_path / "data"),
        period_csv=str(tmp_path / "data" / "periods.csv"),
        out_dir=str(tmp_path / "runs"),
        checkpoint_dir=str(tmp_path / "ckpt"),
        manifest=str(tmp_path / "manifest.txt"),
        tokenizer=TokenizerConfig(latent_dim=8, codebook_size=8, latent_width=8, hidden_channels=8),
        prior=PriorConfig(n_layers=1, width=16, n_heads=2, dropout=0.0),
        train=TrainConfig(**t),
        sampling=SamplingConfig(steps=4),
    )


@pytest.fixture
def workspace(tmp_path):
    specs = [
        SyntheticSpec("tiny-spike", "spike", frequencies=(1 / 20,), length=400, train_end=200,
                      anomaly_begin=300, anomaly_end=300, magnitude=6.0, seed=1, period=20),
        SyntheticSpec("tiny-shift", "level-shift", frequencies=(1 / 20,), length=400, train_end=200,
                      anomaly_begin=280, anomaly_end=290, magnitude=2.0, seed=2, period=20),
    ]
    write_manifest(specs, tmp_path / "manifest.txt")
    cfg = tiny_config(tmp_path)
    cfg.save(tmp_path / "cfg.json")
    return tmp_path


def run(ws, *argv):
    return main([*argv, "--config", str(ws / "cfg.json")])


def test_train_score_counterfactual_evaluate(workspace):
    ws = workspace
    assert run(ws, "train", "--dataset", "synthetic") == 0
    for name in ("tiny-spike", "tiny-shift"):
        assert (ws / "ckpt" / f"{name}.pt").exists()
        d = ws / "runs" / name
        for f in ("stage1_loss.csv", "stage2_loss.csv", "config.json", "run.json"):
            assert (d / f).exists(), f
        lines = (d / "stage1_loss.csv").read_text().splitlines()
        assert lines[0] == "epoch,train_loss,holdout_loss" and len(lines) == 1 + 3
        assert len(json.loads((d / "run.json").read_text())["checkpoint_sha256"]) == 64

    assert run(ws, "score", "--dataset", "synthetic") == 0
    first = (ws / "runs" / "tiny-spike" / "scores.csv").read_bytes()
    assert first.startswith(b"timestep,a_final,abar,abarbar,band_0,band_1,band_2\n")
    assert run(ws, "score", "--dataset", "tiny-spike") == 0
    assert (ws / "runs" / "tiny-spike" / "scores.csv").read_bytes() == first

    assert run(ws, "counterfactual", "--dataset", "tiny-spike", "--quantile", "0.9") == 0
    d = ws / "runs" / "tiny-spike"
    cf = (d / "counterfactual.csv").read_bytes()
    assert cf.startswith(b"origin_t,timestep,x_original,x_counterfactual,flagged\n")
    assert (d / "figure.png").exists() and (d / "threshold.json").exists()
    png = (d / "figure.png").read_bytes()
    assert run(ws, "counterfactual", "--dataset", "tiny-spike", "--quantile", "0.9") == 0
    assert (d / "counterfactual.csv").read_bytes() == cf
    assert (d / "figure.png").read_bytes() == png

    assert run(ws, "plot", "--dataset", "tiny-spike") == 0
    assert run(ws, "evaluate") == 0
    summary = (ws / "runs" / "summary.csv").read_text().splitlines()
    assert summary[0] == "dataset,top1,top3,top5,pred1,pred2,pred3,pred4,pred5,runtime_s"
    assert [row.split(",")[0] for row in summary[1:]] == ["tiny-shift", "tiny-spike"]


def test_no_exceedance_counterfactual(workspace, capsys):
    ws = workspace
    assert run(ws, "train", "--dataset", "tiny-shift") == 0
    # whether anything exceeds a near-maximal train quantile depends on the model; check both outcomes
    assert run(ws, "counterfactual", "--dataset", "tiny-shift", "--quantile", "0.999999") == 0
    d = ws / "runs" / "tiny-shift"
    rows = (d / "counterfactual.csv").read_text().splitlines()
    thr = json.loads((d / "threshold.json").read_text())["value"]
    scores = np.loadtxt(d / "scores.csv", delimiter=",", skiprows=1)
    if (scores[:, 1] > thr).any():
        assert len(rows) > 1
    else:
        assert len(rows) == 1
        assert "no counterfactual" in capsys.readouterr().err


def test_counterfactual_window_placement():
    flags = np.zeros(100, dtype=bool)
    flags[50:53] = True
    flags[55] = True  # inside the first window, not a new one
    flags[95:] = True
    assert counterfactual_windows(flags, 1000, 20) == [1000 + 41, 1000 + 80]


def test_unknown_dataset_lists_names(workspace, capsys):
    assert run(workspace, "score", "--dataset", "nope") == 2
    err = capsys.readouterr().err
    assert "tiny-spike" in err and "tiny-shift" in err


def test_missing_period_fails_before_training(tmp_path, capsys):
    data = tmp_path / "data"
    data.mkdir()
    (data / "001_UCR_Anomaly_orphan_100_150_160.txt").write_text("\n".join(str(np.sin(i / 4)) for i in range(300)))
    (data / "periods.csv").write_text("name,period\nother,10\n")
    cfg = tiny_config(tmp_path)
    cfg.manifest = None
    cfg.save(tmp_path / "cfg.json")
    assert main(["train", "--dataset", "all", "--config", str(tmp_path / "cfg.json")]) == 2
    assert not (tmp_path / "ckpt").exists()
    assert "orphan" in capsys.readouterr().err


def test_bad_config(tmp_path):
    (tmp_path / "bad.json").write_text(json.dumps({"tokenizer": {"colour": 1}}))
    assert main(["train", "--config", str(tmp_path / "bad.json")]) == 2
    assert main(["score", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["score", "--stride-rate", "2.0"]) == 2


def test_wall_clock_then_resume(tmp_path):
    specs = [SyntheticSpec("tiny", "spike", frequencies=(1 / 20,), length=400, train_end=200,
                           anomaly_begin=300, anomaly_end=300, seed=1, period=20)]
    write_manifest(specs, tmp_path / "manifest.txt")
    capped = tiny_config(tmp_path, wall_clock_hours=1e-9, stage1_epochs=3)
    capped.save(tmp_path / "capped.json")
    argv = ["train", "--dataset", "tiny", "--config", str(tmp_path / "capped.json")]
    assert main(argv) == 5
    bundle = torch.load(tmp_path / "ckpt" / "tiny.pt", weights_only=True)
    assert bundle["prior"] is None and bundle["resume"]["stage1"]["log"]["epochs_done"] == 1
    # scoring a partial checkpoint is a config error
    assert main(["score", "--dataset", "tiny", "--config", str(tmp_path / "capped.json")]) == 2

    full = tiny_config(tmp_path, stage1_epochs=3)
    full.save(tmp_path / "full.json")
    assert main(["train", "--dataset", "tiny", "--resume", "--config", str(tmp_path / "full.json")]) == 0
    resumed = torch.load(tmp_path / "ckpt" / "tiny.pt", weights_only=True)
    assert resumed["stage1_log"]["epochs_done"] == 3 and resumed["prior"] is not None

    # the same schedule without interruption reaches identical weights
    fresh = tiny_config(tmp_path / "fresh", stage1_epochs=3)
    fresh.manifest = str(tmp_path / "manifest.txt")
    fresh.save(tmp_path / "fresh.json")
    assert main(["train", "--dataset", "tiny", "--config", str(tmp_path / "fresh.json")]) == 0
    ref = torch.load(tmp_path / "fresh" / "ckpt" / "tiny.pt", weights_only=True)
    for k, v in ref["tokenizer"].items():
        assert torch.equal(v, resumed["tokenizer"][k]), k


def test_checkpoint_version_mismatch(workspace, capsys):
    ws = workspace
    assert run(ws, "train", "--dataset", "tiny-spike") == 0
    path = ws / "ckpt" / "tiny-spike.pt"
    bundle = torch.load(path, weights_only=True)
    bundle["format_version"] = 99
    torch.save(bundle, path)
    assert run(ws, "score", "--dataset", "tiny-spike") == 2
    assert "format version" in capsys.readouterr().err


def write_scores(directory, name, scores, offset):
    d = directory / name
    d.mkdir(parents=True)
    with open(d / "scores.csv", "w") as fh:
        fh.write("timestep,a_final,abar,abarbar,band_0\n")
        for i, v in enumerate(scores):
            fh.write(f"{offset + i},{v},{v},{v},{v}\n")


def test_evaluate_planted_argmaxes(tmp_path, capsys):
    runs = tmp_path / "runs"
    for name, peak in [("a", 500), ("b", 100), ("c", 880)]:
        s = np.zeros(1000)
        s[peak] = 5.0
        write_scores(runs, name, s, 1000)
    labels = tmp_path / "labels.csv"
    # hits: a at 1500 within [1550, 1560] - 100; b at 1100 outside [1300, 1310]; c at 1880 == 1780 + 100
    labels.write_text("dataset,anomaly_begin,anomaly_end\na,1550,1560\nb,1300,1310\nc,1700,1780\n")
    assert main(["evaluate", "--out", str(runs), "--labels", str(labels)]) == 0
    rows = [r.split(",") for r in (runs / "summary.csv").read_text().splitlines()[1:]]
    assert [(r[0], r[1]) for r in rows] == [("a", "1"), ("b", "0"), ("c", "1")]

    labels.write_text("dataset,anomaly_begin,anomaly_end\na,1550,1560\n")
    assert main(["evaluate", "--out", str(runs), "--labels", str(labels)]) == 3
    err = capsys.readouterr().err
    assert "b" in err and "c" in err

    assert main(["evaluate", "--out", str(tmp_path / "empty"), "--labels", str(labels)]) == 3


def test_synth_then_archive_load(tmp_path):
    data = tmp_path / "d"
    assert main(["synth", "--data-dir", str(data), "--periods", str(data / "periods.csv"), "--n-series", "4"]) == 0
    files = sorted(p.name for p in data.glob("*.txt") if p.name != "manifest.txt")
    assert len(files) == 4 and all("_UCR_Anomaly_synth-" in f for f in files)
    assert (data / "periods.csv").read_text().startswith("name,period\n")
    assert (data / "manifest.txt").exists()
