import csv
import dataclasses
import json

import numpy as np
import pytest

from scenefuse import config as cfgmod
from scenefuse.attention import BlockConfig
from scenefuse.cli import BENCH_COLUMNS, main
from scenefuse.config import DataConfig, RunConfig
from scenefuse.formats import Prediction, read_predictions, read_scenes, write_predictions
from scenefuse.fusion import attention_score_count
from scenefuse.objective import TrainConfig


def small_config(tmp_path, **train):
    base = RunConfig()
    enc = dataclasses.replace(base.model.encoder, block=BlockConfig(16, 2, 32))
    cfg = dataclasses.replace(
        base,
        data=DataConfig(train_scenes=16, eval_scenes=6),
        model=dataclasses.replace(base.model, encoder=enc),
        train=TrainConfig(**{"steps": 3, "batch_size": 8, "learning_rate": 1e-3, **train}),
    )
    path = tmp_path / "cfg.json"
    cfgmod.save(cfg, path)
    return cfg, path


def test_full_command_chain(tmp_path, capsys):
    _, cfg = small_config(tmp_path)
    d = tmp_path
    assert main(["generate", "--config", str(cfg), "--out", str(d / "train.jsonl")]) == 0
    assert main(["generate", "--config", str(cfg), "--split", "eval", "--out", str(d / "eval.jsonl")]) == 0
    assert len(read_scenes(d / "eval.jsonl")) == 6
    assert main(["train", "--config", str(cfg), "--scenes", str(d / "train.jsonl"),
                 "--out", str(d / "model.npz")]) == 0
    assert (d / "model.npz.loss.csv").exists()
    assert main(["predict", "--config", str(cfg), "--scenes", str(d / "eval.jsonl"),
                 "--checkpoint", str(d / "model.npz"), "--out", str(d / "pred.jsonl")]) == 0
    preds = read_predictions(d / "pred.jsonl")
    assert len(preds) == 6 * 2 and preds[0].k == 6
    assert main(["eval", "--config", str(cfg), "--scenes", str(d / "eval.jsonl"),
                 "--predictions", str(d / "pred.jsonl"), "--out", str(d / "report.txt")]) == 0
    manifest = json.loads((d / "report.txt.manifest.json").read_text())
    assert (d / "report.txt").read_text().startswith(f"# manifest {manifest['run_id']}")
    assert (d / "report.csv").exists()
    assert main(["aggregate", "--config", str(cfg), "--predictions", str(d / "pred.jsonl"),
                 "--out", str(d / "agg.jsonl")]) == 0
    agg = read_predictions(d / "agg.jsonl")
    np.testing.assert_allclose([p.probabilities.sum() for p in agg], 1.0)
    pred_manifest = json.loads((d / "pred.jsonl.manifest.json").read_text())
    assert json.loads((d / "pred.jsonl").read_text().splitlines()[0])["manifest"] == pred_manifest["run_id"]


def test_eval_on_ground_truth_is_zero(tmp_path, capsys):
    _, cfg = small_config(tmp_path)
    scenes_path = tmp_path / "eval.jsonl"
    assert main(["generate", "--config", str(cfg), "--split", "eval", "--out", str(scenes_path)]) == 0
    preds = []
    for sc in read_scenes(scenes_path):
        for a in range(sc.num_agents):
            means = np.stack([sc.future[a]] * 6)
            preds.append(Prediction(sc.scene_id, a, np.full(6, 1 / 6), means, np.zeros_like(means)))
    write_predictions(tmp_path / "gt.jsonl", preds)
    capsys.readouterr()
    assert main(["eval", "--config", str(cfg), "--scenes", str(scenes_path),
                 "--predictions", str(tmp_path / "gt.jsonl")]) == 0
    out = dict(line.split() for line in capsys.readouterr().out.splitlines() if not line.startswith("#"))
    assert float(out["minADE"]) == float(out["minFDE"]) == 0.0
    assert float(out["MR@8"]) == 0.0


def test_bench_grid_rows(tmp_path):
    cfg, path = small_config(tmp_path)
    out = tmp_path / "bench.csv"
    code = main(["bench", "--config", str(path), "--fusions", "late", "early", "hierarchical",
                 "--regimes", "multi_axis", "--ratios", "0.25", "0.5", "1.0", "--train-steps", "0",
                 "--passes", "30", "--out", str(out)])
    assert code == 0
    lines = out.read_text().splitlines()
    assert lines[0].startswith("# manifest ")
    rows = list(csv.DictReader(lines[1:]))
    assert len(rows) == 9
    assert tuple(rows[0]) == BENCH_COLUMNS
    for r in rows:
        assert int(r["attention_scores"]) == int(r["closed_form_scores"])
        assert int(r["attention_flops"]) == 4 * cfg.model.encoder.block.hidden * int(r["attention_scores"])
        enc = dataclasses.replace(cfg.model.encoder, fusion=r["fusion"], latent_ratio=float(r["latent_ratio"]))
        shapes = {"history": (5, 1), "interactions": (5, 2), "roadgraph": (1, 24), "traffic_lights": (5, 2)}
        assert int(r["attention_scores"]) == attention_score_count(enc, shapes)


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["generate", "--bogus"],
    ["generate"],
    ["train", "--out", "x.npz"],
    ["bench", "--out", "b.csv", "--passes", "3"],
    ["bench", "--out", "b.csv", "--fusions", "mid"],
    ["bench", "--out", "b.csv", "--ratios", "2.0"],
])
def test_usage_errors_exit_2(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 2


def test_malformed_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"steps": -1}}')
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "s.jsonl")]) == 2
    assert "train" in capsys.readouterr().err


def test_missing_and_corrupt_files_exit_3(tmp_path, capsys):
    assert main(["train", "--scenes", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "m.npz")]) == 3
    junk = tmp_path / "junk.jsonl"
    junk.write_text("{oops\n")
    assert main(["train", "--scenes", str(junk), "--out", str(tmp_path / "m.npz")]) == 3
    assert "junk.jsonl:1" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_4(tmp_path, capsys):
    _, cfg = small_config(tmp_path, learning_rate=1e30)
    scenes = tmp_path / "s.jsonl"
    assert main(["generate", "--config", str(cfg), "--out", str(scenes)]) == 0
    assert main(["train", "--config", str(cfg), "--scenes", str(scenes), "--out", str(tmp_path / "m.npz")]) == 4
