import json

import numpy as np
import pytest
import torch
import yaml

from stereo_selftrain import cli, experiment, training
from stereo_selftrain.data import load_manifest, write_manifest
from stereo_selftrain.experiment import analyze_sample
from stereo_selftrain.metrics import ablation_report, consistency_error_correlation, read_eval_report
from stereo_selftrain.model import ModelConfig, load_checkpoint, read_checkpoint, save_checkpoint, init_parameters
from stereo_selftrain.training import SelfTrainConfig, read_metrics_log

TINY = {
    "seed": 0,
    "model": {"feature_channels": 8, "hidden_channels": 8, "context_channels": 8,
              "max_disparity": 8, "n_iters": 2},
    "train": {"steps_pretrain": 3, "steps_selftrain": 4, "batch_size": 2, "ema_interval": 2},
    "data": {
        "source": {"domain": "A", "height": 16, "width": 32, "disparity_range": [0, 6]},
        "target": {"domain": "B", "height": 16, "width": 32, "disparity_range": [0, 6]},
        "n_labeled": 4, "n_unlabeled": 4, "n_eval": 2,
    },
}


def write_config(path, **changes):
    doc = json.loads(json.dumps(TINY))
    for key, value in changes.items():
        node = doc
        *head, last = key.split(".")
        for k in head:
            node = node.setdefault(k, {})
        node[last] = value
    path.write_text(yaml.safe_dump(doc))
    return str(path)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny dataset plus a pretrained checkpoint shared by the tests below."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "tiny.yaml")
    assert cli.main(["gen-data", "--config", cfg, "--out", str(root / "data")]) == 0
    manifest = str(root / "data" / "manifest.yaml")
    assert cli.main(["pretrain", "--config", cfg, "--out", str(root / "pre"), "--manifest", manifest]) == 0
    return {"root": root, "config": cfg, "manifest": manifest, "checkpoint": str(root / "pre" / "model.pt")}


def run(*args):
    return cli.main([str(a) for a in args])


def test_pretrain_writes_checkpoint_and_config_echo(workspace):
    pre = workspace["root"] / "pre"
    assert (pre / "model.pt").exists()
    assert (pre / "metrics.log").exists()
    assert (pre / "loss_pretrain.png").exists()
    assert (pre / "config.input.yaml").read_text() == open(workspace["config"]).read()
    resolved = yaml.safe_load((pre / "config.resolved.yaml").read_text())
    assert resolved["manifest"] == workspace["manifest"]
    assert resolved["train"]["ema_lambda"] == 0.99


def test_missing_manifest_exit_2(workspace, tmp_path, capsys):
    code = run("pretrain", "--config", workspace["config"], "--out", tmp_path, "--manifest", tmp_path / "nope.yaml")
    assert code == 2
    assert "manifest not found" in capsys.readouterr().err


def test_config_errors_exit_2(workspace, tmp_path, capsys):
    assert run("pretrain", "--config", tmp_path / "absent.yaml", "--out", tmp_path) == 2
    assert run("pretrain", "--config", workspace["config"], "--out", tmp_path,
               "--manifest", workspace["manifest"], "--set", "train.bogus=1") == 2
    assert run("selftrain", "--config", workspace["config"], "--out", tmp_path,
               "--manifest", workspace["manifest"]) == 2
    assert "checkpoint" in capsys.readouterr().err


def test_runtime_error_exit_3(workspace, tmp_path, capsys):
    manifest = load_manifest(workspace["manifest"])
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"not a png")
    entry = {"left": str(bad), "right": str(manifest.eval[0].right), "gt": str(manifest.eval[0].gt)}
    write_manifest(tmp_path / "m.yaml", eval=[entry])
    code = run("eval", "--config", workspace["config"], "--out", tmp_path / "o", "--manifest", tmp_path / "m.yaml",
               "--gt-as-pred")
    assert code == 3
    assert "unreadable image" in capsys.readouterr().err


def test_pretrain_seed_determinism(workspace, tmp_path):
    finals = []
    for i in range(2):
        out = tmp_path / f"r{i}"
        assert run("pretrain", "--config", workspace["config"], "--out", out,
                   "--manifest", workspace["manifest"], "--seed", 5) == 0
        finals.append([line for line in (out / "metrics.log").read_text().splitlines() if "final_loss" in line])
    assert finals[0] == finals[1] and len(finals[0]) == 1


def test_selftrain_structure_mismatch(workspace, tmp_path, capsys):
    other = init_parameters(ModelConfig(feature_channels=16, hidden_channels=8, context_channels=8,
                                        max_disparity=8, n_iters=2), 0)
    save_checkpoint(tmp_path / "wrong.pt", other)
    code = run("selftrain", "--config", workspace["config"], "--out", tmp_path / "o",
               "--manifest", workspace["manifest"], "--checkpoint", tmp_path / "wrong.pt")
    assert code == 2
    assert "shape" in capsys.readouterr().err


def test_selftrain_zero_steps_keeps_weights(workspace, tmp_path):
    cfg = write_config(tmp_path / "c.yaml", **{"train.steps_selftrain": 0})
    assert run("selftrain", "--config", cfg, "--out", tmp_path / "o", "--manifest", workspace["manifest"],
               "--checkpoint", workspace["checkpoint"]) == 0
    before = read_checkpoint(workspace["checkpoint"])["state_dict"]
    after = read_checkpoint(tmp_path / "o" / "student.pt")["state_dict"]
    assert before.keys() == after.keys()
    for name in before:
        assert torch.equal(before[name], after[name]), name


@pytest.mark.parametrize("steps, interval", [(4, 2), (5, 2), (6, 3), (3, 1)])
def test_selftrain_ema_event_per_interval(workspace, tmp_path, steps, interval):
    cfg = write_config(tmp_path / "c.yaml", **{"train.steps_selftrain": steps, "train.ema_interval": interval})
    assert run("selftrain", "--config", cfg, "--out", tmp_path / "o", "--manifest", workspace["manifest"],
               "--checkpoint", workspace["checkpoint"]) == 0
    records = read_metrics_log(tmp_path / "o" / "metrics.log")
    ema_steps = [r["step"] for r in records if r.get("event") == "ema"]
    assert ema_steps == list(range(interval, steps + 1, interval))
    steps_logged = [r for r in records if r.get("phase") == "selftrain"]
    assert [r["step"] for r in steps_logged] == list(range(1, steps + 1))
    assert {"loss", "w_mean", "lr"} <= set(steps_logged[0])
    payload = read_checkpoint(tmp_path / "o" / "student.pt")
    assert payload["train_state"]["k"] == steps
    assert {"teacher", "student", "optimizer"} <= set(payload["train_state"])


def test_selftrain_logs_deterministic(workspace, tmp_path):
    logs = []
    for i in range(2):
        out = tmp_path / f"r{i}"
        assert run("selftrain", "--config", workspace["config"], "--out", out, "--manifest", workspace["manifest"],
                   "--checkpoint", workspace["checkpoint"], "--seed", 3) == 0
        logs.append((out / "metrics.log").read_text())
    assert logs[0] == logs[1]


def test_eval_gt_as_pred_is_zero(workspace, tmp_path, capsys):
    assert run("eval", "--config", workspace["config"], "--out", tmp_path, "--manifest", workspace["manifest"],
               "--gt-as-pred") == 0
    report = read_eval_report(tmp_path / "report.json")
    assert report.epe == 0.0 and report.d1 == 0.0
    assert "epe" in capsys.readouterr().out
    table = ablation_report([("oracle", report)])
    assert table["rows"][0]["epe"] == 0.0


def test_eval_sparse_kitti_counts_valid_pixels_only(tmp_path):
    cfg = write_config(tmp_path / "c.yaml", **{"data.gt_format": "kitti-png"})
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "data") == 0
    manifest = tmp_path / "data" / "manifest.yaml"
    samples = load_manifest(manifest).load("eval")
    n_valid = sum(int(s.validity.sum()) for s in samples)
    assert n_valid < sum(s.validity.size for s in samples)
    assert run("eval", "--config", cfg, "--out", tmp_path / "o", "--manifest", manifest, "--gt-as-pred") == 0
    report = read_eval_report(tmp_path / "o" / "report.json")
    assert report.n_valid == n_valid
    assert report.epe == 0.0


def test_eval_checkpoint_matches_library(workspace, tmp_path):
    assert run("eval", "--config", workspace["config"], "--out", tmp_path, "--manifest", workspace["manifest"],
               "--checkpoint", workspace["checkpoint"]) == 0
    model, _ = load_checkpoint(workspace["checkpoint"])
    expected = training.evaluate_model(model, load_manifest(workspace["manifest"]).load("eval"))
    assert read_eval_report(tmp_path / "report.json").epe == pytest.approx(expected.epe, abs=1e-6)


def test_analyze_with_gt(workspace, tmp_path):
    assert run("analyze", "--config", workspace["config"], "--out", tmp_path, "--manifest", workspace["manifest"],
               "--checkpoint", workspace["checkpoint"]) == 0
    result = json.loads((tmp_path / "correlations.json").read_text())
    samples = load_manifest(workspace["manifest"]).load("eval")
    assert len(result["samples"]) == len(samples)
    assert result["warnings"] == 0
    model, _ = load_checkpoint(workspace["checkpoint"])
    cfg = SelfTrainConfig()
    for sample, rec in zip(samples, result["samples"]):
        for kind in ("sigma", "delta", "weight"):
            assert (tmp_path / "figures" / f"{sample.id}_{kind}.png").exists()
        a = analyze_sample(model, sample, cfg)
        expected = consistency_error_correlation(a.delta, a.error, sample.validity)
        assert rec["rho_delta"] == pytest.approx(expected, abs=1e-9)


def test_analyze_without_gt(workspace, tmp_path, capsys):
    manifest = load_manifest(workspace["manifest"])
    entries = [{"left": str(r.left), "right": str(r.right)} for r in manifest.eval]
    write_manifest(tmp_path / "m.yaml", eval=entries)
    assert run("analyze", "--config", workspace["config"], "--out", tmp_path / "o", "--manifest", tmp_path / "m.yaml",
               "--checkpoint", workspace["checkpoint"]) == 0
    result = json.loads((tmp_path / "o" / "correlations.json").read_text())
    assert result["samples"] == []
    assert result["warnings"] == len(entries) > 0
    assert not list((tmp_path / "o" / "figures").glob("*.png"))


def test_ablate_single_cell(workspace, tmp_path, capsys):
    assert run("ablate", "--config", workspace["config"], "--out", tmp_path, "--set", "ablate.seeds=[0]",
               "--set", "ablate.cells=[baseline]") == 0
    rows = (tmp_path / "table_filter.tsv").read_text().splitlines()
    assert len(rows) == 2 and rows[1].startswith("baseline")
    assert "filter ablation" in capsys.readouterr().out


def test_ablate_medians_over_three_seeds(workspace, tmp_path):
    assert run("ablate", "--config", workspace["config"], "--out", tmp_path, "--set", "ablate.seeds=[0,1,2]",
               "--set", "ablate.cells=[baseline,full]") == 0
    result = json.loads((tmp_path / "ablation.json").read_text())
    for row in result["tables"]["filter"]:
        assert row["n"] == 3
        assert row["epe"] == pytest.approx(float(np.median(row["epe_all"])))
    assert (tmp_path / "ablation_filter.png").exists()


def test_ablate_cells_share_data_order(workspace, tmp_path, monkeypatch):
    seen = {}
    original = training.SelfTrainer.step

    def spy(self, indices):
        seen.setdefault(self.config.csf.mode, []).append(list(map(int, indices)))
        return original(self, indices)

    monkeypatch.setattr(training.SelfTrainer, "step", spy)
    assert run("ablate", "--config", workspace["config"], "--out", tmp_path, "--set", "ablate.seeds=[0]",
               "--set", "ablate.cells=[st,st_hard,full]") == 0
    assert seen["none"] == seen["hard"] == seen["soft"]
    assert len(seen["soft"]) == TINY["train"]["steps_selftrain"]


def test_ablate_failures_recorded_per_cell(workspace, tmp_path, monkeypatch):
    original = experiment.run_selftraining

    def flaky(unlabeled, model, cfg, log=None):
        if cfg.csf.mode == "hard":
            raise FloatingPointError("injected")
        return original(unlabeled, model, cfg, log)

    monkeypatch.setattr(experiment, "run_selftraining", flaky)
    assert run("ablate", "--config", workspace["config"], "--out", tmp_path, "--set", "ablate.seeds=[0]",
               "--set", "ablate.cells=[st_hard,full]") == 0
    cells = (tmp_path / "cells.tsv").read_text()
    assert "injected" in cells

    def broken(*args, **kwargs):
        raise FloatingPointError("injected")

    monkeypatch.setattr(experiment, "run_selftraining", broken)
    assert run("ablate", "--config", workspace["config"], "--out", tmp_path / "b", "--set", "ablate.seeds=[0]",
               "--set", "ablate.cells=[st_hard,full]") == 3


def test_inputs_not_mutated(workspace, tmp_path):
    before = {p: p.read_bytes() for p in (workspace["root"] / "data").rglob("*") if p.is_file()}
    ckpt = open(workspace["checkpoint"], "rb").read()
    assert run("selftrain", "--config", workspace["config"], "--out", tmp_path, "--manifest", workspace["manifest"],
               "--checkpoint", workspace["checkpoint"]) == 0
    after = {p: p.read_bytes() for p in (workspace["root"] / "data").rglob("*") if p.is_file()}
    assert before == after
    assert open(workspace["checkpoint"], "rb").read() == ckpt
