import json
from pathlib import Path

import numpy as np
import pytest

from maskdistill import cli, gridio

DATA = Path(__file__).parent / "data"


def explain_config(out, method="dax-v2", size=12, n_samples=64, epochs=3):
    return {
        "input": {"synthetic": {"kind": "planted-region", "size": size,
                                "region": {"rect": [3, 3, 5, 5]}, "seed": 4}},
        "blackbox": {"kind": "region-mean", "region": {"rect": [3, 3, 5, 5]},
                     "temperature": 0.25},
        "method": method,
        "target": 0,
        "seed": 5,
        "out": str(out),
        "segmentation": {"kernel_size": 1.0, "max_dist": 2.0},
        "sampler": {"n_samples": n_samples},
        "method_params": {"dax-v2": {"epochs": epochs},
                          "dax-v1": {"epochs": epochs},
                          "rise": {"num_masks": 50},
                          "lime": {"n_samples": 64}},
    }


def suite_config(out, n_items=2, methods=("rise", "occlusion")):
    items = []
    for i in range(n_items):
        rect = [2 + i, 3, 5, 4 + i]
        items.append({
            "input": {"synthetic": {"kind": "planted-region", "size": 12,
                                    "region": {"rect": rect}, "seed": 10 + i}},
            "blackbox": {"kind": "region-mean", "region": {"rect": rect},
                         "temperature": 0.25},
            "target": 0,
        })
    return {
        "seed": 0,
        "items": items,
        "methods": list(methods),
        "metrics": ["iou", "deletion-auc"],
        "segmentation": {"kernel_size": 1.0, "max_dist": 2.0},
        "method_params": {"rise": {"num_masks": 60}},
        "deletion": {"steps": 6},
        "out": str(out),
    }


def write_config(tmp_path, cfg, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return path


DAX_BUNDLE = {"manifest.json", "mask.fgrid", "mask_binary.pbm", "overlay.png",
              "training_log.csv"}


def test_explain_dax_bundle_contains_declared_files(tmp_path):
    out = tmp_path / "bundle"
    cfg_path = write_config(tmp_path, explain_config(out))
    assert cli.main(["explain", "--config", str(cfg_path)]) == 0
    assert {p.name for p in out.iterdir()} == DAX_BUNDLE
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert sorted(manifest["artifacts"]) == sorted(DAX_BUNDLE)
    mask = gridio.load_fgrid(out / "mask.fgrid")
    assert mask.shape == (12, 12)
    rows = (out / "training_log.csv").read_text().strip().splitlines()
    assert rows[0] == "epoch,train_loss,val_loss"
    assert len(rows) == 4


def test_explain_rerun_byte_identical_mask(tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    cfg = explain_config(out_a)
    path = write_config(tmp_path, cfg)
    assert cli.main(["explain", "--config", str(path)]) == 0
    cfg["out"] = str(out_b)
    path = write_config(tmp_path, cfg, "config_b.json")
    assert cli.main(["explain", "--config", str(path)]) == 0
    assert (out_a / "mask.fgrid").read_bytes() == (out_b / "mask.fgrid").read_bytes()


def test_explain_missing_input_no_partial_bundle(tmp_path):
    out = tmp_path / "bundle"
    cfg = explain_config(out)
    cfg["input"] = str(tmp_path / "nope.pgm")
    path = write_config(tmp_path, cfg)
    assert cli.main(["explain", "--config", str(path)]) == 1
    assert not out.exists()


@pytest.mark.parametrize("method", ["rise", "lime", "occlusion"])
def test_explain_baseline_bundles(tmp_path, method):
    out = tmp_path / method
    path = write_config(tmp_path, explain_config(out, method=method))
    assert cli.main(["explain", "--config", str(path)]) == 0
    assert {p.name for p in out.iterdir()} == DAX_BUNDLE - {"training_log.csv"}


def test_explain_cli_overrides_and_manifest(tmp_path):
    out = tmp_path / "bundle"
    path = write_config(tmp_path, explain_config(out, method="rise"))
    assert cli.main(["explain", "--config", str(path), "--method", "occlusion",
                     "--param", "window=3", "--seed", "9"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["method"] == "occlusion"
    assert manifest["seed"] == 9
    assert manifest["config"]["method_params"]["occlusion"]["window"] == 3


def test_explain_file_input_round_trip(tmp_path):
    arr = np.random.default_rng(0).random((10, 10))
    img_path = tmp_path / "input.fgrid"
    gridio.save_fgrid(arr, img_path)
    out = tmp_path / "bundle"
    cfg = explain_config(out, method="occlusion")
    cfg["input"] = str(img_path)
    cfg["blackbox"] = {"kind": "region-mean", "region": {"rect": [2, 2, 4, 4]}}
    path = write_config(tmp_path, cfg)
    assert cli.main(["explain", "--config", str(path)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["input"]["sha256"]


def test_evaluate_report_files(tmp_path):
    out = tmp_path / "report"
    path = write_config(tmp_path, suite_config(out))
    assert cli.main(["evaluate", "--config", str(path)]) == 0
    names = {p.name for p in out.iterdir()}
    assert {"metrics.csv", "aggregates.csv", "summary.txt", "deletion_curves.csv",
            "manifest.json", "figures"} <= names
    rows = (out / "metrics.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 2 * 2 * 2  # header + items x methods x metrics
    figures = {p.name for p in (out / "figures").iterdir()}
    assert "metrics_by_method.png" in figures
    assert "deletion_item0.png" in figures and "deletion_item1.png" in figures


def test_evaluate_single_item_std_zero(tmp_path):
    out = tmp_path / "report"
    path = write_config(tmp_path, suite_config(out, n_items=1, methods=("rise",)))
    assert cli.main(["evaluate", "--config", str(path)]) == 0
    agg = (out / "aggregates.csv").read_text().strip().splitlines()
    for line in agg[1:]:
        assert line.split(",")[3] == "0.0"


def test_evaluate_item_failure_continues_and_exits_nonzero(tmp_path):
    out = tmp_path / "report"
    cfg = suite_config(out, n_items=2, methods=("occlusion",))
    cfg["items"][1]["blackbox"] = {"kind": "region-mean",
                                   "region": {"rect": [0, 0, 0, 0]}}
    path = write_config(tmp_path, cfg)
    assert cli.main(["evaluate", "--config", str(path)]) == 2
    summary = (out / "summary.txt").read_text()
    assert "FAILED item 1" in summary
    rows = (out / "metrics.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 2  # item 0 still evaluated


def test_evaluate_parallel_jobs_match_sequential(tmp_path):
    out_seq, out_par = tmp_path / "seq", tmp_path / "par"
    path = write_config(tmp_path, suite_config(out_seq))
    assert cli.main(["evaluate", "--config", str(path)]) == 0
    cfg = suite_config(out_par)
    path = write_config(tmp_path, cfg, "par.json")
    assert cli.main(["evaluate", "--config", str(path), "--jobs", "2"]) == 0
    assert (out_seq / "metrics.csv").read_text() == (out_par / "metrics.csv").read_text()


def test_evaluate_golden_report(tmp_path):
    out = tmp_path / "report"
    path = write_config(tmp_path, suite_config(out))
    assert cli.main(["evaluate", "--config", str(path)]) == 0
    golden = (DATA / "golden_report_metrics.csv").read_text()
    assert (out / "metrics.csv").read_text() == golden


def test_train_blackbox_checkpoint_then_explain(tmp_path):
    ckpt = tmp_path / "clf.json"
    cfg = {"dataset": {"n_samples": 300, "size": 12}, "epochs": 12, "seed": 0,
           "accuracy_floor": 0.8, "out": str(ckpt)}
    path = write_config(tmp_path, cfg, "train.json")
    assert cli.main(["train-blackbox", "--config", str(path)]) == 0
    assert ckpt.exists()

    out = tmp_path / "bundle"
    ecfg = explain_config(out, method="occlusion", size=12)
    ecfg["blackbox"] = {"checkpoint": str(ckpt)}
    path = write_config(tmp_path, ecfg, "explain.json")
    assert cli.main(["explain", "--config", str(path)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["blackbox"]["checkpoint"] == str(ckpt)


def test_demo_runs_end_to_end(tmp_path):
    out = tmp_path / "demo"
    assert cli.main(["demo", "--out", str(out), "--seed", "7"]) == 0
    names = {p.name for p in out.iterdir()}
    assert DAX_BUNDLE | {"panel.png", "segments.pgm"} <= names


def test_usage_errors_exit_one(tmp_path):
    assert cli.main(["explain"]) == 1  # missing --config
    assert cli.main(["no-such-command"]) == 1
    assert cli.main(["explain", "--config", str(tmp_path / "missing.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert cli.main(["explain", "--config", str(bad)]) == 1


def test_explain_stage_failure_writes_failed_manifest(tmp_path):
    out = tmp_path / "bundle"
    cfg = explain_config(out)
    cfg["target"] = 5  # out of range for the 2-class oracle: fails at sampling
    path = write_config(tmp_path, cfg)
    assert cli.main(["explain", "--config", str(path)]) == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert manifest["stage"] == "sampling"
    assert "target class 5" in manifest["error"]


def test_unknown_method_rejected(tmp_path):
    out = tmp_path / "bundle"
    cfg = explain_config(out)
    cfg["method"] = "shapley"
    path = write_config(tmp_path, cfg)
    assert cli.main(["explain", "--config", str(path)]) == 1
    assert not out.exists()
