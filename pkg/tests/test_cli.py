import contextlib
import csv
import io
import json
from pathlib import Path

import pytest

from cascadet import cli
from cascadet.config import ExperimentConfig, load_config

FIXTURE = Path(__file__).parent / "fixtures" / "wider_gt.txt"


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli.main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


@pytest.fixture
def small_config(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(
        json.dumps(
            {
                "version": 1,
                "seed": 5,
                "pyramid": {"input_size": 128},
                "synth": {"image_size": 128, "max_faces": 6, "max_scale": 89.6},
                "augmentation": {"output_size": 128},
                "training": {"epochs": 2},
            }
        )
    )
    return path


def test_missing_config_is_io_error(tmp_path):
    code, _, err = run("synth", "--config", tmp_path / "nope.json", "--n", 1, "--out", tmp_path / "s.jsonl")
    assert code == cli.EXIT_IO
    assert err.count("\n") == 1 and "nope.json" in err


def test_unknown_config_key_is_config_error(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"cascade": {"theta": 1}}')
    code, _, err = run("synth", "--config", path, "--n", 1, "--out", tmp_path / "s.jsonl")
    assert code == cli.EXIT_USAGE
    assert "unknown" in err and err.count("\n") == 1


def test_unknown_level_is_config_error(tmp_path):
    path = tmp_path / "c.json"
    path.write_text('{"cascade": {"stc_levels": ["P9"]}}')
    scenes = tmp_path / "s.jsonl"
    assert run("synth", "--n", 1, "--out", scenes)[0] == 0
    code, _, _ = run("match-stats", "--config", path, "--scenes", scenes, "--out", tmp_path / "m.json")
    assert code == cli.EXIT_USAGE


def test_missing_input_is_io_error(tmp_path):
    code, _, err = run("match-stats", "--scenes", tmp_path / "none.jsonl", "--out", tmp_path / "m.json")
    assert code == cli.EXIT_IO
    assert "none.jsonl" in err


def test_malformed_wider_is_io_error(tmp_path):
    bad = tmp_path / "gt.txt"
    bad.write_text("img.jpg\nnot-a-number\n")
    code, _, err = run("parse-wider", "--gt", bad, "--out", tmp_path / "w.jsonl")
    assert code == cli.EXIT_IO
    assert "line 2" in err


def test_bad_detection_record_is_io_error(tmp_path):
    gt = tmp_path / "gt.jsonl"
    run("parse-wider", "--gt", FIXTURE, "--out", gt)
    dets = tmp_path / "d.jsonl"
    dets.write_text('{"image_id": "x", "score": 1}\n')
    code, _, err = run("eval", "--dets", dets, "--gt", gt, "--out-dir", tmp_path / "e")
    assert code == cli.EXIT_IO
    assert "line 1" in err


def test_bad_jobs_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc, contextlib.redirect_stderr(io.StringIO()):
        cli.main(["ablate", "--jobs", "0", "--out-dir", str(tmp_path)])
    assert exc.value.code == cli.EXIT_USAGE


def test_seed_precedence(tmp_path, small_config):
    # default < config file < command line
    base = tmp_path / "default.jsonl"
    from_cfg = tmp_path / "config.jsonl"
    from_flag = tmp_path / "flag.jsonl"
    explicit = tmp_path / "explicit.jsonl"
    run("synth", "--n", 2, "--out", base)
    run("synth", "--config", small_config, "--n", 2, "--out", from_cfg)
    run("synth", "--config", small_config, "--n", 2, "--seed", 9, "--out", from_flag)
    run("synth", "--config", small_config, "--n", 2, "--seed", 5, "--out", explicit)
    manifest = json.loads(Path(str(from_flag) + ".manifest.json").read_text())
    assert manifest["seed"] == 9
    assert json.loads(Path(str(from_cfg) + ".manifest.json").read_text())["seed"] == 5
    assert json.loads(Path(str(base) + ".manifest.json").read_text())["seed"] == 0
    assert from_cfg.read_bytes() == explicit.read_bytes()
    assert from_cfg.read_bytes() != from_flag.read_bytes()


def test_flag_overrides_config_value(tmp_path, small_config):
    out = tmp_path / "a.jsonl"
    code, stdout, _ = run("gen-anchors", "--config", small_config, "--input-size", 64, "--out", out)
    assert code == 0
    manifest = json.loads(Path(str(out) + ".manifest.json").read_text())
    assert manifest["config"]["pyramid"]["input_size"] == 64
    assert manifest["arguments"]["input_size"] == 64


def test_manifest_contents(tmp_path, small_config):
    out = tmp_path / "scenes.jsonl"
    assert run("synth", "--config", small_config, "--n", 2, "--out", out)[0] == 0
    manifest = json.loads(Path(str(out) + ".manifest.json").read_text())
    cfg = load_config(small_config)
    assert manifest["command"] == "synth"
    assert manifest["config_sha256"] == cfg.digest()
    assert ExperimentConfig.from_dict(manifest["config"]) == cfg
    assert manifest["outputs"] == ["scenes.jsonl"]
    assert set(manifest["versions"]) == {"artifact", "numpy", "python"}
    assert manifest["arguments"]["n"] == 2


def test_gen_anchors_output(tmp_path):
    out = tmp_path / "anchors.jsonl"
    code, stdout, _ = run("gen-anchors", "--input-size", 64, "--out", out)
    assert code == 0
    records = [json.loads(line) for line in out.read_text().splitlines()]
    anchors = [r for r in records if r["type"] == "anchor"]
    levels = [r for r in records if r["type"] == "level"]
    assert [r["index"] for r in anchors] == list(range(len(anchors)))
    assert sum(r["count"] for r in levels) == len(anchors)
    assert sum(r["fraction"] for r in levels) == pytest.approx(1.0)
    assert records[-1]["type"] == "population"
    assert str(len(anchors)) in stdout


def test_pipeline_end_to_end(tmp_path, small_config):
    scenes = tmp_path / "scenes.jsonl"
    model_dir = tmp_path / "model"
    dets = tmp_path / "dets.jsonl"
    eval_dir = tmp_path / "eval"
    assert run("synth", "--config", small_config, "--n", 2, "--out", scenes)[0] == 0
    assert run("train-toy", "--config", small_config, "--scenes", scenes, "--out-dir", model_dir)[0] == 0
    with open(model_dir / "loss_trace.csv") as fh:
        trace = list(csv.DictReader(fh))
    assert len(trace) == 3
    code, _, _ = run(
        "infer", "--config", small_config, "--model", model_dir / "model.json", "--scenes", scenes, "--out", dets
    )
    assert code == 0
    for line in dets.read_text().splitlines():
        assert set(json.loads(line)) == {"image_id", "x_min", "y_min", "x_max", "y_max", "score"}
    code, stdout, _ = run(
        "eval", "--dets", dets, "--gt", scenes, "--iou-sweep", "--fp-at-recall", "0.1,0.5", "--out-dir", eval_dir
    )
    assert code == 0
    with open(eval_dir / "ap.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["iou_threshold"]) for r in rows] == list(ExperimentConfig().eval.iou_thresholds)
    assert all(0.0 <= float(r["ap"]) <= 1.0 for r in rows)
    assert (eval_dir / "fp_at_recall.csv").exists()
    assert sorted(json.loads((eval_dir / "manifest.json").read_text())["outputs"]) == [
        "ap.csv",
        "fp_at_recall.csv",
        "pr_curve.csv",
    ]


def test_infer_rejects_feature_mismatch(tmp_path, small_config):
    scenes = tmp_path / "scenes.jsonl"
    model_dir = tmp_path / "model"
    run("synth", "--config", small_config, "--n", 1, "--out", scenes)
    run("train-toy", "--config", small_config, "--scenes", scenes, "--epochs", 0, "--out-dir", model_dir)
    doc = json.loads(small_config.read_text())
    doc["features"] = {"dim": ExperimentConfig().features.dim + 1}
    other = tmp_path / "other.json"
    other.write_text(json.dumps(doc))
    code, _, err = run(
        "infer", "--config", other, "--model", model_dir / "model.json", "--scenes", scenes, "--out", tmp_path / "d"
    )
    assert code == cli.EXIT_USAGE
    assert "features" in err
