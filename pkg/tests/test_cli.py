import json
from pathlib import Path

import pytest

import mixquant as mq
from mixquant.cli import main
from mixquant.fusion import discover_fusion_groups
from mixquant.quantizer import load_node_list


def run_pipeline(root: Path, seed=42, method="delta-mixup", targets="40",
                 calib_count=16, eval_count=16, extra_synth=()):
    root.mkdir(parents=True, exist_ok=True)
    d = str(root)
    assert main(["synth", "--arch", "mininet", "--seed", str(seed),
                 "--calib-count", str(calib_count), "--eval-count", str(eval_count),
                 "--out-dir", d, *extra_synth]) == 0
    assert main(["calibrate", "--model", f"{d}/model", "--images", f"{d}/calib_images.bin",
                 "--out", f"{d}/calib.json"]) == 0
    assert main(["analyze", "--model", f"{d}/model", "--calib", f"{d}/calib.json",
                 "--images", f"{d}/calib_images.bin", "--method", method,
                 "--out-list", f"{d}/sensitivity.txt", "--out-metrics", f"{d}/metrics.csv"]) == 0
    assert main(["quantize", "--model", f"{d}/model", "--calib", f"{d}/calib.json",
                 "--list", f"{d}/sensitivity.txt", "--target-reduction", targets,
                 "--out-dir", d]) == 0
    reports = []
    for t in targets.split(","):
        out = f"{d}/report{t}.json"
        assert main(["evaluate", "--model", f"{d}/q{float(t):g}/model", "--ref-model", f"{d}/model",
                     "--images", f"{d}/eval_images.bin", "--labels", f"{d}/labels.json",
                     "--out", out]) == 0
        reports.append(out)
    assert main(["report", "--runs", *reports, "--out", f"{d}/recovery_curve.csv"]) == 0
    return root


class TestPipeline:
    def test_full_pipeline_artifacts(self, tmp_path):
        d = run_pipeline(tmp_path / "run", targets="40")
        report = json.loads((d / "report40.json").read_text())
        assert report["bops"]["normalized_reduction_pct"] <= 40.0
        assert 0.0 <= report["accuracy"] <= 1.0
        assert report["qdq_count"] >= 2
        assert "digests" in report and "run" in report
        assert report["run"]["method"] == "delta_mixup"
        curve = (d / "recovery_curve.csv").read_text().splitlines()
        assert len(curve) == 2
        precision = json.loads((d / "q40/precision.json").read_text())
        assert set(precision["layers"].values()) <= {8, 32}

    def test_in_order_list_is_topo_group_order(self, tmp_path):
        d = run_pipeline(tmp_path / "run", method="in-order")
        graph = mq.load_model(d / "model")
        expected = [m for g in discover_fusion_groups(graph) for m in g.members]
        assert load_node_list(d / "sensitivity.txt") == expected

    def test_target_100_fully_quantized(self, tmp_path):
        d = run_pipeline(tmp_path / "run", targets="100")
        assert load_node_list(d / "q100/dequant_list.txt") == []
        report = json.loads((d / "report100.json").read_text())
        assert report["bops"]["normalized_reduction_pct"] == 100.0
        assert report["qdq_count"] == 2

    def test_rerun_byte_identical(self, tmp_path):
        a = run_pipeline(tmp_path / "a", targets="40,100")
        b = run_pipeline(tmp_path / "b", targets="40,100")
        for rel in ("model/manifest.json", "model/weights.bin", "calib.json",
                    "sensitivity.txt", "metrics.csv", "q40/model/manifest.json",
                    "q40/model/weights.bin", "q40/precision.json", "q40/dequant_list.txt",
                    "report40.json", "report100.json", "recovery_curve.csv"):
            assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


class TestExitCodes:
    def test_usage_error_is_2(self):
        with pytest.raises(SystemExit) as err:
            main(["synth", "--arch", "resnet152", "--out-dir", "/tmp/x"])
        assert err.value.code == 2

    def test_missing_stage_is_3_with_hint(self, tmp_path, capsys):
        code = main(["quantize", "--model", str(tmp_path / "model"),
                     "--calib", str(tmp_path / "calib.json"),
                     "--list", str(tmp_path / "sensitivity.txt"),
                     "--target-reduction", "40", "--out-dir", str(tmp_path)])
        assert code == 3
        assert "synth" in capsys.readouterr().err

    def test_corrupt_model_is_3(self, tmp_path, capsys):
        d = tmp_path / "run"
        assert main(["synth", "--arch", "mininet", "--seed", "1", "--calib-count", "2",
                     "--eval-count", "2", "--out-dir", str(d)]) == 0
        blob = d / "model/weights.bin"
        blob.write_bytes(blob.read_bytes()[:10])
        code = main(["calibrate", "--model", str(d / "model"),
                     "--images", str(d / "calib_images.bin"), "--out", str(d / "calib.json")])
        assert code == 3

    def test_ok_is_0(self, tmp_path):
        assert main(["synth", "--arch", "mininet", "--seed", "1", "--calib-count", "2",
                     "--eval-count", "2", "--out-dir", str(tmp_path / "m")]) == 0


class TestPathologySynth:
    def test_scale_layer_flag(self, tmp_path):
        d = tmp_path / "p"
        assert main(["synth", "--arch", "mininet", "--seed", "42", "--calib-count", "2",
                     "--eval-count", "2", "--scale-layer", "b6_conv",
                     "--out-dir", str(d)]) == 0
        scaled = mq.load_model(d / "model")
        plain = mq.gen_synthetic("mininet", 42)
        w_scaled = scaled.node("b6_conv").weights["weight"].data
        w_plain = plain.node("b6_conv").weights["weight"].data
        assert (w_scaled != w_plain).any()
