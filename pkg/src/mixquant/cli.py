"""Pipeline driver: synth -> calibrate -> analyze -> quantize -> evaluate -> report.

Each command consumes the previous command's artifacts and is individually
re-runnable; with fixed seeds every artifact is byte-identical across reruns.
All outputs are plain files (JSON/CSV/TXT/BIN); the intended users are build
pipelines, not humans at a prompt.

Exit codes: 0 ok, 2 usage, 3 data error, 4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import model_io
from .bops import bops, macs_by_node
from .calibration import CalibrationProfile, profile_activations
from .errors import InvariantViolation, MixQuantError
from .executor import Executor
from .fusion import STAGES, lower_to_stage
from .ir import Graph, Tensor
from .metrics import sqnr
from .quantizer import (
    apply_mixed_precision,
    count_qdq,
    precision_config,
    save_node_list,
    save_precision_config,
    select_dequant_set,
)
from .sensitivity import (
    DEFAULT_MIXUP,
    SensitivityList,
    baseline_order,
    evaluate_accuracy,
    generate_sensitivity_list,
    save_metrics_csv,
    teacher_labels,
)

METHODS = {"delta-mixup": "delta_mixup", "in-order": "in_order",
           "weight-sqnr": "weight_sqnr", "top1": "top1"}


def _sha256(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


def model_digest(model_dir) -> str:
    return _sha256(Path(model_dir) / "manifest.json", Path(model_dir) / "weights.bin")


def _write_json(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def _require(path, produced_by: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{p} does not exist; run `{produced_by}` first")
    return p


def logits_node_id(graph: Graph) -> str:
    """The node producing the pre-softmax scores (softmax's input, or the
    output's input when there is no softmax)."""
    softmax = [n for n in graph.nodes if n.kind == "Softmax"]
    return softmax[0].inputs[0] if softmax else graph.output_node.inputs[0]


def final_logit_sqnr(q_graph: Graph, ref_graph: Graph, images: np.ndarray,
                     executor: Executor | None = None) -> float:
    """Mean SQNR of the quantized model's logits against FP32, over images."""
    ex = executor or Executor()
    node_ref = logits_node_id(ref_graph)
    node_q = node_ref if node_ref in q_graph else logits_node_id(q_graph)
    total = 0.0
    for i in range(images.shape[0]):
        img = Tensor.f32(images[i:i + 1])
        _, ref_trace = ex.run_fp32(ref_graph, img, capture=True)
        _, q_trace = ex.run_quantized(q_graph, img, capture=True)
        total += sqnr(ref_trace.outputs[node_ref], q_trace.outputs[node_q])
    return total / images.shape[0]


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    graph = model_io.gen_synthetic(args.arch, args.seed)
    if args.scale_layer:
        graph = model_io.scale_node_weights(graph, args.scale_layer, args.scale_factor,
                                            stride=args.scale_stride)
    model_io.save_model(graph, out / "model")
    shape = tuple(int(d) for d in graph.input_node.attrs["shape"])
    calib = model_io.gen_images(args.calib_count, shape, args.seed + 1)
    evalset = model_io.gen_images(args.eval_count, shape, args.seed + 2)
    model_io.save_images(calib, out / "calib_images.bin")
    model_io.save_images(evalset, out / "eval_images.bin")
    model_io.save_labels(teacher_labels(graph, evalset), out / "labels.json")
    print(f"synth: wrote {args.arch} (seed {args.seed}) with {len(graph.nodes)} nodes to {out}")
    return 0


def cmd_calibrate(args) -> int:
    graph = model_io.load_model(_require(args.model, "synth"))
    images = model_io.load_images(_require(args.images, "synth"))
    profile = profile_activations(graph, images, bins=args.bins)
    profile.save(args.out)
    print(f"calibrate: profiled {profile.image_count} images over "
          f"{len(profile.profiles)} tensors -> {args.out}")
    return 0


def cmd_analyze(args) -> int:
    graph = model_io.load_model(_require(args.model, "synth"))
    calib = CalibrationProfile.load(_require(args.calib, "calibrate"))
    method = METHODS[args.method]
    if method in ("delta_mixup", "top1") and not args.images:
        raise ValueError(f"--images is required for --method {args.method}")
    if method == "top1" and not args.labels:
        raise ValueError("--labels is required for --method top1")
    graph = lower_to_stage(graph, args.ir_stage)
    if method == "delta_mixup":
        images = model_io.load_images(_require(args.images, "synth"))
        sens, samples = generate_sensitivity_list(
            graph, calib, images, mixup=tuple(args.mixup_weights), ir_stage=args.ir_stage)
        if args.out_metrics:
            save_metrics_csv(samples, args.out_metrics)
    else:
        images = labels = None
        if method == "top1":
            images = model_io.load_images(_require(args.images, "synth"))
            labels = model_io.load_labels(_require(args.labels, "synth"))
        sens = baseline_order(graph, method, images=images, labels=labels, calib=calib,
                              top1_budget=args.top1_images)
        sens.ir_stage = args.ir_stage
    sens.save(args.out_list)
    print(f"analyze: method {method}, {len(sens.ids)} layers -> {args.out_list}")
    return 0


def cmd_quantize(args) -> int:
    graph = model_io.load_model(_require(args.model, "synth"))
    calib = CalibrationProfile.load(_require(args.calib, "calibrate"))
    sens = SensitivityList.load(_require(args.list, "analyze"))
    staged = lower_to_stage(graph, args.apply_stage)
    macs = macs_by_node(staged)
    for target in args.target_reduction:
        keep = select_dequant_set(sens, staged, target, macs=macs)
        qg = apply_mixed_precision(staged, keep, calib)
        tdir = Path(args.out_dir) / f"q{target:g}"
        model_io.save_model(qg, tdir / "model")
        save_node_list(keep, tdir / "dequant_list.txt")
        save_precision_config(precision_config(qg), tdir / "precision.json")
        _write_json({
            "apply_stage": args.apply_stage,
            "ir_stage": sens.ir_stage,
            "method": sens.method,
            "target_reduction_pct": target,
            "list_digest": _sha256(args.list),
            "calib_digest": _sha256(args.calib),
        }, tdir / "meta.json")
        print(f"quantize: target {target}% -> {tdir} "
              f"({len(keep)} nodes kept at 32-bit, {count_qdq(qg)} Q-DQ)")
    return 0


def cmd_evaluate(args) -> int:
    qg = model_io.load_model(_require(args.model, "quantize"))
    ref = model_io.load_model(_require(args.ref_model, "synth"))
    images = model_io.load_images(_require(args.images, "synth"))
    labels = model_io.load_labels(_require(args.labels, "synth"))
    report = evaluate_model(qg, ref, images, labels)
    report["digests"] = {
        "model": model_digest(args.model),
        "ref_model": model_digest(args.ref_model),
        "images": _sha256(args.images),
    }
    meta_path = Path(args.model).parent / "meta.json"
    if meta_path.exists():
        report["run"] = json.loads(meta_path.read_text())
    _write_json(report, args.out)
    print(f"evaluate: accuracy {report['accuracy']:.4f}, "
          f"logit SQNR {report['final_logit_sqnr_db']:.2f} dB, "
          f"{report['qdq_count']} Q-DQ -> {args.out}")
    return 0


def evaluate_model(qg: Graph, ref: Graph, images: np.ndarray, labels) -> dict:
    ex = Executor()
    accuracy = evaluate_accuracy(qg, images, labels, ex, quantized=True)
    ref_accuracy = evaluate_accuracy(ref, images, labels, ex, quantized=False)
    logit_sqnr = final_logit_sqnr(qg, ref, images, ex)
    report = bops(qg, precision_config(qg))
    return {
        "accuracy": accuracy,
        "ref_accuracy": ref_accuracy,
        "final_logit_sqnr_db": logit_sqnr,
        "qdq_count": count_qdq(qg),
        "bops": report.to_json(),
    }


def cmd_report(args) -> int:
    rows = []
    for path in args.runs:
        doc = json.loads(_require(path, "evaluate").read_text())
        run = doc.get("run", {})
        rows.append({
            "method": run.get("method", "unknown"),
            "target_reduction_pct": run.get("target_reduction_pct", ""),
            "normalized_reduction_pct": doc["bops"]["normalized_reduction_pct"],
            "literal_reduction_pct": doc["bops"]["literal_reduction_pct"],
            "accuracy": doc["accuracy"],
            "final_logit_sqnr_db": doc["final_logit_sqnr_db"],
            "qdq_count": doc["qdq_count"],
        })
    rows.sort(key=lambda r: (r["method"], r["normalized_reduction_pct"]))
    cols = ["method", "target_reduction_pct", "normalized_reduction_pct",
            "literal_reduction_pct", "accuracy", "final_logit_sqnr_db", "qdq_count"]
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        writer.writerows(rows)
    print(f"report: {len(rows)} sweep points -> {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument plumbing

def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixquant",
        description="Mixed-precision post-training quantization pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic model plus image sets")
    p.add_argument("--arch", required=True, choices=["mininet", "mini_resnet", "mini_mobilenet"])
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("--calib-count", type=int, default=100)
    p.add_argument("--eval-count", type=int, default=64)
    p.add_argument("--scale-layer", default=None,
                   help="scale one node's weights (pathology construction)")
    p.add_argument("--scale-factor", type=float, default=50.0)
    p.add_argument("--scale-stride", type=int, default=64,
                   help="scale every N-th weight element; >1 makes the tail heavy")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("calibrate", help="profile activation histograms")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--bins", type=int, default=2048)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("analyze", help="generate a sensitivity list")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--images", default=None)
    p.add_argument("--labels", default=None, help="needed for --method top1")
    p.add_argument("--method", default="delta-mixup", choices=sorted(METHODS))
    p.add_argument("--ir-stage", default="unfused", choices=STAGES)
    p.add_argument("--mixup-weights", type=_float_list, default=list(DEFAULT_MIXUP),
                   metavar="W_WEIGHT,W_ACT")
    p.add_argument("--top1-images", type=int, default=50)
    p.add_argument("--out-list", required=True)
    p.add_argument("--out-metrics", default=None)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("quantize", help="apply mixed precision at target reductions")
    p.add_argument("--model", required=True)
    p.add_argument("--calib", required=True)
    p.add_argument("--list", required=True, help="sensitivity list file")
    p.add_argument("--target-reduction", type=_float_list, required=True,
                   metavar="PCT[,PCT...]")
    p.add_argument("--apply-stage", default="fused", choices=STAGES)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_quantize)

    p = sub.add_parser("evaluate", help="accuracy / logit SQNR / Q-DQ / BOPs of a model")
    p.add_argument("--model", required=True, help="quantized model directory")
    p.add_argument("--ref-model", required=True, help="FP32 reference model directory")
    p.add_argument("--images", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate evaluate outputs into a recovery curve")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except InvariantViolation as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return 4
    except (MixQuantError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
