"""Command-line surface: explain, evaluate, train-blackbox, demo.

Runs are driven by a JSON config file; command-line flags override config
values, which override built-in defaults. Every artifact directory gets a
manifest (resolved config, content hashes, seeds, timings) sufficient to
reproduce the run. Exit codes: 0 success, 1 usage/config error, 2 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, baselines, dax, gridio, metrics, perturb, render
from . import blackbox as bbox
from . import synth
from .segmentation import QuickShiftConfig, quick_shift, save_segment_map

METHODS = ("dax-v1", "dax-v2", "rise", "lime", "occlusion")


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _sha256_array(arr):
    return hashlib.sha256(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"config file {path} is not valid JSON: {e}")


def resolve_region(spec, shape):
    """Region specs: {"rect": [r0, c0, h, w]}, {"disc": [r, c, radius]},
    {"path": "mask.pbm"}, or {"union": [spec, ...]}."""
    h, w = shape[:2]
    if "rect" in spec:
        return synth.rect_mask(h, w, *spec["rect"])
    if "disc" in spec:
        return synth.disc_mask(h, w, *spec["disc"])
    if "union" in spec:
        mask = np.zeros((h, w), dtype=bool)
        for part in spec["union"]:
            mask |= resolve_region(part, shape)
        return mask
    if "path" in spec:
        grid = gridio.load_input(spec["path"])
        return grid[..., 0] > 0.5
    raise UsageError(f"region spec needs 'rect', 'disc', 'union' or 'path': {spec}")


def resolve_input(spec, seed=0):
    """Input specs: a file path, or {"synthetic": {...}} generator config.

    Returns (tensor, source_description, gt_region_or_None).
    """
    if isinstance(spec, str):
        path = Path(spec)
        if not path.exists():
            raise UsageError(f"input path not found: {path}")
        return gridio.load_input(path), {"path": str(path), "sha256": _sha256_file(path)}, None
    if isinstance(spec, dict) and "synthetic" in spec:
        s = dict(spec["synthetic"])
        kind = s.get("kind", "planted-region")
        size = int(s.get("size", 16))
        gen_seed = int(s.get("seed", seed))
        if kind == "planted-region":
            region = resolve_region(s.get("region", {"rect": [size // 4, size // 4,
                                                             size // 3, size // 3]}),
                                    (size, size))
            x = synth.planted_region_image(size, size, region, seed=gen_seed,
                                           cell=int(s.get("cell", 4)),
                                           fg=float(s.get("fg", 0.9)),
                                           fg_span=float(s.get("fg_span", 0.0)))
            return x, {"synthetic": s}, region
        if kind == "two-region":
            region_a = resolve_region(s["region_a"], (size, size))
            region_b = resolve_region(s["region_b"], (size, size))
            x = synth.two_region_image(size, size, region_a, region_b,
                                       seed=gen_seed, cell=int(s.get("cell", 4)))
            return x, {"synthetic": s}, region_a
        raise UsageError(f"unknown synthetic input kind {kind!r}")
    raise UsageError(f"input spec must be a path or a synthetic generator: {spec}")


def resolve_blackbox(spec, input_shape):
    """Black-box specs: oracle configs or {"checkpoint": path}."""
    if not isinstance(spec, dict):
        raise UsageError(f"blackbox spec must be an object, got {spec!r}")
    if "checkpoint" in spec:
        path = Path(spec["checkpoint"])
        if not path.exists():
            raise UsageError(f"checkpoint not found: {path}")
        handle = bbox.load_classifier(path)
        return handle, {"checkpoint": str(path), "sha256": _sha256_file(path)}
    kind = spec.get("kind")
    temperature = float(spec.get("temperature", 1.0))
    if kind == "constant":
        return bbox.constant_oracle(spec["probs"], input_shape), {"kind": kind}
    if kind == "region-mean":
        region = resolve_region(spec["region"], input_shape)
        return (bbox.region_mean_oracle(region, input_shape, temperature),
                {"kind": kind, "temperature": temperature})
    if kind == "planted-shape":
        regions = [resolve_region(r, input_shape) for r in spec["regions"]]
        return (bbox.planted_shape_oracle(regions, input_shape, temperature),
                {"kind": kind, "temperature": temperature})
    raise UsageError(f"unknown blackbox kind {kind!r}")


def _seg_config(cfg):
    seg = cfg.get("segmentation", {})
    return QuickShiftConfig(kernel_size=float(seg.get("kernel_size", 1.0)),
                            max_dist=float(seg.get("max_dist", 2.0)),
                            ratio=float(seg.get("ratio", 1.0)),
                            seed=int(seg.get("seed", 0)))


def _sampler_config(cfg, seed):
    s = cfg.get("sampler", {})
    return perturb.SamplerConfig(n_samples=int(s.get("n_samples", 512)),
                                 mask_prob=float(s.get("mask_prob", 0.5)),
                                 fill=s.get("fill", "zero"),
                                 val_fraction=float(s.get("val_fraction", 0.1)),
                                 seed=int(s.get("seed", seed)))


def _dax_config(variant, params):
    known = {f for f in dax.DaxConfig.__dataclass_fields__}
    extra = {k: v for k, v in params.items() if k in known and k != "variant"}
    return dax.DaxConfig(variant=variant, **extra)


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except Exception as e:
        raise StageError(name, e) from e


def run_method(method, x, handle, target, cfg, seed):
    """Dispatch one explainer; returns (saliency grid, binary mask, history)."""
    params = cfg.get("method_params", {}).get(method, {})
    if method.startswith("dax-"):
        seg = _stage("segmentation", quick_shift, x, _seg_config(cfg))
        batch = _stage("sampling", perturb.sample, x, seg, handle, target,
                       _sampler_config(cfg, seed), cache_dir=cfg.get("cache_dir"))
        explanation = _stage("training", dax.train, x, target, batch,
                             _dax_config(method[4:], params), seed=seed)
        return explanation.mask, explanation.binary, explanation.history
    if method == "rise":
        rise_cfg = baselines.RiseMaskConfig(cells=int(params.get("cells", 7)),
                                            keep_prob=float(params.get("keep_prob", 0.5)))
        sal = baselines.rise_explain(x, handle, target,
                                     num_masks=int(params.get("num_masks", 1000)),
                                     cfg=rise_cfg, seed=seed)
    elif method == "lime":
        seg = quick_shift(x, _seg_config(cfg))
        _, sal = baselines.lime_explain(x, seg, handle, target,
                                        n_samples=int(params.get("n_samples", 384)),
                                        mask_prob=float(params.get("mask_prob", 0.5)),
                                        ridge=float(params.get("ridge", 1e-3)),
                                        kernel_width=float(params.get("kernel_width", 0.25)),
                                        seed=seed, fill=params.get("fill", "zero"))
    elif method == "occlusion":
        sal = baselines.occlusion_explain(x, handle, target,
                                          window=int(params.get("window", 4)),
                                          stride=int(params.get("stride", 2)),
                                          fill=float(params.get("fill", 0.0)))
    else:
        raise UsageError(f"unknown method {method!r}; choose from {METHODS}")
    return sal.values, metrics.binarize(sal.values), None


def _write_bundle(out_dir, x, saliency, binary, history, manifest):
    out_dir.mkdir(parents=True, exist_ok=True)
    gridio.save_fgrid(saliency, out_dir / "mask.fgrid")
    gridio.save_pbm(binary, out_dir / "mask_binary.pbm")
    render.render_heatmap_overlay(x, saliency, out_dir / "overlay.png")
    if history is not None:
        with open(out_dir / "training_log.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "train_loss", "val_loss"])
            writer.writerows(history)
    manifest["artifacts"] = sorted(p.name for p in out_dir.iterdir()) + ["manifest.json"]
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def cmd_explain(cfg):
    """Segment, sample, run the configured method, write the bundle."""
    seed = int(cfg.get("seed", 0))
    method = cfg.get("method", "dax-v2")
    if method not in METHODS:
        raise UsageError(f"unknown method {method!r}; choose from {METHODS}")
    out_dir = Path(cfg.get("out", "maskdistill-run"))
    x, source, _ = resolve_input(cfg.get("input"), seed=seed)
    handle, bb_desc = resolve_blackbox(cfg.get("blackbox"), x.shape)
    target = int(cfg.get("target", 0))

    manifest = {
        "tool": "maskdistill",
        "version": __version__,
        "command": "explain",
        "config": {k: v for k, v in cfg.items() if k != "out"},
        "input": source,
        "input_sha256": _sha256_array(x),
        "blackbox": bb_desc,
        "method": method,
        "seed": seed,
        "status": "ok",
        "timings_s": {},
    }
    t0 = time.time()
    try:
        saliency, binary, history = run_method(method, x, handle, target, cfg, seed)
    except Exception as e:
        stage = e.stage if isinstance(e, StageError) else "explain"
        manifest["status"] = "failed"
        manifest["stage"] = stage
        manifest["error"] = str(e)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        raise e if isinstance(e, StageError) else StageError("explain", e)
    manifest["timings_s"]["explain"] = round(time.time() - t0, 3)
    _write_bundle(out_dir, x, saliency, binary, history, manifest)
    return out_dir


def _suite_item_once(cfg, item, index, method):
    seed = int(cfg.get("seed", 0)) + index
    x, _, gen_region = resolve_input(item["input"], seed=seed)
    handle, _ = resolve_blackbox(item["blackbox"], x.shape)
    target = int(item.get("target", 0))
    gt = (resolve_region(item["gt_region"], x.shape)
          if "gt_region" in item else gen_region)
    wanted = cfg.get("metrics", ["iou", "deletion-auc"])
    rows = []
    curves = {}

    saliency, binary, _ = run_method(method, x, handle, target, cfg, seed)
    if "iou" in wanted and gt is not None:
        try:
            value = metrics.iou(binary, gt)
        except metrics.IouUndefinedError:
            value = 0.0
        rows.append({"item": index, "method": method, "metric": "iou", "value": value})
    if "deletion-auc" in wanted:
        dcfg = cfg.get("deletion", {})
        curve = metrics.deletion_auc(saliency, x, handle, target,
                                     steps=int(dcfg.get("steps", 11)),
                                     fill=float(dcfg.get("fill", 0.0)))
        rows.append({"item": index, "method": method, "metric": "deletion-auc",
                     "value": curve.auc})
        curves[method] = curve
    if "sensitivity" in wanted and gt is not None and handle.n_classes > 1:
        wrong = int(item.get("wrong_target", (target + 1) % handle.n_classes))

        def explain_fn(xv, tv):
            return run_method(method, xv, handle, tv, cfg, seed)[0]

        iou_t, iou_w = metrics.sensitivity_eval(explain_fn, x, target, wrong, gt)
        rows.append({"item": index, "method": method, "metric": "iou-correct-target",
                     "value": iou_t})
        rows.append({"item": index, "method": method, "metric": "iou-wrong-target",
                     "value": iou_w})
    return rows, curves


def _suite_worker(payload):
    cfg, item, index, method = payload
    try:
        rows, curves = _suite_item_once(cfg, item, index, method)
        curve_rows = [(index, m, f, s) for m, c in curves.items() for f, s in c.rows()]
        return {"ok": True, "rows": rows, "curves": curve_rows, "item": index,
                "method": method}
    except Exception as e:
        return {"ok": False, "item": index, "method": method, "error": str(e)}


def cmd_evaluate(cfg):
    """Run every configured method over every suite item; write the report."""
    items = cfg.get("items")
    if not items:
        raise UsageError("evaluate config needs a non-empty 'items' list")
    methods = cfg.get("methods", ["dax-v2"])
    for m in methods:
        if m not in METHODS:
            raise UsageError(f"unknown method {m!r}; choose from {METHODS}")
    out_dir = Path(cfg.get("out", "maskdistill-report"))
    jobs = int(cfg.get("jobs", 1))

    payloads = [(cfg, item, i, m) for i, item in enumerate(items) for m in methods]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_suite_worker, payloads))
    else:
        results = [_suite_worker(p) for p in payloads]

    rows = []
    curve_rows = []
    failures = []
    for res in sorted(results, key=lambda r: (r["item"], r["method"])):
        if res["ok"]:
            rows.extend(res["rows"])
            curve_rows.extend(res["curves"])
        else:
            failures.append(res)

    out_dir.mkdir(parents=True, exist_ok=True)
    fig_dir = out_dir / "figures"
    fig_dir.mkdir(exist_ok=True)
    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["item", "method", "metric", "value"])
        writer.writeheader()
        writer.writerows(rows)
    with open(out_dir / "deletion_curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["item", "method", "fraction", "score"])
        writer.writerows(curve_rows)

    aggregates = metrics.aggregate(rows) if rows else []
    with open(out_dir / "aggregates.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["method", "metric", "mean", "std", "n"])
        writer.writeheader()
        writer.writerows(aggregates)

    summary = [f"maskdistill evaluate: {len(items)} items x {len(methods)} methods"]
    if aggregates:
        summary.append(metrics.render_table(aggregates))
    for f in failures:
        summary.append(f"FAILED item {f['item']} method {f['method']}: {f['error']}")
    (out_dir / "summary.txt").write_text("\n".join(summary) + "\n")

    if curve_rows:
        _render_deletion_figures(curve_rows, fig_dir)
    if aggregates:
        _render_aggregate_figure(aggregates, fig_dir / "metrics_by_method.png")

    manifest = {"tool": "maskdistill", "version": __version__, "command": "evaluate",
                "config": {k: v for k, v in cfg.items() if k != "out"},
                "n_rows": len(rows),
                "failures": [{"item": f["item"], "method": f["method"],
                              "error": f["error"]} for f in failures],
                "status": "ok" if not failures else "partial"}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out_dir, failures


def _render_deletion_figures(curve_rows, fig_dir):
    by_item = {}
    for item, method, frac, score in curve_rows:
        by_item.setdefault(item, {}).setdefault(method, []).append((frac, score))
    for item, methods in by_item.items():
        curves = {}
        for method, points in methods.items():
            fr = np.array([p[0] for p in points])
            sc = np.array([p[1] for p in points])
            curves[method] = metrics.DeletionCurve(fr, sc, float(np.trapezoid(sc, fr)))
        render.render_deletion_curves(curves, fig_dir / f"deletion_item{item}.png")


def _render_aggregate_figure(aggregates, path):
    import matplotlib.pyplot as plt

    metrics_set = sorted({a["metric"] for a in aggregates})
    fig, axes = plt.subplots(1, len(metrics_set), figsize=(3.2 * len(metrics_set), 3.2),
                             squeeze=False)
    for ax, metric in zip(axes[0], metrics_set):
        sub = [a for a in aggregates if a["metric"] == metric]
        names = [a["method"] for a in sub]
        means = [a["mean"] for a in sub]
        stds = [a["std"] for a in sub]
        ax.bar(range(len(sub)), means, yerr=stds, capsize=3)
        ax.set_xticks(range(len(sub)))
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
        ax.set_title(metric, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_train_blackbox(cfg):
    """Train the toy classifier and write its checkpoint + accuracy record."""
    spec = cfg.get("dataset", {})
    out_path = Path(cfg.get("out", "toy-classifier.json"))
    handle, net = bbox.train_toy_classifier(
        n_samples=int(spec.get("n_samples", 500)),
        size=int(spec.get("size", 16)),
        noise=float(spec.get("noise", 0.25)),
        epochs=int(cfg.get("epochs", 30)),
        seed=int(cfg.get("seed", 0)),
        accuracy_floor=float(cfg.get("accuracy_floor", 0.9)))
    out_path.parent.mkdir(parents=True, exist_ok=True)
    bbox.save_classifier(net, out_path, record=handle.metadata)
    return out_path, handle.metadata


DEMO_REGION_SPEC = {"union": [{"disc": [9, 8, 4.2]}, {"rect": [4, 16, 4, 4]},
                              {"rect": [16, 12, 4, 4]}]}


def cmd_demo(out_dir, seed=7):
    """Self-contained run: synthetic image, region oracle, dax-v2 bundle."""
    out_dir = Path(out_dir)
    x, _ = synth.demo_image(seed=seed)
    size = x.shape[0]
    cfg = {
        "input": {"synthetic": {"kind": "planted-region", "size": size,
                                "region": DEMO_REGION_SPEC, "seed": seed,
                                "fg": 0.9, "fg_span": 0.0}},
        "blackbox": {"kind": "region-mean", "region": DEMO_REGION_SPEC,
                     "temperature": 0.25},
        "method": "dax-v2",
        "seed": seed,
        "out": str(out_dir),
        "segmentation": {"kernel_size": 1.0, "max_dist": 2.0},
        "sampler": {"n_samples": 384},
        "method_params": {"dax-v2": {"epochs": 30}},
    }
    bundle = cmd_explain(cfg)
    mask = gridio.load_fgrid(bundle / "mask.fgrid")
    render.render_explanation_panel(x, mask, metrics.binarize(mask),
                                    bundle / "panel.png")
    seg = quick_shift(x, _seg_config(cfg))
    save_segment_map(seg, bundle / "segments.pgm")
    return bundle


def _parse_overrides(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"--param expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def build_parser():
    parser = _Parser(prog="maskdistill",
                     description="Query-access saliency explanations and baselines.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_explain = sub.add_parser("explain", help="explain one input, write a bundle")
    p_explain.add_argument("--config", required=True)
    p_explain.add_argument("--method", choices=METHODS)
    p_explain.add_argument("--seed", type=int)
    p_explain.add_argument("--out")
    p_explain.add_argument("--param", action="append", metavar="KEY=VALUE",
                           help="method parameter override (repeatable)")

    p_eval = sub.add_parser("evaluate", help="run a benchmark suite, write a report")
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--seed", type=int)
    p_eval.add_argument("--jobs", type=int)
    p_eval.add_argument("--out")

    p_train = sub.add_parser("train-blackbox", help="train the toy classifier")
    p_train.add_argument("--config")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--out")

    p_demo = sub.add_parser("demo", help="run the bundled demo end to end")
    p_demo.add_argument("--out", default="maskdistill-demo")
    p_demo.add_argument("--seed", type=int, default=7)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1

    try:
        if args.command == "explain":
            cfg = load_config(args.config)
            for key in ("method", "seed", "out"):
                value = getattr(args, key)
                if value is not None:
                    cfg[key] = value
            overrides = _parse_overrides(args.param)
            if overrides:
                method = cfg.get("method", "dax-v2")
                cfg.setdefault("method_params", {}).setdefault(method, {}).update(overrides)
            bundle = cmd_explain(cfg)
            print(f"bundle written to {bundle}")
        elif args.command == "evaluate":
            cfg = load_config(args.config)
            for key in ("seed", "jobs", "out"):
                value = getattr(args, key)
                if value is not None:
                    cfg[key] = value
            out_dir, failures = cmd_evaluate(cfg)
            print(f"report written to {out_dir}")
            if failures:
                print(f"{len(failures)} item(s) failed; see summary.txt", file=sys.stderr)
                return 2
        elif args.command == "train-blackbox":
            cfg = load_config(args.config) if args.config else {}
            if args.seed is not None:
                cfg["seed"] = args.seed
            if args.out is not None:
                cfg["out"] = args.out
            path, record = cmd_train_blackbox(cfg)
            print(f"checkpoint written to {path} "
                  f"(holdout accuracy {record['holdout_accuracy']:.3f})")
        elif args.command == "demo":
            bundle = cmd_demo(args.out, seed=args.seed)
            print(f"demo bundle written to {bundle}")
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
