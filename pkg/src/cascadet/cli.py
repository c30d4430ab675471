"""Command-line entry point: ``cascadet <subcommand> ...``.

Exit codes:
    0  success
    1  runtime failure (for example, training diverged)
    2  usage or configuration error
    3  input/output error (missing, unreadable or malformed input file,
       unwritable output)

Every subcommand writes a manifest (config hash, seed, versions, arguments,
output files) next to its outputs. Outputs are pure functions of the inputs,
the config and the seed, so reruns produce byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import json
import io
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from importlib import metadata
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .anchors import generate, level_population_report
from .cascade import build_selection_sets
from .config import ConfigError, ExperimentConfig, load_config, reference_config
from .dataio import Scene, WiderParseError, parse_wider, read_scenes, synth_scenes, write_scenes
from .evaluation import ImageResult, average_precision, evaluate, fp_at_recall
from .experiments import ablation_table, run_suite
from .inference import detect_arrays
from .matcher import format_ratio, match
from .toy_detector import ToyModel, TrainingDiverged, featurize, make_item, train

logger = logging.getLogger("cascadet")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_IO = 3


class InputError(Exception):
    """An input file is missing, unreadable or malformed."""


# ---------------------------------------------------------------------------
# helpers


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def _config(args, default: Callable[[], ExperimentConfig] = ExperimentConfig) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else default()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _read_scene_file(path: str) -> list[Scene]:
    try:
        with open(path) as fh:
            if path.endswith(".txt"):
                return parse_wider(fh)
            return read_scenes(fh)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from exc
    except (ValueError, KeyError) as exc:
        raise InputError(f"{path}: {exc}") from exc


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if v is None else v for v in row])
    return buf.getvalue()


def _write_manifest(path: Path, command: str, cfg: ExperimentConfig, args, outputs: Sequence[Path]) -> None:
    skip = {"func", "command", "verbose"}
    manifest = {
        "command": command,
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k not in skip},
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "outputs": sorted(p.name for p in outputs),
        "versions": {
            "artifact": _version(),
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    _write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _manifest_for(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _pool_map(fn, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_anchors(args) -> int:
    cfg = _config(args)
    if args.input_size is not None:
        cfg = replace(cfg, pyramid=replace(cfg.pyramid, input_size=args.input_size))
    pyr = generate(cfg.pyramid)
    names = pyr.level_names
    out = Path(args.out)
    lines = []
    for i, box in enumerate(pyr.boxes.tolist()):
        lines.append(
            json.dumps(
                {
                    "type": "anchor",
                    "index": i,
                    "level": names[pyr.level[i]],
                    "x_min": box[0],
                    "y_min": box[1],
                    "x_max": box[2],
                    "y_max": box[3],
                }
            )
        )
    total = len(pyr)
    for name, count in pyr.level_counts().items():
        lines.append(json.dumps({"type": "level", "level": name, "count": count, "fraction": count / total}))
    split = {
        "stc": [n for n in names if n in cfg.cascade.stc_levels],
        "rest": [n for n in names if n not in cfg.cascade.stc_levels],
    }
    split = {k: v for k, v in split.items() if v}
    report = level_population_report(pyr, split)
    lines.append(json.dumps({"type": "population", "total": total, **report}))
    _write_text(out, "\n".join(lines) + "\n")
    _write_manifest(_manifest_for(out), "gen-anchors", cfg, args, [out])
    print(f"{total} anchors; " + ", ".join(f"{k} {100 * v:.2f}%" for k, v in report.items()))
    return EXIT_OK


def cmd_match_stats(args) -> int:
    cfg = _config(args)
    scenes = _read_scene_file(args.scenes)
    pyr = generate(cfg.pyramid)
    omega, _ = build_selection_sets(pyr, cfg.cascade)
    per_scene = []
    totals = {"step1": np.zeros(3, int), "step1_selected": np.zeros(3, int), "step2": np.zeros(3, int)}

    def counts(m, mask=None):
        c = m.counts(mask)
        return np.array([c["positive"], c["negative"], c["ignored"]])

    for s in scenes:
        gts = s.faces[~s.ignore]
        m1 = match(pyr.boxes, gts, cfg.cascade.step1)
        m2 = match(pyr.boxes, gts, cfg.cascade.step2)
        c = {"step1": counts(m1), "step1_selected": counts(m1, omega), "step2": counts(m2)}
        for k in totals:
            totals[k] += c[k]
        per_scene.append({"image_id": s.image_id, **{k: _count_dict(v) for k, v in c.items()}})

    def ratio(c):
        return None if c[0] == 0 else float(c[1] / c[0])

    summary = {}
    for k, c in totals.items():
        r = ratio(c)
        summary[k] = {**_count_dict(c), "ratio": r, "ratio_text": None if r is None else format_ratio(r)}
    doc = {"scenes": per_scene, "total": summary}
    out = Path(args.out)
    _write_text(out, json.dumps(doc, indent=2, sort_keys=True) + "\n")
    _write_manifest(_manifest_for(out), "match-stats", cfg, args, [out])
    for k, v in summary.items():
        print(f"{k}: {v['positive']} pos, {v['negative']} neg, {v['ignored']} ignored, {v['ratio_text']}")
    return EXIT_OK


def _count_dict(c) -> dict:
    return {"positive": int(c[0]), "negative": int(c[1]), "ignored": int(c[2])}


def cmd_synth(args) -> int:
    cfg = _config(args)
    n = args.n
    scenes = synth_scenes(n, cfg.seed, cfg.synth)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        write_scenes(scenes, fh)
    _write_manifest(_manifest_for(out), "synth", cfg, args, [out])
    print(f"wrote {len(scenes)} scenes to {out}")
    return EXIT_OK


def cmd_parse_wider(args) -> int:
    cfg = _config(args)
    try:
        with open(args.gt) as fh:
            scenes = parse_wider(fh)
    except OSError as exc:
        raise InputError(f"cannot read {args.gt}: {exc.strerror or exc}") from exc
    except WiderParseError as exc:
        raise InputError(f"{args.gt}: {exc}") from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        write_scenes(scenes, fh)
    _write_manifest(_manifest_for(out), "parse-wider", cfg, args, [out])
    print(f"parsed {len(scenes)} images, {sum(len(s.faces) for s in scenes)} faces")
    return EXIT_OK


def _featurize_job(job):
    scene, pyr_cfg, seed, params = job
    return featurize(scene, generate(pyr_cfg), seed, params)


def cmd_train_toy(args) -> int:
    cfg = _config(args)
    hyper = cfg.hyper
    if args.epochs is not None:
        hyper = replace(hyper, epochs=args.epochs)
    scenes = _read_scene_file(args.scenes)
    if not scenes:
        raise InputError(f"{args.scenes}: no scenes")
    pyr = generate(cfg.pyramid)
    jobs = [(s, cfg.pyramid, [cfg.seed, 0, k], cfg.features) for k, s in enumerate(scenes)]
    feats = _pool_map(_featurize_job, jobs, args.jobs)
    items = [make_item(s, pyr, f, cfg.cascade) for s, f in zip(scenes, feats)]
    model, trace = train(items, cfg.cascade, hyper)
    out_dir = Path(args.out_dir)
    model_path = out_dir / "model.json"
    trace_path = out_dir / "loss_trace.csv"
    _write_text(model_path, json.dumps(model.to_dict(), sort_keys=True) + "\n")
    _write_text(trace_path, _csv_text(["epoch", "loss"], [(i, repr(v)) for i, v in enumerate(trace)]))
    _write_manifest(out_dir / "manifest.json", "train-toy", cfg, args, [model_path, trace_path])
    print(f"loss {trace[0]:.6g} -> {trace[-1]:.6g} over {hyper.epochs} epochs")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _config(args)
    try:
        with open(args.model) as fh:
            model = ToyModel.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read {args.model}: {exc.strerror or exc}") from exc
    except (ValueError, KeyError) as exc:
        raise InputError(f"{args.model}: {exc}") from exc
    scenes = _read_scene_file(args.scenes)
    pyr = generate(cfg.pyramid)
    if model.dim != cfg.features.dim:
        raise ConfigError(f"model expects {model.dim} features, config gives {cfg.features.dim}")
    jobs = [(s, cfg.pyramid, [cfg.seed, 1, k], cfg.features) for k, s in enumerate(scenes)]
    feats = _pool_map(_featurize_job, jobs, args.jobs)
    lines = []
    for scene, f in zip(scenes, feats):
        outputs, _ = model.predict(f, pyr, cfg.cascade)
        boxes, scores = detect_arrays(pyr, outputs, cfg.cascade, cfg.inference, (scene.width, scene.height))
        for b, sc in zip(boxes.tolist(), scores.tolist()):
            lines.append(
                json.dumps(
                    {
                        "image_id": scene.image_id,
                        "x_min": b[0],
                        "y_min": b[1],
                        "x_max": b[2],
                        "y_max": b[3],
                        "score": sc,
                    }
                )
            )
    out = Path(args.out)
    _write_text(out, "".join(line + "\n" for line in lines))
    _write_manifest(_manifest_for(out), "infer", cfg, args, [out])
    print(f"{len(lines)} detections for {len(scenes)} images")
    return EXIT_OK


def _read_detections(path: str) -> dict[str, tuple[list, list]]:
    dets: dict[str, tuple[list, list]] = {}
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    d = json.loads(line)
                    box = [float(d[k]) for k in ("x_min", "y_min", "x_max", "y_max")]
                    score = float(d["score"])
                    key = str(d["image_id"])
                except (ValueError, KeyError, TypeError) as exc:
                    raise InputError(f"{path}: line {lineno}: bad detection record ({exc})") from exc
                boxes, scores = dets.setdefault(key, ([], []))
                boxes.append(box)
                scores.append(score)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror or exc}") from exc
    return dets


def cmd_eval(args) -> int:
    cfg = _config(args)
    ev = cfg.eval
    if args.fp_at_recall:
        try:
            levels = tuple(float(x) for x in args.fp_at_recall.split(","))
            ev = replace(ev, recall_levels=levels)
        except ValueError as exc:
            raise ConfigError(f"--fp-at-recall: {exc}") from exc
    thresholds = ev.iou_thresholds if args.iou_sweep else ev.iou_thresholds[:1]
    gts = _read_scene_file(args.gt)
    dets = _read_detections(args.dets)
    known = {s.image_id for s in gts}
    stray = sorted(set(dets) - known)
    if stray:
        raise InputError(f"{args.dets}: detections for unknown images, e.g. {stray[0]!r}")
    images = []
    for s in gts:
        boxes, scores = dets.get(s.image_id, ([], []))
        images.append(ImageResult(np.asarray(boxes, float).reshape(-1, 4), np.asarray(scores, float), s.faces, s.ignore))

    out_dir = Path(args.out_dir)
    outputs = []
    ap_rows, pr_rows = [], []
    for t in thresholds:
        curve = evaluate(images, t)
        ap_rows.append((t, repr(average_precision(curve, ev.interpolation))))
        for r, p, th in curve.points():
            pr_rows.append((t, repr(r), repr(p), repr(th)))
    ap_path = out_dir / "ap.csv"
    _write_text(ap_path, _csv_text(["iou_threshold", "ap"], ap_rows))
    pr_path = out_dir / "pr_curve.csv"
    _write_text(pr_path, _csv_text(["iou_threshold", "recall", "precision", "score"], pr_rows))
    outputs += [ap_path, pr_path]
    fp_rows = []
    if args.fp_at_recall:
        curve = evaluate(images, thresholds[0])
        fps = fp_at_recall(curve, ev.recall_levels)
        fp_rows = [(r, "unreached" if n is None else n) for r, n in zip(ev.recall_levels, fps)]
        fp_path = out_dir / "fp_at_recall.csv"
        _write_text(fp_path, _csv_text(["recall", "false_positives"], fp_rows))
        outputs.append(fp_path)
    _write_manifest(out_dir / "manifest.json", "eval", cfg, args, outputs)
    print("iou_threshold,ap")
    for t, ap in ap_rows:
        print(f"{t:g},{float(ap):.4f}")
    if fp_rows:
        print("recall,false_positives")
        for r, n in fp_rows:
            print(f"{r:g},{n}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args, reference_config)
    if args.seeds is not None:
        if args.seeds <= 0:
            raise ConfigError("--seeds must be positive")
        cfg = replace(cfg, suite=replace(cfg.suite, seeds=args.seeds))
    results = run_suite(cfg, jobs=args.jobs)
    table = ablation_table(results, cfg)
    out_dir = Path(args.out_dir)
    header = list(table[0].keys())
    table_path = out_dir / "ablation.csv"
    _write_text(table_path, _csv_text(header, [[row[h] if h == "config" else repr(row[h]) for h in header] for row in table]))

    seed_rows = []
    for r in results:
        for name, aps in r.ap.items():
            fps = r.fp[name]
            seed_rows.append(
                [r.seed, name]
                + [repr(aps[t]) for t in cfg.eval.iou_thresholds]
                + ["unreached" if n is None else n for n in fps]
            )
    seed_header = (
        ["seed", "config"]
        + [f"AP@{t:g}" for t in cfg.eval.iou_thresholds]
        + [f"FP@R{r:g}" for r in cfg.eval.recall_levels]
    )
    seeds_path = out_dir / "per_seed.csv"
    _write_text(seeds_path, _csv_text(seed_header, seed_rows))

    imb_rows = [
        [r.seed, repr(r.imbalance[0]), repr(r.imbalance[1]), format_ratio(r.imbalance[0]), format_ratio(r.imbalance[1])]
        for r in results
    ]
    imb_path = out_dir / "imbalance.csv"
    _write_text(imb_path, _csv_text(["seed", "before", "after", "before_text", "after_text"], imb_rows))
    _write_manifest(out_dir / "manifest.json", "ablate", cfg, args, [table_path, seeds_path, imb_path])

    print(" | ".join(f"{h:>9}" for h in header))
    for row in table:
        print(" | ".join(f"{row[h]:>9}" if h == "config" else f"{row[h]:9.4f}" for h in header))
    print("negative:positive before -> after first-step filtering")
    for r in results:
        print(f"  seed {r.seed}: {format_ratio(r.imbalance[0])} -> {format_ratio(r.imbalance[1])}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cascadet", description="Two-step cascade detection toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text, seed=True):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
        if seed:
            sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.set_defaults(func=func)
        return sp

    sp = add("gen-anchors", cmd_gen_anchors, "write the anchor pyramid and level populations", seed=False)
    sp.add_argument("--input-size", type=int)
    sp.add_argument("--out", required=True)

    sp = add("match-stats", cmd_match_stats, "label counts and imbalance per matching step", seed=False)
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--out", required=True)

    sp = add("synth", cmd_synth, "generate seeded synthetic scenes")
    sp.add_argument("--n", type=int, required=True)
    sp.add_argument("--out", required=True)

    sp = add("parse-wider", cmd_parse_wider, "convert WIDER FACE annotations to scenes", seed=False)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--out", required=True)

    sp = add("train-toy", cmd_train_toy, "train the toy detector")
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--jobs", type=int, default=1)

    sp = add("infer", cmd_infer, "run the detection pipeline with a trained toy model")
    sp.add_argument("--model", required=True)
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--jobs", type=int, default=1)

    sp = add("eval", cmd_eval, "score detections against ground truth", seed=False)
    sp.add_argument("--dets", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--iou-sweep", action="store_true")
    sp.add_argument("--fp-at-recall", help="comma-separated recall levels, e.g. 0.1,0.5,0.9")
    sp.add_argument("--out-dir", required=True)

    sp = add("ablate", cmd_ablate, "run the four-configuration ablation on the reference suite")
    sp.add_argument("--seeds", type=int)
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--jobs", type=int, default=1)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be at least 1")
    try:
        return args.func(args)
    except (ConfigError, KeyError) as exc:
        print(f"cascadet {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InputError as exc:
        print(f"cascadet {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"cascadet {args.command}: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO
    except (TrainingDiverged, ValueError, RuntimeError) as exc:
        print(f"cascadet {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
