"""The synthetic reference suite: train the toy detector under the four
cascade configurations on seeded scenes and compare them on held-out scenes.

Per seed, one set of training and test scenes (and their features) is shared
by all configurations, so differences come from the cascade alone.
"""

from __future__ import annotations

import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .anchors import generate
from .cascade import CascadeConfig, assemble_batch, concat_batches, imbalance_before_after
from .config import ExperimentConfig
from .dataio import synth_scenes
from .evaluation import ImageResult, ap_iou_sweep, evaluate, fp_at_recall
from .inference import detect_arrays
from .toy_detector import featurize, make_item, train

logger = logging.getLogger(__name__)

ABLATIONS = ("baseline", "+STC", "+STR", "+STC+STR")


def ablation_cascades(base: CascadeConfig) -> dict[str, CascadeConfig]:
    """The four configurations derived from ``base``: each two-step part is
    either kept as configured or switched off (empty level set)."""
    off_stc = dataclasses.replace(base, stc_levels=())
    return {
        "baseline": dataclasses.replace(off_stc, str_levels=()),
        "+STC": dataclasses.replace(base, str_levels=()),
        "+STR": off_stc,
        "+STC+STR": base,
    }


@dataclass(frozen=True)
class SeedResult:
    """Scores of every configuration on one seed.

    Attributes:
        ap: configuration -> {IoU threshold: AP}.
        fp: configuration -> false positives at the configured recall levels
            (``None`` where a level is never reached), at the first IoU
            threshold.
        imbalance: negatives per positive on the test scenes before and after
            the first-step filter of the +STC model.
        loss_traces: configuration -> training loss trace.
    """

    seed: int
    ap: dict[str, dict[float, float]]
    fp: dict[str, list[int | None]]
    imbalance: tuple[float, float]
    loss_traces: dict[str, list[float]]

    def mean_ap(self, name: str) -> float:
        values = list(self.ap[name].values())
        return float(np.mean(values)) if values else 0.0


def _scene_seed(base: int, seed: int, part: int) -> list[int]:
    return [base, seed, part]


def run_seed(config: ExperimentConfig, seed: int, names: Sequence[str] = ABLATIONS) -> SeedResult:
    """Train and score the requested configurations on one seed."""
    pyramid = generate(config.pyramid)
    suite = config.suite
    train_scenes = synth_scenes(suite.train_scenes, _scene_seed(config.seed, seed, 0), config.synth)
    test_scenes = synth_scenes(suite.test_scenes, _scene_seed(config.seed, seed, 1), config.synth)
    train_feats = [
        featurize(s, pyramid, [config.seed, seed, 0, k], config.features) for k, s in enumerate(train_scenes)
    ]
    test_feats = [
        featurize(s, pyramid, [config.seed, seed, 1, k], config.features) for k, s in enumerate(test_scenes)
    ]
    cascades = ablation_cascades(config.cascade)
    size = (config.synth.image_size, config.synth.image_size)
    ap, fp, traces = {}, {}, {}
    imbalance = (float("nan"), float("nan"))
    for name in names:
        cascade = cascades[name]
        items = [make_item(s, pyramid, f, cascade) for s, f in zip(train_scenes, train_feats)]
        model, trace = train(items, cascade, config.hyper)
        traces[name] = trace
        images, batches = [], []
        for scene, feats in zip(test_scenes, test_feats):
            outputs, _ = model.predict(feats, pyramid, cascade)
            boxes, scores = detect_arrays(pyramid, outputs, cascade, config.inference, size)
            images.append(ImageResult(boxes, scores, scene.faces, scene.ignore))
            if name == "+STC":
                batches.append(assemble_batch(pyramid, scene.faces[~scene.ignore], outputs, cascade))
        ap[name] = ap_iou_sweep(images, config.eval)
        curve = evaluate(images, config.eval.iou_thresholds[0])
        fp[name] = fp_at_recall(curve, config.eval.recall_levels)
        if batches:
            imbalance = imbalance_before_after(concat_batches(batches))
        logger.info("seed %d %s: AP %s", seed, name, {k: round(v, 4) for k, v in ap[name].items()})
    return SeedResult(seed, ap, fp, imbalance, traces)


def _run_seed_args(args):
    return run_seed(*args)


def run_suite(
    config: ExperimentConfig,
    seeds: Sequence[int] | None = None,
    names: Sequence[str] = ABLATIONS,
    jobs: int = 1,
) -> list[SeedResult]:
    """Run :func:`run_seed` for every seed; results are in seed order and do
    not depend on ``jobs``."""
    if seeds is None:
        seeds = range(config.suite.seeds)
    tasks = [(config, s, tuple(names)) for s in seeds]
    if jobs <= 1 or len(tasks) <= 1:
        return [_run_seed_args(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_seed_args, tasks))


def ablation_table(results: Sequence[SeedResult], config: ExperimentConfig) -> list[dict]:
    """One row per configuration: AP per IoU threshold and their mean, each
    averaged over seeds."""
    rows = []
    names = [n for n in ABLATIONS if results and n in results[0].ap]
    for name in names:
        row: dict = {"config": name}
        for t in config.eval.iou_thresholds:
            row[f"AP@{t:g}"] = float(np.mean([r.ap[name][t] for r in results]))
        row["mean_AP"] = float(np.mean([r.mean_ap(name) for r in results]))
        rows.append(row)
    return rows
