"""Desk-scale experiment: every training phase and ablation on one synthetic split.

:func:`desk_experiment` trains the analog teacher, converts it at several
threshold percentiles, fine-tunes the converted network, and runs the
from-scratch, distillation and velocity-field variants under the same budget.
It returns one JSON-serializable record with per-pair metrics for every model.
"""
from __future__ import annotations

import dataclasses
import logging
import time

import numpy as np

from .io.config import DataConfig, RunConfig
from .io.synthetic import generate_dataset
from .metrics import PairResult
from .stats import compare
from .trainer import PhasePlan, convert_phase, evaluate, mean_rate, run_phase
from .unet import build

log = logging.getLogger(__name__)


def make_splits(d: DataConfig) -> dict[str, list]:
    """Train, calibration and test pairs drawn from disjoint seed ranges."""
    n_train, n_calib, n_test = d.split()
    kw = dict(shape=(d.shape,) * 3, classes=d.classes, amplitude=d.amplitude, smoothness=d.smoothness)
    return {
        "train": generate_dataset(n_train, seed=d.seed, **kw),
        "calib": generate_dataset(n_calib, seed=d.seed + 1, **kw),
        "test": generate_dataset(n_test, seed=d.seed + 2, **kw),
    }


def summarize(results: list[PairResult]) -> dict:
    rec = {
        "dice_mean": float(np.mean([r.dice_mean for r in results])),
        "fold_percent": float(np.mean([r.fold_percent for r in results])),
        "sdlogj": float(np.mean([r.sdlogj for r in results])),
        "hd95_mean": float(np.nanmean([r.hd95_mean for r in results])),
        "per_pair_dice": {r.pair_id: r.dice_mean for r in results},
        "per_pair_fold": {r.pair_id: r.fold_percent for r in results},
    }
    if results[0].spike_rates:
        rec["mean_rate"] = mean_rate(results)
    return rec


def desk_experiment(cfg: RunConfig, percentiles=(50.0, 75.0, 90.0), kd_weight: float = 0.5) -> dict:
    """Run all phases; ``cfg.conversion.percentile`` selects the student that is fine-tuned."""
    t0 = time.perf_counter()
    splits = make_splits(cfg.data)
    train, calib, test = splits["train"], splits["calib"], splits["test"]
    out: dict = {"config_hash": cfg.hash(), "pairs": {k: len(v) for k, v in splits.items()}, "timings": {}}

    def tick(name: str) -> None:
        out["timings"][name] = round(time.perf_counter() - t0, 1)
        log.info("%s done at %.0fs", name, out["timings"][name])

    def finetune(student, weights=cfg.loss, teacher=None):
        plan = PhasePlan("snn_finetune", weights=weights, optim=cfg.snn)
        return run_phase(plan, student, train, teacher)[0]

    out["initial"] = summarize(evaluate(None, test))

    ann = build(cfg.network, "ann", seed=cfg.ann.seed)
    ann, _ = run_phase(PhasePlan("ann_warmstart", weights=cfg.loss, optim=cfg.ann), ann, train)
    out["ann"] = summarize(evaluate(ann, test))
    tick("ann")

    out["raw"], students, thresholds = {}, {}, {}
    for p in percentiles:
        student, _, th = convert_phase(ann, calib, p, seed=cfg.conversion.seed)
        students[p], thresholds[p] = student, th
        out["raw"][str(p)] = summarize(evaluate(student, test))
    out["thresholds"] = {str(p): th for p, th in thresholds.items()}
    tick("convert")

    p0 = float(cfg.conversion.percentile)
    if p0 not in students:
        students[p0], _, _ = convert_phase(ann, calib, p0, seed=cfg.conversion.seed)
        out["raw"][str(p0)] = summarize(evaluate(students[p0], test))
    out["finetuned_percentile"] = p0
    no_kd = dataclasses.replace(cfg.loss, lambda_distill=0.0)
    ft = finetune(students[p0], no_kd)
    out["finetuned"] = summarize(evaluate(ft, test))
    tick("finetune")

    scratch = build(cfg.network, "snn", seed=cfg.snn.seed)
    scratch, _ = run_phase(PhasePlan("snn_scratch", weights=no_kd, optim=cfg.snn), scratch, train)
    out["scratch"] = summarize(evaluate(scratch, test))
    tick("scratch")

    kd_student, _, _ = convert_phase(ann, calib, p0, seed=cfg.conversion.seed)
    kd = finetune(kd_student, dataclasses.replace(cfg.loss, lambda_distill=kd_weight), teacher=ann)
    out["kd"] = summarize(evaluate(kd, test)) | {"lambda_distill": kd_weight}
    tick("kd")

    vspec = dataclasses.replace(cfg.network, output_mode="velocity")
    ann_v = build(vspec, "ann", seed=cfg.ann.seed)
    ann_v, _ = run_phase(PhasePlan("ann_warmstart", weights=cfg.loss, optim=cfg.ann), ann_v, train)
    out["ann_svf"] = summarize(evaluate(ann_v, test))
    svf_student, _, _ = convert_phase(ann_v, calib, p0, seed=cfg.conversion.seed)
    out["finetuned_svf"] = summarize(evaluate(finetune(svf_student, no_kd), test))
    tick("svf")

    out["raw_vs_finetuned"] = compare(out["finetuned"]["per_pair_dice"], out["raw"][str(p0)]["per_pair_dice"],
                                      seed=cfg.conversion.seed)
    return out
