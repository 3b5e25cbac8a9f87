"""Command-line entry point: ``snnreg <command> [options]``.

Exit codes: 0 success, 1 user error (bad arguments, config or input files),
2 internal error. Failures print one JSON object on stderr::

    {"error": "ConfigError", "exit": 1, "message": "[loss] unknown keys: lamda"}
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .conversion import calibrate_thresholds, calibration_report, record_activations, transfer_weights
from .deform import warp_nearest, warp_trilinear
from .energy import energy_report, format_report
from .io.checkpoint import CheckpointError, load_network, save_network
from .io.config import ConfigError, RunConfig, dump_config, load_config
from .io.dataset import load_image_pair, read_split, write_dataset
from .io.nifti import NiftiError
from .io.volumes import write_native
from .metrics import evaluate_pair, read_results_csv, results_to_csv
from .pipeline import desk_experiment, make_splits
from .stats import compare
from .tensor import no_record
from .trainer import PhasePlan, TrainLog, evaluate, mean_rate, predict, run_phase
from .unet import LayerRecord, build

log = logging.getLogger("snnreg")


class UsageError(Exception):
    """Raised for bad command-line usage (argparse errors included)."""


USER_ERRORS = (UsageError, ConfigError, CheckpointError, NiftiError, FileNotFoundError, KeyError, ValueError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------- helpers


class Context:
    def __init__(self, args):
        self.args = args
        self.cfg: RunConfig = load_config(args.config, args.set)
        self.workdir = Path(args.workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)

    @property
    def data_dir(self) -> Path:
        return self.workdir / "data"

    def path(self, given, default: str) -> Path:
        return Path(given) if given else self.workdir / default

    def provenance(self, seed: int) -> dict:
        return {"config_hash": self.cfg.hash(), "seed": seed, "version": __version__}

    def write_log(self, name: str, train_log: TrainLog) -> Path:
        out = self.workdir / "logs" / f"{name}.jsonl"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(train_log.to_jsonl())
        return out

    def emit(self, record: dict) -> None:
        print(json.dumps(record, sort_keys=True, default=float))


def _summary(results) -> dict:
    out = {"pairs": len(results)}
    for key in ("dice_mean", "hd95_mean", "ncc", "fold_percent", "sdlogj"):
        vals = [getattr(r, key) for r in results if np.isfinite(getattr(r, key))]
        out[key] = float(np.mean(vals)) if vals else float("nan")
    if results and results[0].spike_rates:
        out["mean_rate"] = mean_rate(results)
    return out


def _mean_records(net, pairs) -> list[LayerRecord]:
    """Per-layer spike counts averaged over pairs, for the energy proxy."""
    acc: dict[str, list] = {}
    for pair in pairs:
        _, records = predict(net, pair)
        for r in records:
            acc.setdefault(r.name, []).append(r)
    return [
        LayerRecord(name, rs[0].neurons, int(round(np.mean([r.spike_count for r in rs]))),
                    float(np.mean([r.rate for r in rs])))
        for name, rs in acc.items()
    ]


def _calibrate(ctx: Context, teacher, percentile: float):
    pairs = [(p.fixed, p.moving) for p in read_split(ctx.data_dir, "calib")]
    cal = record_activations(teacher, pairs, ctx.cfg.conversion.reservoir_cap, ctx.cfg.conversion.seed)
    return cal, calibrate_thresholds(cal, percentile)


# ---------------------------------------------------------------- commands


def cmd_gen_data(ctx: Context) -> int:
    a, d = ctx.args, ctx.cfg.data
    if a.shape is not None:
        d.shape = a.shape
    if a.pairs is not None:
        d.pairs = a.pairs
    if a.seed is not None:
        d.seed = a.seed
    if a.amplitude is not None:
        d.amplitude = a.amplitude
    splits = make_splits(d)
    shape = (d.shape,) * 3
    prov = ctx.provenance(d.seed) | {"data": dataclasses.asdict(d)}
    write_dataset(ctx.data_dir, splits, prov)
    ctx.emit({"command": "gen-data", **{k: len(v) for k, v in splits.items()}, "shape": list(shape),
              "dir": str(ctx.data_dir)})
    return 0


def cmd_train_ann(ctx: Context) -> int:
    cfg = ctx.cfg
    net = build(cfg.network, "ann", seed=cfg.ann.seed)
    plan = PhasePlan("ann_warmstart", weights=cfg.loss, optim=cfg.ann)
    net, lg = run_phase(plan, net, read_split(ctx.data_dir, "train"))
    out = ctx.path(ctx.args.out, "ann.ckpt")
    save_network(out, net, "ann_warmstart", cfg.ann.seed, {"config_hash": cfg.hash()})
    ctx.emit({"command": "train-ann", "checkpoint": str(out), "log": str(ctx.write_log("train-ann", lg)),
              "steps": len(lg.records), "final": lg.records[-1]})
    return 0


def cmd_calibrate(ctx: Context) -> int:
    p = ctx.args.percentile if ctx.args.percentile is not None else ctx.cfg.conversion.percentile
    teacher, _ = load_network(ctx.path(ctx.args.checkpoint, "ann.ckpt"))
    cal, thresholds = _calibrate(ctx, teacher, p)
    (ctx.workdir / "calibration.jsonl").write_text(calibration_report(cal, thresholds, p))
    (ctx.workdir / "thresholds.json").write_text(
        json.dumps({"percentile": p, "thresholds": thresholds}, indent=2, sort_keys=True) + "\n"
    )
    ctx.emit({"command": "calibrate", "percentile": p, "thresholds": thresholds})
    return 0


def cmd_convert(ctx: Context) -> int:
    cfg = ctx.cfg
    teacher, _ = load_network(ctx.path(ctx.args.checkpoint, "ann.ckpt"))
    th_path = ctx.workdir / "thresholds.json"
    if ctx.args.percentile is None and th_path.exists():
        stored = json.loads(th_path.read_text())
        p, thresholds = stored["percentile"], stored["thresholds"]
    else:
        p = ctx.args.percentile if ctx.args.percentile is not None else cfg.conversion.percentile
        _, thresholds = _calibrate(ctx, teacher, p)
    spec = dataclasses.replace(teacher.spec, timesteps=cfg.network.timesteps)
    student = transfer_weights(teacher, thresholds, spec)
    out = ctx.path(ctx.args.out, "snn_raw.ckpt")
    save_network(out, student, "convert", cfg.conversion.seed, {"percentile": p, "config_hash": cfg.hash()})
    ctx.emit({"command": "convert", "checkpoint": str(out), "percentile": p, "timesteps": spec.timesteps})
    return 0


def cmd_finetune(ctx: Context) -> int:
    cfg = ctx.cfg
    net, _ = load_network(ctx.path(ctx.args.checkpoint, "snn_raw.ckpt"))
    teacher = None
    if cfg.loss.lambda_distill > 0:
        teacher, _ = load_network(ctx.path(ctx.args.teacher, "ann.ckpt"))
    plan = PhasePlan("snn_finetune", weights=cfg.loss, optim=cfg.snn)
    net, lg = run_phase(plan, net, read_split(ctx.data_dir, "train"), teacher)
    out = ctx.path(ctx.args.out, "snn_finetuned.ckpt")
    save_network(out, net, "snn_finetune", cfg.snn.seed, {"config_hash": cfg.hash()})
    ctx.emit({"command": "finetune", "checkpoint": str(out), "log": str(ctx.write_log("finetune", lg)),
              "steps": len(lg.records)})
    return 0


def cmd_train_scratch(ctx: Context) -> int:
    cfg = ctx.cfg
    net = build(cfg.network, "snn", seed=cfg.snn.seed)
    weights = dataclasses.replace(cfg.loss, lambda_distill=0.0)
    plan = PhasePlan("snn_scratch", weights=weights, optim=cfg.snn)
    net, lg = run_phase(plan, net, read_split(ctx.data_dir, "train"))
    out = ctx.path(ctx.args.out, "snn_scratch.ckpt")
    save_network(out, net, "snn_scratch", cfg.snn.seed, {"config_hash": cfg.hash()})
    ctx.emit({"command": "train-scratch", "checkpoint": str(out), "log": str(ctx.write_log("train-scratch", lg)),
              "steps": len(lg.records)})
    return 0


def cmd_register(ctx: Context) -> int:
    a = ctx.args
    net, _ = load_network(a.checkpoint)
    pair = load_image_pair(a.fixed, a.moving, a.fixed_labels, a.moving_labels)
    u, records = predict(net, pair)
    with no_record():
        warped = warp_trilinear(pair.moving.astype(np.float64), u).data
    out = Path(a.out)
    write_native(out / "warped", warped, "f32")
    for axis in range(3):
        write_native(out / f"u{axis}", u[axis], "f32")
    warped_seg = warp_nearest(pair.moving_labels, u)
    if a.moving_labels:
        write_native(out / "warped_labels", warped_seg, "i16")
    result = evaluate_pair("000", pair.fixed, pair.fixed_labels, warped, warped_seg, u,
                           range(1, pair.classes + 1), ctx.cfg.loss.ncc_window,
                           {r.name: r.rate for r in records} if net.flavor == "snn" else {})
    (out / "result.csv").write_text(results_to_csv([result], ctx.provenance(-1)))
    ctx.emit({"command": "register", "out": str(out), **_summary([result])})
    return 0


def cmd_evaluate(ctx: Context) -> int:
    a = ctx.args
    if a.identity == bool(a.checkpoint):
        raise UsageError("give exactly one of --checkpoint or --identity")
    net, seed = None, -1
    if a.checkpoint:
        net, meta = load_network(a.checkpoint)
        seed = meta.get("seed", -1)
    results = evaluate(net, read_split(ctx.data_dir, a.split), ctx.cfg.loss.ncc_window)
    prov = ctx.provenance(seed) | {"checkpoint": a.checkpoint or "identity", "split": a.split}
    out = ctx.path(a.out, "results.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(results_to_csv(results, prov))
    ctx.emit({"command": "evaluate", "csv": str(out), **_summary(results)})
    return 0


def cmd_energy_report(ctx: Context) -> int:
    a = ctx.args
    net, _ = load_network(a.checkpoint)
    if net.flavor != "snn":
        raise UsageError("energy-report needs a spiking checkpoint")
    pairs = read_split(ctx.data_dir, a.split)
    report = energy_report(net.spec, pairs[0].fixed.shape, _mean_records(net, pairs),
                           resolution_scaled=not a.literal_fan_in)
    report["provenance"] = ctx.provenance(-1) | {"checkpoint": a.checkpoint}
    text = format_report(report)
    if a.out:
        Path(a.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_stats_compare(ctx: Context) -> int:
    a = ctx.args
    rows_a = read_results_csv(Path(a.a).read_text())
    rows_b = read_results_csv(Path(a.b).read_text())
    if not rows_a or a.metric not in next(iter(rows_a.values())):
        raise UsageError(f"metric {a.metric!r} not found in {a.a}")
    xa = {k: v[a.metric] for k, v in rows_a.items()}
    xb = {k: v[a.metric] for k, v in rows_b.items()}
    rec = compare(xa, xb, a.flips, a.boot, a.seed, a.tests)
    rec.update(metric=a.metric, a=a.a, b=a.b, **ctx.provenance(a.seed))
    ctx.emit(rec)
    return 0


def cmd_sweep(ctx: Context) -> int:
    cfg = ctx.cfg
    teacher, _ = load_network(ctx.path(ctx.args.checkpoint, "ann.ckpt"))
    pairs = read_split(ctx.data_dir, ctx.args.split)
    calib = [(p.fixed, p.moving) for p in read_split(ctx.data_dir, "calib")]
    cal = record_activations(teacher, calib, cfg.conversion.reservoir_cap, cfg.conversion.seed)
    rows = []
    for pct in cfg.sweep.percentiles:
        thresholds = calibrate_thresholds(cal, pct)
        for steps in cfg.sweep.timesteps:
            spec = dataclasses.replace(teacher.spec, timesteps=int(steps))
            student = transfer_weights(teacher, thresholds, spec)
            results = evaluate(student, pairs, cfg.loss.ncc_window)
            rep = energy_report(spec, pairs[0].fixed.shape, _mean_records(student, pairs))
            rows.append({"timesteps": int(steps), "percentile": float(pct), "dice_mean": _summary(results)["dice_mean"],
                         "mean_rate": mean_rate(results), "analytical_reduction": rep["analytical_reduction"],
                         "projected_reduction": rep["projected_reduction"]})
    for r in rows:
        r["pareto"] = not any(
            o["dice_mean"] >= r["dice_mean"] and o["projected_reduction"] >= r["projected_reduction"]
            and (o["dice_mean"] > r["dice_mean"] or o["projected_reduction"] > r["projected_reduction"])
            for o in rows
        )
    out = ctx.path(ctx.args.out, "sweep.csv")
    cols = list(rows[0])
    lines = [f"# {k}={v}" for k, v in ctx.provenance(cfg.conversion.seed).items()]
    lines.append(",".join(cols))
    lines += [",".join(str(r[c]) for c in cols) for r in rows]
    out.write_text("\n".join(lines) + "\n")
    ctx.emit({"command": "sweep", "csv": str(out), "points": len(rows), "pareto": sum(r["pareto"] for r in rows)})
    return 0


def cmd_reproduce(ctx: Context) -> int:
    record = desk_experiment(ctx.cfg, kd_weight=ctx.args.kd_weight)
    record["provenance"] = ctx.provenance(ctx.cfg.data.seed)
    out = ctx.path(ctx.args.out, "desk_experiment.json")
    out.write_text(json.dumps(record, indent=2, sort_keys=True, default=float) + "\n")
    ctx.emit({"command": "reproduce", "json": str(out), "timings": record["timings"]})
    return 0


def cmd_show_config(ctx: Context) -> int:
    sys.stdout.write(dump_config(ctx.cfg))
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="snnreg", description="Spiking U-Net deformable registration toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI-style run configuration")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value (repeatable)")
    common.add_argument("--workdir", default="run", help="directory for data, checkpoints and logs (default: run)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="generate synthetic pairs")
    p.add_argument("--shape", type=int)
    p.add_argument("--pairs", type=int, help="total pairs across train/calib/test")
    p.add_argument("--seed", type=int)
    p.add_argument("--amplitude", type=float, help="peak velocity norm in voxels")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-ann", parents=[common], help="analog warm-start training")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_ann)

    for name, func, help_ in (("calibrate", cmd_calibrate, "record activations and compute thresholds"),
                              ("convert", cmd_convert, "build the spiking student from the analog teacher")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--checkpoint", help="analog checkpoint (default: WORKDIR/ann.ckpt)")
        p.add_argument("--percentile", type=float)
        if name == "convert":
            p.add_argument("--out")
        p.set_defaults(func=func)

    p = sub.add_parser("finetune", parents=[common], help="surrogate-gradient fine-tuning of a converted network")
    p.add_argument("--checkpoint", help="converted checkpoint (default: WORKDIR/snn_raw.ckpt)")
    p.add_argument("--teacher", help="analog teacher for distillation (default: WORKDIR/ann.ckpt)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("train-scratch", parents=[common], help="train a spiking network from random init")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_scratch)

    p = sub.add_parser("register", parents=[common], help="register one image pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--fixed-labels")
    p.add_argument("--moving-labels")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("evaluate", parents=[common], help="per-pair metrics CSV over a split")
    p.add_argument("--checkpoint")
    p.add_argument("--identity", action="store_true", help="evaluate the zero field")
    p.add_argument("--split", default="test", choices=("train", "calib", "test"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("energy-report", parents=[common], help="proxy energy accounting for a spiking checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=("train", "calib", "test"))
    p.add_argument("--literal-fan-in", action="store_true", help="use sum(Cout*k^3) fan-out without resolution scaling")
    p.add_argument("--out")
    p.set_defaults(func=cmd_energy_report)

    p = sub.add_parser("stats-compare", parents=[common], help="paired tests between two results CSVs")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--metric", default="dice_mean")
    p.add_argument("--flips", type=int, default=20000)
    p.add_argument("--boot", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tests", type=int, default=1, help="number of comparisons for Bonferroni")
    p.set_defaults(func=cmd_stats_compare)

    p = sub.add_parser("sweep", parents=[common], help="timesteps x percentile sweep of raw conversion")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test", choices=("train", "calib", "test"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("reproduce", parents=[common], help="run every phase and ablation on one synthetic split")
    p.add_argument("--kd-weight", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("show-config", parents=[common], help="print the effective configuration")
    p.set_defaults(func=cmd_show_config)
    return parser


def _fail(exc: BaseException, code: int) -> int:
    msg = str(exc) if not isinstance(exc, KeyError) else str(exc.args[0] if exc.args else exc)
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "exit": code, "message": msg}, sort_keys=True) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(Context(args))
    except USER_ERRORS as exc:
        return _fail(exc, 1)
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports every failure as one line
        return _fail(exc, 2)


if __name__ == "__main__":
    sys.exit(main())
