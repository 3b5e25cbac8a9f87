"""Optimization (Adam, cosine decay, global-norm clipping) and phase orchestration."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import losses
from .conversion import calibrate_thresholds, record_activations, transfer_weights
from .deform import warp_nearest, warp_trilinear
from .metrics import PairResult, evaluate_pair
from .tensor import NonFiniteError, Tape, no_record
from .unet import Network, NetworkSpec, build, spiking_layers

log = logging.getLogger(__name__)

PHASES = ("ann_warmstart", "convert", "snn_finetune", "snn_scratch")


@dataclass
class OptimConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    eta_min: float = 1e-6
    epochs: int = 60
    clip_norm: float = 1.0
    batch_size: int = 1
    seed: int = 42

    def __post_init__(self) -> None:
        self.betas = tuple(float(b) for b in self.betas)
        if not self.lr > self.eta_min >= 0:
            raise ValueError("need lr > eta_min >= 0")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if self.batch_size != 1:
            raise ValueError("only batch size 1 is supported")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    skipped: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> bool:
    """Bias-corrected Adam update in place. Returns False (and changes nothing) on a non-finite gradient."""
    if any(not np.isfinite(g).all() for g in grads.values()):
        state.skipped += 1
        log.warning("non-finite gradient; optimizer step %d skipped", state.step + 1)
        return False
    b1, b2 = betas
    state.step += 1
    t = state.step
    for name, g in grads.items():
        p = params[name]
        g = np.asarray(g, dtype=np.float64)
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        data = p if isinstance(p, np.ndarray) else p.data
        data -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(data.dtype)
    return True


def cosine_lr(step: int, total_steps: int, lr0: float, eta_min: float) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError("step must lie in [0, total_steps]")
    return eta_min + 0.5 * (lr0 - eta_min) * (1 + math.cos(math.pi * step / total_steps))


def clip_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale all gradients by ``max_norm / norm`` when the global l2 norm exceeds ``max_norm``."""
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if norm > max_norm:
        s = max_norm / norm
        return {k: g * s for k, g in grads.items()}, norm
    return dict(grads), norm


@dataclass
class PhasePlan:
    phase: str
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    optim: OptimConfig = field(default_factory=OptimConfig)
    percentile: float = 50.0
    checkpoint_in: str | None = None
    checkpoint_out: str | None = None

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")

    def frozen(self) -> set[str]:
        """Parameter kinds held fixed during the phase."""
        return {"bn"} if self.phase == "snn_finetune" else set()


@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def append(self, rec: dict) -> None:
        self.records.append(rec)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


def _onehot(labels: np.ndarray, classes: int, dtype) -> np.ndarray:
    return np.stack([(labels == c) for c in range(1, classes + 1)]).astype(dtype)


def _step_loss(net: Network, pair, plan: PhasePlan, teacher: Network | None):
    w = plan.weights
    F = np.asarray(pair.fixed, dtype=net.dtype)
    M = np.asarray(pair.moving, dtype=net.dtype)
    u, records = net.forward(F, M)
    warped = warp_trilinear(M, u)
    comps = {"sim": losses.ncc_local(F, warped, w.ncc_window, w.ncc_eps)}
    reg_target = net.last_velocity if net.spec.output_mode == "velocity" else u
    comps["reg"] = losses.diffusion_reg(reg_target)
    kind = "snn" if net.flavor == "snn" else "ann"
    if kind == "snn":
        comps["spk"] = losses.spike_reg(net.layer_rates(), w.rho_star, w.beta)
    if w.lambda_distill > 0:
        if teacher is None:
            raise ValueError("distillation needs a teacher network")
        with no_record():
            u_t, _ = teacher.forward(F, M)
        comps["distill"] = losses.kd_distill(u, u_t)
    if w.lambda_seg > 0:
        A = _onehot(pair.fixed_labels, pair.classes, net.dtype)
        B = _onehot(pair.moving_labels, pair.classes, net.dtype)
        comps["seg"] = losses.soft_dice(A, B, u, w.dice_eps)
    total, breakdown = losses.total_loss(kind, comps, w)
    return total, breakdown, records


def run_phase(plan: PhasePlan, net: Network, pairs, teacher: Network | None = None,
              train_log: TrainLog | None = None, max_bad_steps: int = 10) -> tuple[Network, TrainLog]:
    """Train ``net`` in place for ``plan.optim.epochs`` passes over ``pairs``."""
    if plan.phase == "convert":
        raise ValueError("use convert_phase for the conversion step")
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no training pairs")
    if plan.phase == "ann_warmstart" and net.flavor != "ann":
        raise ValueError("ann_warmstart trains the analog flavor")
    if plan.phase in ("snn_finetune", "snn_scratch") and net.flavor != "snn":
        raise ValueError(f"{plan.phase} trains the spiking flavor")
    if plan.phase == "snn_finetune":
        for bn in net.bns.values():
            bn.frozen = True
    cfg = plan.optim
    train_log = train_log or TrainLog()
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    state = AdamState()
    total_steps = cfg.epochs * len(pairs)
    params = net.named_parameters()
    names = sorted(params)
    step = 0
    bad = 0
    net.training = True
    try:
        for epoch in range(cfg.epochs):
            for idx in rng.permutation(len(pairs)):
                lr = cosine_lr(step, total_steps, cfg.lr, cfg.eta_min)
                rec = {"phase": plan.phase, "epoch": epoch, "step": step, "pair": int(idx), "lr": lr}
                try:
                    with Tape() as tape:
                        loss, breakdown, records = _step_loss(net, pairs[idx], plan, teacher)
                    grads = dict(zip(names, tape.gradient(loss, [params[n] for n in names])))
                    if any(not np.isfinite(g).all() for g in grads.values()):
                        raise NonFiniteError("non-finite gradient")
                except NonFiniteError as exc:
                    bad += 1
                    state.skipped += 1
                    rec.update(skipped=True, error=str(exc))
                    train_log.append(rec)
                    log.warning("step %d skipped: %s", step, exc)
                    if bad >= max_bad_steps:
                        raise RuntimeError(
                            f"{bad} consecutive non-finite steps in {plan.phase}; last record: {json.dumps(rec)}"
                        ) from exc
                    step += 1
                    continue
                bad = 0
                grads, gnorm = clip_global_norm(grads, cfg.clip_norm)
                adam_step(params, grads, state, lr, cfg.betas, cfg.eps)
                net.clamp_lif_()
                rec.update(breakdown)
                rec["grad_norm"] = gnorm
                if net.flavor == "snn":
                    rec["rates"] = {r.name: r.rate for r in records}
                train_log.append(rec)
                step += 1
    finally:
        net.training = False
    return net, train_log


def convert_phase(teacher: Network, calibration_pairs, percentile: float = 50.0, spec: NetworkSpec | None = None,
                  seed: int = 0):
    """Record teacher activations, calibrate thresholds and build the spiking student."""
    pairs = [(np.asarray(p.fixed, teacher.dtype), np.asarray(p.moving, teacher.dtype)) for p in calibration_pairs]
    cal = record_activations(teacher, pairs, seed=seed)
    thresholds = calibrate_thresholds(cal, percentile)
    return transfer_weights(teacher, thresholds, spec), cal, thresholds


def predict(net: Network, pair) -> tuple[np.ndarray, list]:
    with no_record():
        u, records = net.forward(np.asarray(pair.fixed, net.dtype), np.asarray(pair.moving, net.dtype))
    return u.data.astype(np.float64), records


def evaluate(net: Network | None, pairs, window: int = 9) -> list[PairResult]:
    """Per-pair metrics; ``net=None`` evaluates the initial (identity) alignment."""
    out = []
    for i, pair in enumerate(pairs):
        if net is None:
            u, records = np.zeros((3,) + pair.fixed.shape), []
        else:
            u, records = predict(net, pair)
        with no_record():
            warped = warp_trilinear(np.asarray(pair.moving, np.float64), u).data
        warped_seg = warp_nearest(pair.moving_labels, u)
        rates = {r.name: r.rate for r in records} if net is not None and net.flavor == "snn" else {}
        out.append(
            evaluate_pair(f"{i:03d}", pair.fixed, pair.fixed_labels, warped, warped_seg, u,
                          range(1, pair.classes + 1), window, rates)
        )
    return out


def mean_rate(results: list[PairResult]) -> float:
    """Network-wide mean spike rate, averaged over layers then pairs."""
    return float(np.mean([np.mean(list(r.spike_rates.values())) for r in results]))
