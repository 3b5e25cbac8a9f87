"""Analog-to-spiking conversion: activation recording, percentile thresholds, weight transfer."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .lif import LifParams, leak_schedule
from .tensor import no_record
from .unet import Network, build, spiking_layers

DEFAULT_CAP = 1_000_000


class Reservoir:
    """Uniform fixed-size sample of a stream (Vitter's algorithm R, vectorized)."""

    def __init__(self, cap: int, rng: np.random.Generator):
        if cap < 1:
            raise ValueError("cap must be >= 1")
        self.cap = cap
        self.rng = rng
        self.buf = np.empty(0, dtype=np.float64)
        self.seen = 0

    def extend(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        room = self.cap - self.buf.size
        if room > 0:
            head, values = values[:room], values[room:]
            self.buf = np.concatenate([self.buf, head])
            self.seen += head.size
        if values.size == 0:
            return
        # Item with global index i replaces slot j ~ U{0..i} when j < cap.
        idx = self.seen + np.arange(values.size)
        j = np.floor(self.rng.random(values.size) * (idx + 1)).astype(np.int64)
        keep = j < self.cap
        slots, vals = j[keep], values[keep]
        # Later items win when a slot is hit more than once, as in the sequential loop.
        rev_slots = slots[::-1]
        uniq, first = np.unique(rev_slots, return_index=True)
        self.buf[uniq] = vals[::-1][first]
        self.seen += values.size


@dataclass
class CalibrationSet:
    samples: dict[str, np.ndarray]
    seen: dict[str, int]
    pair_count: int
    cap: int = DEFAULT_CAP
    seed: int = 0
    layers: list[str] = field(default_factory=list)


def record_activations(teacher: Network, pairs, cap: int = DEFAULT_CAP, seed: int = 0) -> CalibrationSet:
    """Collect strictly positive post-ReLU activations at every spiking-layer site."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("record_activations needs at least one pair")
    if teacher.flavor != "ann":
        raise ValueError("calibration records from the analog teacher")
    layers = spiking_layers(teacher.spec)
    rng = np.random.Generator(np.random.Philox(seed))
    reservoirs = {name: Reservoir(cap, rng) for name in layers}
    was_training = teacher.training
    teacher.training = False
    try:
        for fixed, moving in pairs:
            def capture(name, act):
                reservoirs[name].extend(act[act > 0])

            with no_record():
                teacher.forward(fixed, moving, capture=capture)
    finally:
        teacher.training = was_training
    return CalibrationSet(
        samples={n: r.buf.copy() for n, r in reservoirs.items()},
        seen={n: r.seen for n, r in reservoirs.items()},
        pair_count=len(pairs),
        cap=cap,
        seed=seed,
        layers=layers,
    )


def calibrate_thresholds(cal: CalibrationSet, p: float = 50.0) -> dict[str, float]:
    """Per-layer threshold = linear-interpolation ``p``-th percentile of positive activations."""
    if not 0.0 <= p <= 100.0:
        raise ValueError("percentile must lie in [0, 100]")
    out = {}
    for name in cal.layers or list(cal.samples):
        s = cal.samples[name]
        if s.size == 0:
            raise ValueError(f"layer {name!r} recorded no positive activations; it cannot be calibrated")
        out[name] = float(np.percentile(s, p, method="linear"))
    return out


def calibration_report(cal: CalibrationSet, thresholds: dict[str, float], p: float) -> str:
    """One JSON record per layer: sample counts, min/median/max and the chosen threshold."""
    lines = []
    for name in cal.layers or list(cal.samples):
        s = cal.samples[name]
        rec = {
            "layer": name,
            "percentile": p,
            "seen": cal.seen.get(name, s.size),
            "stored": int(s.size),
            "min": float(s.min()) if s.size else None,
            "median": float(np.median(s)) if s.size else None,
            "max": float(s.max()) if s.size else None,
            "theta": thresholds.get(name),
        }
        lines.append(json.dumps(rec, sort_keys=True))
    return "\n".join(lines) + "\n"


def transfer_weights(teacher: Network, thresholds: dict[str, float], spec=None) -> Network:
    """Build the spiking student: copy conv and BN tensors, freeze BN, set LIF parameters."""
    spec = spec or teacher.spec
    if spec.architecture_hash() != teacher.spec.architecture_hash():
        raise ValueError("teacher and student specs describe different layer shapes")
    student = build(spec, "snn", dtype=teacher.dtype)
    for key, t in teacher.params.items():
        dst = student.params[key]
        if dst.shape != t.shape:
            raise ValueError(f"{key}: teacher shape {t.shape} != student {dst.shape}")
        dst.data = t.data.copy()
    for name, bn in teacher.bns.items():
        sb = student.bns[name]
        sb.gamma.data = bn.gamma.data.copy()
        sb.beta.data = bn.beta.data.copy()
        sb.running_mean = bn.running_mean.copy()
        sb.running_var = bn.running_var.copy()
        sb.frozen = True
    enc, bott, dec = leak_schedule(spec.levels, spec.levels, spec.tau_hi, spec.tau_lo)
    for name, tau in zip(spiking_layers(spec), enc + [bott] + dec):
        if name not in thresholds:
            raise ValueError(f"no threshold for layer {name!r}")
        cout = student.params[f"{name}.weight"].shape[0]
        student.lifs[name] = LifParams.create(cout, tau, thresholds[name], spec.alpha, dtype=student.dtype)
    return student
