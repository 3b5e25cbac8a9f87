"""Training objectives: local NCC, diffusion, spike-rate balance, distillation, soft Dice."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .deform import warp_trilinear
from .tensor import Tensor, as_tensor, box_sum3d, window_counts
from .tensor import core as tc


@dataclass
class LossWeights:
    lambda_sim: float = 1.0
    lambda_reg: float = 0.1
    lambda_spk: float = 1e-4
    beta: float = 1e-2
    rho_star: float = 0.1
    lambda_distill: float = 0.0
    lambda_seg: float = 0.0
    ncc_window: int = 9
    ncc_eps: float = 1e-8
    dice_eps: float = 1e-5

    def __post_init__(self) -> None:
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if self.ncc_window % 2 == 0:
            raise ValueError("ncc_window must be odd")
        if not 0.0 <= self.rho_star <= 1.0:
            raise ValueError("rho_star must lie in [0, 1]")


def _vol4(x) -> Tensor:
    x = tc.astype(as_tensor(x), np.float64)
    if x.ndim == 3:
        return tc.reshape(x, (1,) + x.shape)
    if x.ndim == 4 and x.shape[0] == 1:
        return x
    raise ValueError(f"expected a single-channel volume, got shape {x.shape}")


def _centered(x: Tensor) -> Tensor:
    # Local NCC is unchanged by a global intensity offset; removing the global
    # mean first keeps the running-sum variances well conditioned.
    return tc.sub(x, float(np.mean(x.data, dtype=np.float64)))


def ncc_map(fixed, warped, window: int = 9, eps: float = 1e-8) -> Tensor:
    """Per-voxel local NCC over clipped cubic windows, via box sums.

    Always evaluated in float64: the running-sum variances cancel badly in
    single precision over flat regions.
    """
    F, W = _vol4(fixed), _vol4(warped)
    if F.shape != W.shape:
        raise ValueError(f"shape mismatch {F.shape} vs {W.shape}")
    if window % 2 == 0:
        raise ValueError("window must be odd")
    if window > min(F.shape[1:]):
        raise ValueError(f"window {window} exceeds the smallest volume dimension {min(F.shape[1:])}")
    F, W = _centered(F), _centered(W)
    n = window_counts(F.shape[1:], window)[None]
    sF, sW = box_sum3d(F, window), box_sum3d(W, window)
    sFF = box_sum3d(tc.square(F), window)
    sWW = box_sum3d(tc.square(W), window)
    sFW = box_sum3d(tc.mul(F, W), window)
    cross = tc.sub(sFW, tc.div(tc.mul(sF, sW), n))
    varF = tc.clamp_min(tc.sub(sFF, tc.div(tc.square(sF), n)), 0.0)
    varW = tc.clamp_min(tc.sub(sWW, tc.div(tc.square(sW), n)), 0.0)
    denom = tc.add(tc.mul(tc.sqrt(varF), tc.sqrt(varW)), eps)
    return tc.div(cross, denom)


def ncc_local(fixed, warped, window: int = 9, eps: float = 1e-8) -> Tensor:
    """Negative mean local NCC (lower is better; -1 for a perfect match)."""
    return tc.neg(tc.mean(ncc_map(fixed, warped, window, eps)))


def diffusion_reg(u) -> Tensor:
    """Sum over axes of the mean squared forward difference of the field.

    For each axis the squared differences of all channels are summed per position
    and averaged over that axis's valid (interior) difference positions.
    """
    u = u.u if hasattr(u, "u") else as_tensor(u)
    total = None
    for ax in range(1, u.ndim):
        n = u.shape[ax]
        if n < 2:
            continue
        hi = [slice(None)] * u.ndim
        lo = [slice(None)] * u.ndim
        hi[ax], lo[ax] = slice(1, None), slice(0, n - 1)
        d = tc.sub(tc.getitem(u, tuple(hi)), tc.getitem(u, tuple(lo)))
        positions = d.size // d.shape[0]
        term = tc.scale(tc.tsum(tc.square(d)), 1.0 / positions)
        total = term if total is None else tc.add(total, term)
    return total if total is not None else as_tensor(np.zeros((), dtype=u.dtype))


def spike_reg(rates, rho_star: float = 0.1, beta: float = 1e-2) -> Tensor:
    """``sum(rho) + beta * sum((rho - rho_star)**2)`` over per-layer mean rates."""
    rates = [as_tensor(r) for r in rates]
    if not rates:
        raise ValueError("spike_reg needs at least one layer rate")
    rho = tc.stack([tc.reshape(r, ()) for r in rates])
    return tc.add(tc.tsum(rho), tc.scale(tc.tsum(tc.square(tc.sub(rho, rho_star))), beta))


def kd_distill(u_snn, u_ann) -> Tensor:
    """Mean squared difference to a frozen teacher field."""
    s = u_snn.u if hasattr(u_snn, "u") else as_tensor(u_snn)
    t = u_ann.u if hasattr(u_ann, "u") else as_tensor(u_ann)
    if s.shape != t.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {t.shape}")
    return tc.mean(tc.square(tc.sub(s, t.detach())))


def soft_dice(fixed_onehot, moving_onehot, field, eps: float = 1e-5) -> Tensor:
    """``1 - mean_c (2<A_c, B_c o phi> + eps) / (|A_c| + |B_c o phi| + eps)``."""
    A, B = as_tensor(fixed_onehot), as_tensor(moving_onehot)
    if A.shape != B.shape:
        raise ValueError(f"channel/shape mismatch {A.shape} vs {B.shape}")
    if A.ndim != 4 or A.shape[0] < 1:
        raise ValueError("one-hot maps must be C x D x H x W with C >= 1")
    Bw = warp_trilinear(B, field)
    axes = (1, 2, 3)
    inter = tc.tsum(tc.mul(A, Bw), axis=axes)
    denom = tc.add(tc.add(tc.tsum(A, axis=axes), tc.tsum(Bw, axis=axes)), eps)
    dice = tc.div(tc.add(tc.scale(inter, 2.0), eps), denom)
    return tc.sub(1.0, tc.mean(dice))


_WEIGHT_OF = {
    "sim": "lambda_sim",
    "reg": "lambda_reg",
    "spk": "lambda_spk",
    "distill": "lambda_distill",
    "seg": "lambda_seg",
}
_PHASE_TERMS = {
    "ann": ("sim", "reg", "seg"),
    "snn": ("sim", "reg", "spk", "distill", "seg"),
}


def total_loss(phase: str, components: dict, weights: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of the phase's terms plus a per-term breakdown for logging."""
    if phase not in _PHASE_TERMS:
        raise ValueError(f"unknown phase {phase!r}")
    total = None
    breakdown: dict[str, float] = {}
    for name in _PHASE_TERMS[phase]:
        lam = getattr(weights, _WEIGHT_OF[name])
        value = components.get(name)
        if value is None:
            if lam != 0:
                raise ValueError(f"component {name!r} is missing but has weight {lam}")
            continue
        value = as_tensor(value)
        breakdown[name] = float(value.data)
        if lam == 0:
            continue
        term = tc.scale(value, lam)
        total = term if total is None else tc.add(total, term)
    if total is None:
        total = as_tensor(np.zeros(()))
    breakdown["total"] = float(total.data)
    return total, breakdown
