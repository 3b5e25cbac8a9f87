"""Leaky integrate-and-fire dynamics with a fast-sigmoid surrogate gradient.

Per step, with membrane ``v`` (zero before the first step)::

    u_t = tau * v_{t-1} + I_t          # leaky integration
    s_t = 1[u_t >= theta]              # binary spike
    v_t = u_t * (1 - s_t)              # reset to zero where a spike fired

On the backward pass the Heaviside is replaced by the derivative of
``sigmoid(alpha * (u - theta))``. The same surrogate is used for the
``s_t`` that appears inside the reset factor (straight-through).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .tensor import Tensor, as_tensor, make_result
from .tensor import core as tc

_ACC = np.float64
SPIKE_MODES = ("heaviside", "sigmoid")


@dataclass
class LifParams:
    """Leak per channel, threshold per layer, surrogate steepness."""

    tau: Tensor
    theta: Tensor
    alpha: float = 10.0
    learn_tau: bool = True
    learn_theta: bool = True

    def __post_init__(self) -> None:
        self.tau = as_tensor(self.tau)
        self.theta = as_tensor(self.theta)
        self.tau.requires_grad = self.learn_tau
        self.theta.requires_grad = self.learn_theta
        self.validate()

    @classmethod
    def create(cls, channels: int, tau: float, theta: float, alpha: float = 10.0, dtype=None, **flags) -> "LifParams":
        dtype = dtype or tc.default_dtype()
        return cls(
            tau=Tensor(np.full(channels, tau, dtype=dtype)),
            theta=Tensor(np.asarray(theta, dtype=dtype)),
            alpha=alpha,
            **flags,
        )

    def validate(self) -> None:
        tau = self.tau.data
        if tau.ndim != 1:
            raise ValueError("tau must be a per-channel vector")
        if not ((tau > 0) & (tau <= 1)).all():
            raise ValueError("tau must lie in (0, 1]")
        if self.theta.size != 1 or not float(self.theta.data) > 0:
            raise ValueError("theta must be a positive scalar")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    def clamp_(self, tau_min: float = 0.01, theta_min: float = 1e-3) -> None:
        """Project onto the admissible set after an optimizer step."""
        np.clip(self.tau.data, tau_min, 1.0, out=self.tau.data)
        np.maximum(self.theta.data, theta_min, out=self.theta.data)


@dataclass
class LifState:
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, shape, dtype=None) -> "LifState":
        return cls(np.zeros(shape, dtype=dtype or tc.default_dtype()), 0)


@dataclass
class LifTensorState:
    """Membrane carried as a tape tensor, for the step-by-step composed path."""

    v: Tensor
    t: int = 0
    spikes: list = field(default_factory=list)


def surrogate_grad(v, theta, alpha: float = 10.0):
    """``alpha * sigma(alpha (v - theta)) * (1 - sigma(alpha (v - theta)))`` in float64."""
    z = alpha * (np.asarray(v, dtype=_ACC) - np.asarray(theta, dtype=_ACC))
    s = expit(z)
    return alpha * s * (1.0 - s)


def _fire(u: np.ndarray, theta, alpha: float, mode: str) -> np.ndarray:
    if mode == "heaviside":
        return (u >= theta).astype(_ACC)
    return expit(alpha * (u - theta))


def spike_fn(u, theta, alpha: float = 10.0, mode: str = "heaviside") -> Tensor:
    """Spike nonlinearity with surrogate backward.

    ``mode="sigmoid"`` replaces the forward by its smooth relaxation, whose exact
    derivative is the surrogate; used to check the surrogate path numerically.
    """
    u, theta = as_tensor(u), as_tensor(theta)
    th = theta.data.astype(_ACC)
    s = _fire(u.data.astype(_ACC), th, alpha, mode).astype(u.dtype)

    def back(g):
        sg = surrogate_grad(u.data, th, alpha) * g
        return sg.astype(u.dtype), tc._unbroadcast(-sg, theta.shape).astype(theta.dtype)

    return make_result("spike", s, (u, theta), back)


def _channel_view(tau: np.ndarray, ndim: int) -> np.ndarray:
    return tau.reshape((-1,) + (1,) * (ndim - 1))


def lif_step(state: LifTensorState, current, params: LifParams, mode: str = "heaviside"):
    """One composed LIF step on the tape. Returns ``(spikes, new_state)``."""
    current = as_tensor(current)
    if current.shape != state.v.shape:
        raise ValueError(f"current shape {current.shape} does not match membrane {state.v.shape}")
    tau = tc.reshape(params.tau, (-1,) + (1,) * (current.ndim - 1))
    u = tc.add(tc.mul(tau, state.v), current)
    s = spike_fn(u, params.theta, params.alpha, mode)
    v = tc.mul(u, tc.sub(1.0, s))
    return s, LifTensorState(v, state.t + 1, state.spikes + [s])


def lif_step_array(state: LifState, current: np.ndarray, tau: np.ndarray, theta: float) -> tuple[np.ndarray, LifState]:
    """Forward-only LIF step on plain arrays (reset is exact)."""
    if current.shape != state.v.shape:
        raise ValueError(f"current shape {current.shape} does not match membrane {state.v.shape}")
    u = _channel_view(np.asarray(tau), current.ndim) * state.v + current
    if not np.isfinite(u).all():
        raise tc.NonFiniteError("lif_step: non-finite membrane")
    s = (u >= theta).astype(current.dtype)
    v = np.where(s > 0, 0.0, u).astype(current.dtype)
    return s, LifState(v, state.t + 1)


def rate_readout(spikes) -> Tensor:
    """Mean over the time axis of a sequence of spike tensors."""
    spikes = list(spikes)
    if not spikes:
        raise ValueError("rate_readout needs at least one timestep")
    shape = as_tensor(spikes[0]).shape
    if any(as_tensor(s).shape != shape for s in spikes):
        raise ValueError("all spike tensors must share one shape")
    return tc.mean(tc.stack(spikes, axis=0), axis=0)


def lif_run(current, params: LifParams, timesteps: int, mode: str = "heaviside") -> tuple[Tensor, int]:
    """Drive a layer with a constant current for ``timesteps`` steps.

    Fused forward/BPTT of the composed :func:`lif_step` sequence followed by
    :func:`rate_readout`. Returns the rate tensor and the total spike count.
    """
    if timesteps < 1:
        raise ValueError("timesteps must be >= 1")
    current = as_tensor(current)
    tau_t, theta_t = params.tau, params.theta
    I = current.data.astype(_ACC)
    tau = _channel_view(tau_t.data.astype(_ACC), I.ndim)
    th = float(theta_t.data)
    alpha = params.alpha
    T = timesteps

    v = np.zeros_like(I)
    us, ss, vprev = [], [], []
    rate = np.zeros_like(I)
    for _ in range(T):
        vprev.append(v)
        u = tau * v + I
        s = _fire(u, th, alpha, mode)
        v = u * (1.0 - s)
        us.append(u)
        ss.append(s)
        rate += s
    rate /= T
    if not np.isfinite(v).all():
        raise tc.NonFiniteError("lif_run: non-finite membrane")
    count = int(round(rate.sum() * T)) if mode == "heaviside" else 0

    def back(g):
        gr = np.asarray(g, dtype=_ACC) / T
        gv = np.zeros_like(I)
        gI = np.zeros_like(I)
        gtau = np.zeros_like(I)
        gth = 0.0
        for t in range(T - 1, -1, -1):
            u, s = us[t], ss[t]
            sg = surrogate_grad(u, th, alpha)
            gs = gr - gv * u
            gu = gv * (1.0 - s) + gs * sg
            gth -= float((gs * sg).sum())
            gI += gu
            gtau += gu * vprev[t]
            gv = gu * tau
        gtau_c = gtau.reshape(gtau.shape[0], -1).sum(axis=1)
        return (
            gI.astype(current.dtype),
            gtau_c.astype(tau_t.dtype),
            np.asarray(gth, dtype=theta_t.dtype).reshape(theta_t.shape),
        )

    out = make_result("lif_run", rate.astype(current.dtype), (current, tau_t, theta_t), back)
    return out, count


def leak_schedule(num_encoder_levels: int, num_decoder_levels: int, tau_hi: float = 0.90, tau_lo: float = 0.75):
    """U-shaped leak initialization: ``(encoder, bottleneck, decoder)`` taus.

    Encoder taus fall linearly from ``tau_hi`` to ``tau_lo``; the decoder mirrors
    them, rising back to ``tau_hi`` at the shallowest stage.
    """
    if num_encoder_levels < 1 or num_decoder_levels < 1:
        raise ValueError("levels must be >= 1")
    if tau_hi <= tau_lo:
        raise ValueError("tau_hi must exceed tau_lo")

    def ramp(n: int) -> list[float]:
        return [tau_hi] if n == 1 else [round(float(x), 12) for x in np.linspace(tau_hi, tau_lo, n)]

    return ramp(num_encoder_levels), tau_lo, ramp(num_decoder_levels)[::-1]
