"""U-Net registration network in analog (ReLU) and spiking (LIF) flavors.

Block graph for ``L`` encoder levels (every block is conv -> BN -> activation)::

    enc0        2 -> E0, stride 1, full resolution (the stem; current injection)
    enc1..      E[i-1] -> E[i], stride 2
    bottleneck  E[-1] -> E[-1], stride 1, deepest resolution
    dec0        concat(bottleneck, enc[L-1]) -> D0, deepest resolution
    dec1..      nearest x2 upsample, concat(skip enc[L-1-j]), conv -> D[j]
    head        1x1x1 conv D[-1] -> 3, then (spiking flavor) a depthwise
                smoothing kernel

In the spiking flavor each block turns its conv/BN output into a constant
input current, runs ``T`` LIF steps and hands ``theta * rate`` to its
consumers. Scaling by the layer threshold is the usual threshold-balanced
spike amplitude: it can be folded into the next layer's weights, so it adds
no multiplications per spike, and it lets conv/BN tensors copied bitwise from
the analog teacher see inputs on the teacher's scale.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import lif as lifmod
from .deform import svf_integrate
from .tensor import (
    BatchNormState,
    Tensor,
    batchnorm3d,
    concat,
    conv3d,
    depthwise_conv3d,
    relu,
    upsample_nearest2,
)
from .tensor import core as tc

FLAVORS = ("ann", "snn")


@dataclass
class NetworkSpec:
    encoder_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    decoder_channels: list[int] = field(default_factory=lambda: [64, 32, 16, 16])
    input_channels: int = 2
    output_channels: int = 3
    kernel_size: int = 3
    downsample: str = "stride2"
    upsample: str = "nearest"
    timesteps: int = 4
    smoothing_kernel: int = 3
    output_mode: str = "displacement"
    svf_steps: int = 7
    alpha: float = 10.0
    tau_hi: float = 0.90
    tau_lo: float = 0.75

    def __post_init__(self) -> None:
        self.encoder_channels = [int(c) for c in self.encoder_channels]
        self.decoder_channels = [int(c) for c in self.decoder_channels]
        self.validate()

    def validate(self) -> None:
        if not self.encoder_channels or len(self.encoder_channels) != len(self.decoder_channels):
            raise ValueError("encoder and decoder must have the same, non-zero number of levels")
        if any(c < 1 for c in self.encoder_channels + self.decoder_channels):
            raise ValueError("channel counts must be positive")
        if self.output_channels != 3:
            raise ValueError("output_channels must be 3")
        if self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be odd")
        if self.smoothing_kernel and self.smoothing_kernel % 2 == 0:
            raise ValueError("smoothing kernel must be odd (0 disables it)")
        if self.downsample != "stride2" or self.upsample != "nearest":
            raise ValueError("only stride-2 downsampling and nearest upsampling are supported")
        if self.output_mode not in ("displacement", "velocity"):
            raise ValueError("output_mode must be 'displacement' or 'velocity'")
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")

    @property
    def levels(self) -> int:
        return len(self.encoder_channels)

    def to_dict(self) -> dict:
        return asdict(self)

    def architecture_hash(self) -> str:
        """Hash of the fields that determine parameter shapes."""
        keys = ("encoder_channels", "decoder_channels", "input_channels", "output_channels", "kernel_size")
        payload = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Layer inventory (symbolic; no tensors allocated)
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class LayerInfo:
    name: str
    cin: int
    cout: int
    kernel: int
    stride: int
    in_spatial: tuple[int, int, int]
    out_spatial: tuple[int, int, int]
    inputs: tuple[str, ...]
    upsample_input: bool = False
    spiking: bool = True
    depthwise: bool = False

    @property
    def out_voxels(self) -> int:
        return int(np.prod(self.out_spatial))

    @property
    def macs(self) -> int:
        per_out = self.kernel ** 3 * (1 if self.depthwise else self.cin)
        return int(self.cout * per_out * self.out_voxels)

    @property
    def params(self) -> int:
        if self.depthwise:
            return self.cout * self.kernel ** 3
        return self.cout * self.cin * self.kernel ** 3 + self.cout

    @property
    def bn_params(self) -> int:
        return 2 * self.cout if self.spiking else 0


def check_divisible(spec: NetworkSpec, spatial) -> None:
    f = 2 ** (spec.levels - 1)
    if any(n % f for n in spatial):
        raise ValueError(f"spatial dims {tuple(spatial)} must be divisible by {f}")


def layer_inventory(spec: NetworkSpec, spatial, flavor: str = "ann") -> list[LayerInfo]:
    """Ordered list of conv layers with their shapes and producers."""
    check_divisible(spec, spatial)
    k = spec.kernel_size
    res = [tuple(int(n) // 2 ** i for n in spatial) for i in range(spec.levels)]
    E, D = spec.encoder_channels, spec.decoder_channels
    L = spec.levels
    layers = [LayerInfo("enc0", spec.input_channels, E[0], k, 1, res[0], res[0], ("input",))]
    for i in range(1, L):
        layers.append(LayerInfo(f"enc{i}", E[i - 1], E[i], k, 2, res[i - 1], res[i], (f"enc{i - 1}",)))
    layers.append(LayerInfo("bottleneck", E[-1], E[-1], k, 1, res[-1], res[-1], (f"enc{L - 1}",)))
    layers.append(LayerInfo("dec0", E[-1] + E[-1], D[0], k, 1, res[-1], res[-1], ("bottleneck", f"enc{L - 1}")))
    for j in range(1, L):
        r = res[L - 1 - j]
        layers.append(
            LayerInfo(
                f"dec{j}", D[j - 1] + E[L - 1 - j], D[j], k, 1, r, r, (f"dec{j - 1}", f"enc{L - 1 - j}"), upsample_input=True
            )
        )
    layers.append(LayerInfo("head", D[-1], spec.output_channels, 1, 1, res[0], res[0], (f"dec{L - 1}",), spiking=False))
    if flavor == "snn" and spec.smoothing_kernel:
        s = spec.smoothing_kernel
        layers.append(LayerInfo("smooth", 3, 3, s, 1, res[0], res[0], ("head",), spiking=False, depthwise=True))
    return layers


def spiking_layers(spec: NetworkSpec) -> list[str]:
    L = spec.levels
    return [f"enc{i}" for i in range(L)] + ["bottleneck"] + [f"dec{j}" for j in range(L)]


def count_params(spec: NetworkSpec, flavor: str) -> dict[str, int]:
    """Symbolic parameter count split by kind."""
    if flavor not in FLAVORS:
        raise ValueError(f"flavor must be one of {FLAVORS}")
    inv = layer_inventory(spec, (2 ** (spec.levels - 1),) * 3, flavor)
    out = {
        "conv": sum(l.params for l in inv if not l.depthwise),
        "bn": sum(l.bn_params for l in inv),
        "lif": 0,
        "smooth": sum(l.params for l in inv if l.depthwise),
    }
    if flavor == "snn":
        out["lif"] = sum(l.cout + 1 for l in inv if l.spiking)
    out["total"] = sum(out.values())
    return out


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------
@dataclass
class LayerRecord:
    name: str
    neurons: int
    spike_count: int = 0
    rate: float = 0.0
    act_percentiles: tuple[float, float, float] | None = None


class Network:
    """Parameters and forward pass for one flavor of the U-Net."""

    def __init__(self, spec: NetworkSpec, flavor: str, seed: int = 42, dtype=None):
        if flavor not in FLAVORS:
            raise ValueError(f"flavor must be one of {FLAVORS}")
        self.spec = spec
        self.flavor = flavor
        self.dtype = np.dtype(dtype or tc.default_dtype())
        self.training = False
        self.params: dict[str, Tensor] = {}
        self.bns: dict[str, BatchNormState] = {}
        self.lifs: dict[str, lifmod.LifParams] = {}
        rng = np.random.default_rng(seed)
        inv = layer_inventory(spec, (2 ** (spec.levels - 1),) * 3, flavor)
        for layer in inv:
            if layer.depthwise:
                s = layer.kernel
                w = np.full((3, s, s, s), 1.0 / s ** 3)
                self.params["smooth.weight"] = Tensor(w.astype(self.dtype), requires_grad=True, name="smooth.weight")
                continue
            shape = (layer.cout, layer.cin) + (layer.kernel,) * 3
            std = 1e-3 if layer.name == "head" else np.sqrt(2.0 / (layer.cin * layer.kernel ** 3))
            w = rng.normal(0.0, std, size=shape).astype(self.dtype)
            self.params[f"{layer.name}.weight"] = Tensor(w, requires_grad=True, name=f"{layer.name}.weight")
            self.params[f"{layer.name}.bias"] = Tensor(np.zeros(layer.cout, self.dtype), requires_grad=True, name=f"{layer.name}.bias")
            if layer.spiking:
                self.bns[layer.name] = BatchNormState.create(layer.cout, dtype=self.dtype)
        if flavor == "snn":
            enc, bott, dec = lifmod.leak_schedule(spec.levels, spec.levels, spec.tau_hi, spec.tau_lo)
            taus = enc + [bott] + dec
            for name, tau in zip(spiking_layers(spec), taus):
                cout = self.params[f"{name}.weight"].shape[0]
                self.lifs[name] = lifmod.LifParams.create(cout, tau, 1.0, spec.alpha, dtype=self.dtype)
                self.bns[name].frozen = True

    # -- parameter access -------------------------------------------------
    def named_parameters(self, include_frozen: bool = False) -> dict[str, Tensor]:
        """Learnable tensors; frozen BN affines are excluded unless asked for."""
        out = dict(self.params)
        for name, bn in self.bns.items():
            if include_frozen or not bn.frozen:
                out[f"{name}.bn.gamma"] = bn.gamma
                out[f"{name}.bn.beta"] = bn.beta
        for name, p in self.lifs.items():
            out[f"{name}.lif.tau"] = p.tau
            out[f"{name}.lif.theta"] = p.theta
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        """Every tensor needed to rebuild the network, including BN buffers."""
        out = {k: v.data.copy() for k, v in self.named_parameters(include_frozen=True).items()}
        for name, bn in self.bns.items():
            out[f"{name}.bn.running_mean"] = bn.running_mean.copy()
            out[f"{name}.bn.running_var"] = bn.running_var.copy()
        return out

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = self.named_parameters(include_frozen=True)
        expected = set(own) | {f"{n}.bn.running_{s}" for n in self.bns for s in ("mean", "var")}
        missing = expected - set(state)
        if strict and (missing or set(state) - expected):
            raise ValueError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(set(state) - expected)}")
        for key, arr in state.items():
            if key.endswith(("running_mean", "running_var")):
                name, _, stat = key.rsplit(".", 2)
                bn = self.bns[name]
                if arr.shape != bn.running_mean.shape:
                    raise ValueError(f"{key}: shape {arr.shape} != {bn.running_mean.shape}")
                setattr(bn, stat, np.array(arr, dtype=self.dtype))
            elif key in own:
                if arr.shape != own[key].shape:
                    raise ValueError(f"{key}: shape {arr.shape} != {own[key].shape}")
                own[key].data = np.array(arr, dtype=self.dtype)

    def param_count(self) -> int:
        return int(sum(t.size for t in self.named_parameters(include_frozen=True).values()))

    def clamp_lif_(self) -> None:
        for p in self.lifs.values():
            p.clamp_()

    # -- forward ----------------------------------------------------------
    def _block(self, name: str, x: Tensor, stride: int, records: list, capture, spike_mode: str) -> Tensor:
        z = conv3d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], stride=stride)
        z = batchnorm3d(z, self.bns[name], training=self.training)
        if self.flavor == "ann":
            a = relu(z)
            if capture is not None:
                capture(name, a.data)
            pos = a.data[a.data > 0]
            pct = tuple(float(v) for v in np.percentile(pos, [50, 90, 99])) if pos.size else (0.0, 0.0, 0.0)
            records.append(LayerRecord(name, a.size, act_percentiles=pct))
            return a
        params = self.lifs[name]
        rate, count = lifmod.lif_run(z, params, self.spec.timesteps, mode=spike_mode)
        if capture is not None:
            capture(name, rate.data)
        records.append(LayerRecord(name, rate.size, count, count / (self.spec.timesteps * rate.size)))
        self._rates[name] = rate
        if not np.isfinite(params.theta.data).all():
            return tc.scale(rate, 0.0)
        return tc.mul(rate, params.theta)

    def forward(
        self,
        fixed,
        moving,
        capture: Callable[[str, np.ndarray], None] | None = None,
        spike_mode: str = "heaviside",
    ) -> tuple[Tensor, list[LayerRecord]]:
        """Predict the displacement field for a pair of ``D x H x W`` volumes."""
        F, M = tc.as_tensor(fixed), tc.as_tensor(moving)
        if F.shape != M.shape or F.ndim != 3:
            raise ValueError(f"fixed/moving must be matching D x H x W volumes, got {F.shape}, {M.shape}")
        check_divisible(self.spec, F.shape)
        x = concat([tc.reshape(F, (1,) + F.shape), tc.reshape(M, (1,) + M.shape)], axis=0)
        if x.dtype != self.dtype:
            x = Tensor(x.data.astype(self.dtype))
        records: list[LayerRecord] = []
        self._rates: dict[str, Tensor] = {}
        L = self.spec.levels
        skips = []
        h = x
        for i in range(L):
            h = self._block(f"enc{i}", h, 1 if i == 0 else 2, records, capture, spike_mode)
            skips.append(h)
        h = self._block("bottleneck", h, 1, records, capture, spike_mode)
        h = self._block("dec0", concat([h, skips[-1]]), 1, records, capture, spike_mode)
        for j in range(1, L):
            h = self._block(f"dec{j}", concat([upsample_nearest2(h), skips[L - 1 - j]]), 1, records, capture, spike_mode)
        out = conv3d(h, self.params["head.weight"], self.params["head.bias"], stride=1)
        if "smooth.weight" in self.params:
            out = depthwise_conv3d(out, self.params["smooth.weight"])
        if self.spec.output_mode == "velocity":
            self.last_velocity = out
            out = svf_integrate(out, self.spec.svf_steps)
        return out, records

    def layer_rates(self) -> list[Tensor]:
        """Differentiable mean spike rate per spiking layer from the last forward."""
        return [tc.mean(self._rates[n]) for n in spiking_layers(self.spec)]

    __call__ = forward


def build(spec: NetworkSpec, flavor: str, seed: int = 42, dtype=None) -> Network:
    return Network(spec, flavor, seed=seed, dtype=dtype)


def head_smoothing(field, kernel=None) -> Tensor:
    """Depthwise same-padded smoothing of a ``3 x D x H x W`` field; ``None`` is identity."""
    if kernel is None:
        return tc.as_tensor(field)
    return depthwise_conv3d(field, kernel)
