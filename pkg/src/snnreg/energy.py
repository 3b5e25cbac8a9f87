"""Operation counts and arithmetic-energy proxies for the analog and spiking networks.

These are relative arithmetic-energy estimates built from per-operation costs;
they are not hardware measurements and every report says so.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

from .unet import LayerRecord, NetworkSpec, layer_inventory

DISCLAIMER = "proxy, not hardware measurement"


@dataclass(frozen=True)
class EnergyConstants:
    e_ac: float = 0.9
    e_mac: float = 4.6

    def __post_init__(self) -> None:
        if not (self.e_ac > 0 and self.e_mac > 0):
            raise ValueError("energy constants must be positive")


@dataclass
class LayerStats:
    name: str
    macs: int
    neurons: int = 0
    spike_count: int = 0
    rate: float = 0.0
    fan_in: float | None = None
    timesteps: int = 1

    def __post_init__(self) -> None:
        if self.neurons and not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"{self.name}: rate {self.rate} outside [0, 1]")


def count_macs(spec: NetworkSpec, spatial, flavor: str = "ann") -> tuple[list[tuple[str, int]], int]:
    """Dense multiply-accumulate count per conv layer (``Cout*Cin*k^3*voxels``) and the total."""
    rows = [(l.name, l.macs) for l in layer_inventory(spec, spatial, flavor)]
    return rows, sum(m for _, m in rows)


def fan_in(spec: NetworkSpec, spatial, resolution_scaled: bool = True) -> dict[str, float]:
    """Accumulates triggered downstream per output spike of each spiking layer.

    Every conv that consumes a layer's spikes contributes ``Cout*k^3``. With
    ``resolution_scaled`` the contribution is multiplied by the ratio of the
    consumer's output voxels to the producer's voxels, which is 1/8 for a
    stride-2 consumer and 8 for a consumer behind a x2 upsample; then a layer
    firing on every step costs exactly its consumers' dense MACs (up to border
    padding). Consumers that read rates at MAC cost (the head) contribute nothing.
    """
    inv = layer_inventory(spec, spatial, "snn")
    voxels = {l.name: l.out_voxels for l in inv}
    out: dict[str, float] = {l.name: 0.0 for l in inv if l.spiking}
    for consumer in inv:
        if not consumer.spiking:
            continue
        for producer in consumer.inputs:
            if producer not in out:
                continue
            ops = consumer.cout * consumer.kernel ** 3
            if resolution_scaled:
                ops *= consumer.out_voxels / voxels[producer]
            out[producer] += ops
    return out


def layer_stats(spec: NetworkSpec, spatial, records: list[LayerRecord], resolution_scaled: bool = True) -> list[LayerStats]:
    """Join hook records with the symbolic inventory."""
    fi = fan_in(spec, spatial, resolution_scaled)
    macs = {l.name: l.macs for l in layer_inventory(spec, spatial, "snn")}
    rec = {r.name: r for r in records}
    out = []
    for name, m in macs.items():
        r = rec.get(name)
        if r is None:
            out.append(LayerStats(name, m))
        else:
            out.append(LayerStats(name, m, r.neurons, r.spike_count, r.rate, fi.get(name), spec.timesteps))
    return out


def project_synops(stats: list[LayerStats]) -> tuple[dict[str, float], float]:
    """SynOps per spiking layer = output spike count x downstream fan-in."""
    per = {}
    for s in stats:
        if s.neurons == 0:
            continue
        if s.fan_in is None:
            raise ValueError(f"layer {s.name!r} has no fan-in")
        per[s.name] = s.spike_count * s.fan_in
    return per, float(sum(per.values()))


def energy_ratio(ann_macs: float, snn_synops: float = 0.0, constants: EnergyConstants = EnergyConstants(),
                 mode: str = "projected", rho_bar: float | None = None, timesteps: int | None = None) -> tuple[float, float]:
    """``(R, 1/R)`` with ``R`` the spiking-to-analog arithmetic energy ratio.

    ``projected``: ``e_ac * synops / (e_mac * macs)``.
    ``analytical``: ``(e_ac / e_mac) * T * rho_bar``.
    """
    if mode == "projected":
        if ann_macs <= 0:
            raise ValueError("ann_macs must be positive")
        r = constants.e_ac * snn_synops / (constants.e_mac * ann_macs)
    elif mode == "analytical":
        if rho_bar is None or timesteps is None:
            raise ValueError("analytical mode needs rho_bar and timesteps")
        r = constants.e_ac / constants.e_mac * timesteps * rho_bar
    else:
        raise ValueError("mode must be 'projected' or 'analytical'")
    return r, (1.0 / r if r > 0 else float("inf"))


def energy_report(spec: NetworkSpec, spatial, records: list[LayerRecord], constants: EnergyConstants = EnergyConstants(),
                  resolution_scaled: bool = True) -> dict:
    """Per-layer rows plus both ratios. Stem and head costs are listed separately at MAC cost."""
    stats = layer_stats(spec, spatial, records, resolution_scaled)
    per, synops = project_synops(stats)
    _, ann_macs = count_macs(spec, spatial, "ann")
    dense = {s.name: s.macs for s in stats if s.name in ("enc0", "head", "smooth")}
    spiking = [s for s in stats if s.neurons]
    total_neurons = sum(s.neurons for s in spiking)
    rho_bar = sum(s.spike_count for s in spiking) / (spec.timesteps * total_neurons) if total_neurons else 0.0
    r_proj, red_proj = energy_ratio(ann_macs, synops, constants, "projected")
    r_dense, red_dense = energy_ratio(ann_macs, synops + sum(dense.values()) * constants.e_mac / constants.e_ac,
                                      constants, "projected")
    r_an, red_an = energy_ratio(ann_macs, constants=constants, mode="analytical", rho_bar=rho_bar, timesteps=spec.timesteps)
    return {
        "disclaimer": DISCLAIMER,
        "layers": [
            {"layer": s.name, "macs": s.macs, "neurons": s.neurons, "spikes": s.spike_count, "rate": s.rate,
             "fan_in": s.fan_in, "synops": per.get(s.name, 0.0)}
            for s in stats
        ],
        "ann_macs": ann_macs,
        "snn_synops": synops,
        "dense_mac_lines": dense,
        "op_reduction": ann_macs / synops if synops else float("inf"),
        "rho_bar": rho_bar,
        "projected_R": r_proj,
        "projected_reduction": red_proj,
        "projected_R_with_dense_lines": r_dense,
        "projected_reduction_with_dense_lines": red_dense,
        "analytical_R": r_an,
        "analytical_reduction": red_an,
        "e_ac_pJ": constants.e_ac,
        "e_mac_pJ": constants.e_mac,
    }


def format_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"
