import dataclasses

import numpy as np
import pytest

from snnreg.deform import svf_integrate
from snnreg.tensor import Tape, Tensor, grad_check, no_record
from snnreg.tensor import core as tc
from snnreg.unet import NetworkSpec, build, count_params, head_smoothing, layer_inventory, spiking_layers

TINY = NetworkSpec(encoder_channels=[2, 3, 4], decoder_channels=[4, 3, 2])


def pair(rng, n=8):
    return rng.random((n, n, n)), rng.random((n, n, n))


@pytest.mark.parametrize("flavor", ["ann", "snn"])
def test_forward_shapes_and_records(rng, flavor):
    net = build(TINY, flavor)
    F, M = pair(rng)
    with no_record():
        u, records = net.forward(F, M)
    assert u.shape == (3, 8, 8, 8)
    assert [r.name for r in records] == spiking_layers(TINY)
    if flavor == "snn":
        for r in records:
            assert 0 <= r.rate <= 1 and r.spike_count == round(r.rate * r.neurons * TINY.timesteps)


def test_param_count_matches_instantiated_tensors():
    for flavor in ("ann", "snn"):
        assert build(TINY, flavor).param_count() == count_params(TINY, flavor)["total"]


def test_snn_adds_lif_and_smoothing_parameters():
    a, s = count_params(TINY, "ann"), count_params(TINY, "snn")
    assert s["conv"] == a["conv"] and s["bn"] == a["bn"]
    assert s["smooth"] == 3 * 27
    assert s["lif"] == sum(c + 1 for c in TINY.encoder_channels + [TINY.encoder_channels[-1]] + TINY.decoder_channels)


def test_inventory_wiring():
    inv = {l.name: l for l in layer_inventory(TINY, (8, 8, 8), "snn")}
    assert inv["enc0"].stride == 1 and inv["enc1"].stride == 2
    assert inv["dec0"].cin == 2 * TINY.encoder_channels[-1]
    assert inv["dec1"].upsample_input and inv["dec1"].cin == 4 + 3
    assert inv["head"].kernel == 1 and not inv["head"].spiking
    assert inv["smooth"].depthwise
    assert "smooth" not in {l.name for l in layer_inventory(TINY, (8, 8, 8), "ann")}


def test_spatial_divisibility_enforced(rng):
    net = build(TINY, "ann")
    with pytest.raises(ValueError):
        net.forward(rng.random((6, 8, 8)), rng.random((6, 8, 8)))


def test_initialization_conventions():
    net = build(TINY, "snn")
    np.testing.assert_allclose(net.params["smooth.weight"].data, 1 / 27, rtol=1e-6)
    assert net.params["head.weight"].data.std() < 5e-3
    taus = [float(net.lifs[n].tau.data[0]) for n in spiking_layers(TINY)]
    assert taus == pytest.approx([0.9, 0.825, 0.75, 0.75, 0.75, 0.825, 0.9])


def test_same_seed_same_weights_different_seed_differs():
    a, b, c = build(TINY, "ann", seed=1), build(TINY, "ann", seed=1), build(TINY, "ann", seed=2)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k].data, b.params[k].data)
    assert not np.array_equal(a.params["enc0.weight"].data, c.params["enc0.weight"].data)


def test_state_dict_roundtrip(rng):
    net = build(TINY, "snn", seed=3)
    other = build(TINY, "snn", seed=4)
    other.load_state_dict(net.state_dict())
    F, M = pair(rng)
    with no_record():
        np.testing.assert_array_equal(net.forward(F, M)[0].data, other.forward(F, M)[0].data)
    bad = net.state_dict()
    bad.pop("enc0.weight")
    with pytest.raises(ValueError):
        other.load_state_dict(bad)


def test_captured_rates_are_spike_counts_over_timesteps(rng):
    net = build(TINY, "snn")
    F, M = pair(rng)
    seen = {}
    with no_record():
        net.forward(F, M, capture=lambda name, rate: seen.setdefault(name, rate))
    assert set(seen) == set(spiking_layers(TINY))
    for rate in seen.values():
        assert ((rate * TINY.timesteps) % 1 == 0).all()


def test_velocity_mode_integrates(rng):
    spec = dataclasses.replace(TINY, output_mode="velocity", svf_steps=3)
    net = build(spec, "ann")
    F, M = pair(rng)
    with no_record():
        u, _ = net.forward(F, M)
    np.testing.assert_array_equal(u.data, svf_integrate(net.last_velocity, 3).data)


def test_spike_path_gradient_through_network(f64, rng):
    # relaxed spikes make the whole network differentiable in the classical sense
    spec = NetworkSpec([2, 2], [2, 2], timesteps=2, alpha=3.0)
    net = build(spec, "snn", dtype=np.float64)
    for p in net.lifs.values():
        p.theta.data[...] = 0.3
    net.params["head.weight"].data *= 300
    F, M = rng.random((4, 4, 4)), rng.random((4, 4, 4))
    probe = rng.normal(size=(3, 4, 4, 4))

    def f(t):
        net.params["enc1.weight"] = t
        return tc.tsum(tc.mul(net.forward(F, M, spike_mode="sigmoid")[0], probe))

    assert grad_check(f, net.params["enc1.weight"].data.copy()) < 1e-4


def test_ann_gradient_reaches_every_parameter(rng):
    net = build(TINY, "ann")
    net.training = True
    F, M = pair(rng)
    params = net.named_parameters()
    with Tape() as tape:
        u, _ = net.forward(F, M)
        loss = tc.tsum(tc.square(u))
    grads = tape.gradient(loss, list(params.values()))
    assert all(np.isfinite(g).all() for g in grads)
    assert grads[list(params).index("enc0.weight")].any()


def test_head_smoothing_identity_and_box(rng):
    u = rng.normal(size=(3, 4, 4, 4))
    np.testing.assert_array_equal(head_smoothing(u).data, u)
    s = head_smoothing(np.ones((3, 5, 5, 5)), np.full((3, 3, 3, 3), 1 / 27)).data
    assert s[:, 2, 2, 2] == pytest.approx([1, 1, 1])


def test_spec_validation():
    for bad in (dict(encoder_channels=[2], decoder_channels=[2, 2]), dict(kernel_size=2),
                dict(output_mode="affine"), dict(timesteps=0), dict(smoothing_kernel=4)):
        with pytest.raises(ValueError):
            dataclasses.replace(TINY, **bad)


def test_architecture_hash_ignores_run_settings():
    assert TINY.architecture_hash() == dataclasses.replace(TINY, timesteps=8, alpha=2.0).architecture_hash()
    assert TINY.architecture_hash() != dataclasses.replace(TINY, kernel_size=5).architecture_hash()
