import math

import numpy as np
import pytest

from snnreg.conversion import transfer_weights
from snnreg.io.synthetic import generate_dataset
from snnreg.losses import LossWeights
from snnreg.trainer import (
    AdamState,
    OptimConfig,
    PhasePlan,
    TrainLog,
    adam_step,
    clip_global_norm,
    convert_phase,
    cosine_lr,
    evaluate,
    run_phase,
)
from snnreg.unet import NetworkSpec, build, spiking_layers

TINY = NetworkSpec([2, 3, 4], [4, 3, 2])


@pytest.fixture(scope="module")
def pairs():
    return generate_dataset(2, shape=(12, 12, 12), classes=2, amplitude=1.0, smoothness=2.0, seed=3)


def test_adam_first_step_moves_by_lr_times_sign():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    g = {"w": np.array([0.5, -4.0, 0.0])}
    adam_step(p, g, AdamState(), lr=0.1, eps=0.0 + 1e-12)
    np.testing.assert_allclose(p["w"], [0.9, -1.9, 3.0], atol=1e-9)


def test_adam_matches_reference_recurrence(rng):
    x = rng.normal(size=5)
    p = {"x": x.copy()}
    state = AdamState()
    m = v = np.zeros(5)
    ref = x.copy()
    for t in range(1, 30):
        g = 2 * (ref - 1.0)
        adam_step(p, {"x": 2 * (p["x"] - 1.0)}, state, lr=0.05)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.05 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p["x"], ref, rtol=1e-12)
    assert state.step == 29


def test_adam_skips_non_finite_gradient():
    p = {"w": np.ones(3)}
    state = AdamState()
    assert not adam_step(p, {"w": np.array([1.0, np.nan, 0.0])}, state, lr=1.0)
    np.testing.assert_array_equal(p["w"], 1.0)
    assert state.step == 0 and state.skipped == 1 and not state.m


def test_cosine_schedule_endpoints():
    assert cosine_lr(0, 10, 1e-3, 1e-5) == 1e-3
    assert cosine_lr(10, 10, 1e-3, 1e-5) == pytest.approx(1e-5)
    assert cosine_lr(5, 10, 1e-3, 1e-5) == pytest.approx((1e-3 + 1e-5) / 2)
    lrs = [cosine_lr(s, 50, 1.0, 0.0) for s in range(51)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        cosine_lr(11, 10, 1.0, 0.0)


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    out, norm = clip_global_norm(g, 1.0)
    assert norm == 5.0
    assert math.hypot(out["a"][0], out["b"][0]) == pytest.approx(1.0)
    same, _ = clip_global_norm(g, 10.0)
    assert same["a"] is g["a"]


def test_optim_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(lr=1e-5, eta_min=1e-4)
    with pytest.raises(ValueError):
        OptimConfig(batch_size=2)
    with pytest.raises(ValueError):
        PhasePlan("pretrain")


def _plan(phase, epochs=2, **kw):
    return PhasePlan(phase, weights=LossWeights(**kw), optim=OptimConfig(lr=1e-3, eta_min=1e-5, epochs=epochs, seed=1))


def test_run_phase_is_deterministic_and_logs(pairs):
    nets = [run_phase(_plan("ann_warmstart"), build(TINY, "ann", seed=0), pairs) for _ in range(2)]
    (a, log_a), (b, log_b) = nets
    for k, p in a.params.items():
        np.testing.assert_array_equal(p.data, b.params[k].data)
    assert log_a.to_jsonl() == log_b.to_jsonl()
    assert len(log_a.records) == 4
    rec = log_a.records[0]
    assert {"epoch", "step", "pair", "lr", "grad_norm", "total"} <= set(rec)
    assert rec["lr"] == 1e-3


def test_ann_training_lowers_loss(pairs):
    net, tlog = run_phase(_plan("ann_warmstart", epochs=15), build(TINY, "ann", seed=0), pairs)
    totals = [r["total"] for r in tlog.records]
    assert np.mean(totals[-4:]) < np.mean(totals[:4])


def test_finetune_freezes_bn_and_logs_rates(pairs):
    teacher = build(TINY, "ann", seed=0)
    student, _, _ = convert_phase(teacher, pairs[:1], 50)
    before = {n: bn.running_mean.copy() for n, bn in student.bns.items()}
    student, tlog = run_phase(_plan("snn_finetune", epochs=1), student, pairs)
    for n, bn in student.bns.items():
        assert bn.frozen
        np.testing.assert_array_equal(bn.running_mean, before[n])
    assert set(tlog.records[0]["rates"]) == set(spiking_layers(TINY))
    assert "spk" in tlog.records[0]


def test_flavor_and_teacher_checks(pairs):
    with pytest.raises(ValueError):
        run_phase(_plan("ann_warmstart"), build(TINY, "snn"), pairs)
    with pytest.raises(ValueError):
        run_phase(_plan("snn_scratch"), build(TINY, "ann"), pairs)
    with pytest.raises(ValueError, match="teacher"):
        run_phase(_plan("snn_scratch", lambda_distill=0.5), build(TINY, "snn"), pairs)
    with pytest.raises(ValueError):
        run_phase(_plan("ann_warmstart"), build(TINY, "ann"), [])


def test_non_finite_steps_are_skipped_then_abort(pairs):
    net = build(TINY, "ann", seed=0)
    net.params["enc0.weight"].data[...] = np.nan
    with pytest.raises(RuntimeError, match="consecutive"):
        run_phase(_plan("ann_warmstart", epochs=3), net, pairs, max_bad_steps=3)
    tlog = TrainLog()
    net = build(TINY, "ann", seed=0)
    net.params["enc0.weight"].data[...] = np.nan
    with pytest.raises(RuntimeError):
        run_phase(_plan("ann_warmstart", epochs=3), net, pairs, train_log=tlog, max_bad_steps=2)
    assert [r.get("skipped") for r in tlog.records] == [True, True]


def test_evaluate_identity_and_student_rates(pairs):
    init = evaluate(None, pairs)
    assert all(r.fold_percent == 0 and not r.spike_rates for r in init)
    student = transfer_weights(build(TINY, "ann"), {n: 1.0 for n in spiking_layers(TINY)})
    res = evaluate(student, pairs)
    assert set(res[0].spike_rates) == set(spiking_layers(TINY))
