import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import chi2

from snnreg.conversion import (
    CalibrationSet,
    Reservoir,
    calibrate_thresholds,
    calibration_report,
    record_activations,
    transfer_weights,
)
from snnreg.tensor import no_record
from snnreg.unet import NetworkSpec, build, spiking_layers

TINY = NetworkSpec([2, 3, 4], [4, 3, 2])


def sequential_r(stream, cap, rng):
    """Textbook algorithm R consuming the same uniform draws as the vectorized version."""
    buf = list(stream[:cap])
    rest = stream[cap:]
    u = rng.random(len(rest))
    for k, (x, r) in enumerate(zip(rest, u)):
        j = int(np.floor(r * (cap + k + 1)))
        if j < cap:
            buf[j] = x
    return np.array(buf)


@given(n=st.integers(1, 300), cap=st.integers(1, 50), chunks=st.integers(1, 4), seed=st.integers(0, 999))
def test_reservoir_matches_sequential_algorithm(n, cap, chunks, seed):
    stream = np.arange(n, dtype=float)
    res = Reservoir(cap, np.random.Generator(np.random.Philox(seed)))
    for part in np.array_split(stream, chunks):
        res.extend(part)
    # one extend call past the fill consumes the same draws as a sequential pass
    one = Reservoir(cap, np.random.Generator(np.random.Philox(seed)))
    one.extend(stream)
    ref = sequential_r(stream, cap, np.random.Generator(np.random.Philox(seed)))
    np.testing.assert_array_equal(one.buf, ref)
    assert res.seen == n and res.buf.size == min(n, cap)


def test_reservoir_inclusion_is_uniform():
    n, cap, trials = 40, 10, 4000
    counts = np.zeros(n)
    rng = np.random.Generator(np.random.Philox(7))
    for _ in range(trials):
        r = Reservoir(cap, rng)
        r.extend(np.arange(n, dtype=float)[:17])
        r.extend(np.arange(n, dtype=float)[17:])
        counts[r.buf.astype(int)] += 1
    expected = trials * cap / n
    stat = ((counts - expected) ** 2 / expected).sum()
    assert stat < chi2.ppf(0.999, n - 1)


def _cal(samples):
    return CalibrationSet({k: np.asarray(v, float) for k, v in samples.items()}, {k: len(v) for k, v in samples.items()},
                          1, layers=list(samples))


@given(vals=st.lists(st.floats(0.001, 100), min_size=1, max_size=60), p1=st.floats(0, 100), p2=st.floats(0, 100))
def test_thresholds_monotone_in_percentile(vals, p1, p2):
    lo, hi = sorted((p1, p2))
    cal = _cal({"a": vals})
    assert calibrate_thresholds(cal, lo)["a"] <= calibrate_thresholds(cal, hi)["a"]


def test_threshold_is_linear_percentile():
    cal = _cal({"a": [1, 2, 3, 4], "b": [10.0]})
    th = calibrate_thresholds(cal, 50)
    assert th == {"a": 2.5, "b": 10.0}
    assert calibrate_thresholds(cal, 100)["a"] == 4


def test_empty_layer_names_the_layer():
    with pytest.raises(ValueError, match="'dead'"):
        calibrate_thresholds(_cal({"dead": []}), 50)
    with pytest.raises(ValueError):
        calibrate_thresholds(_cal({"a": [1.0]}), 101)


def test_record_activations_keeps_only_positive(rng):
    teacher = build(TINY, "ann")
    pairs = [(rng.random((8, 8, 8)), rng.random((8, 8, 8))) for _ in range(2)]
    cal = record_activations(teacher, pairs, cap=100, seed=1)
    assert cal.layers == spiking_layers(TINY) and cal.pair_count == 2
    for name, s in cal.samples.items():
        assert s.size <= 100 and (s > 0).all() and cal.seen[name] >= s.size
    again = record_activations(teacher, pairs, cap=100, seed=1)
    for name in cal.samples:
        np.testing.assert_array_equal(cal.samples[name], again.samples[name])
    with pytest.raises(ValueError):
        record_activations(build(TINY, "snn"), pairs)


def test_transfer_copies_weights_and_freezes_bn(rng):
    teacher = build(TINY, "ann", seed=5)
    for bn in teacher.bns.values():
        bn.running_mean = rng.normal(size=bn.running_mean.shape).astype(np.float32)
    th = {n: 0.5 + i for i, n in enumerate(spiking_layers(TINY))}
    student = transfer_weights(teacher, th)
    for k, t in teacher.params.items():
        np.testing.assert_array_equal(student.params[k].data, t.data)
    for n, bn in teacher.bns.items():
        np.testing.assert_array_equal(student.bns[n].running_mean, bn.running_mean)
        assert student.bns[n].frozen
    assert {n: float(p.theta.data) for n, p in student.lifs.items()} == th
    assert "enc0.bn.gamma" not in student.named_parameters()
    with pytest.raises(ValueError):
        transfer_weights(teacher, {"enc0": 1.0})


def test_converted_student_fires_sparsely(rng):
    teacher = build(TINY, "ann")
    pairs = [(rng.random((8, 8, 8)), rng.random((8, 8, 8))) for _ in range(2)]
    student = transfer_weights(teacher, calibrate_thresholds(record_activations(teacher, pairs), 50))
    with no_record():
        _, recs = student.forward(*pairs[0])
    mean_rate = np.mean([r.rate for r in recs])
    assert 0 < mean_rate < 1


def test_calibration_report_lines():
    cal = _cal({"a": [1.0, 3.0], "b": [2.0]})
    text = calibration_report(cal, calibrate_thresholds(cal, 50), 50)
    recs = [json.loads(line) for line in text.splitlines()]
    assert [r["layer"] for r in recs] == ["a", "b"] and recs[0]["theta"] == 2.0 and recs[0]["seen"] == 2
