import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from snnreg.stats import (
    PairedSample,
    bonferroni,
    bootstrap_ci,
    compare,
    effect_size_dz,
    sign_flip_exact,
    sign_flip_test,
    wilcoxon_exhaustive,
    wilcoxon_signed_rank,
)

small_diffs = st.lists(st.integers(-6, 6).map(float), min_size=2, max_size=10)


@settings(max_examples=80)
@given(d=small_diffs)
def test_wilcoxon_exact_matches_enumeration(d):
    nz = [x for x in d if x != 0]
    res = wilcoxon_signed_rank(d)
    if not nz:
        assert res.degenerate and res.p == 1.0
        return
    assert res.method == "exact"
    assert res.p == pytest.approx(min(1.0, wilcoxon_exhaustive(d)), abs=1e-12)
    assert res.w_plus + res.w_minus == pytest.approx(len(nz) * (len(nz) + 1) / 2)


def test_wilcoxon_agrees_with_scipy_without_ties(rng):
    for n in (6, 12, 20):
        d = rng.normal(0.3, 1, n)
        assert wilcoxon_signed_rank(d).p == pytest.approx(sps.wilcoxon(d, method="exact").pvalue, rel=1e-9)


def test_wilcoxon_normal_branch_close_to_scipy(rng):
    d = rng.normal(0.2, 1, 60)
    res = wilcoxon_signed_rank(d)
    assert res.method == "normal"
    assert res.p == pytest.approx(sps.wilcoxon(d, method="approx", correction=False).pvalue, rel=1e-9)


def test_sign_flip_exact_examples():
    assert sign_flip_exact([1.0] * 5) == pytest.approx(2 / 32)
    assert sign_flip_exact([1.0, -1.0]) == 1.0


@given(d=st.lists(st.floats(-3, 3, allow_nan=False), min_size=2, max_size=8))
def test_sign_flip_exact_matches_enumeration(d):
    d = np.array(d)
    obs = abs(d.mean())
    hits = sum(abs(np.dot(s, d)) / d.size >= obs - 1e-12 * max(obs, 1e-300)
               for s in itertools.product((-1, 1), repeat=d.size))
    assert sign_flip_exact(d) == pytest.approx(hits / 2 ** d.size)


def test_sign_flip_monte_carlo_tracks_exact(rng):
    d = rng.normal(0.4, 1, 10)
    exact = sign_flip_exact(d)
    p = sign_flip_test(d, n_flips=20000, seed=3)
    assert abs(p - exact) < 4 * math.sqrt(exact * (1 - exact) / 20000) + 1e-4
    assert sign_flip_test(d, 500, seed=9) == sign_flip_test(d, 500, seed=9)


def test_bootstrap_coverage():
    rng = np.random.Generator(np.random.Philox(11))
    hits = 0
    reps = 300
    for i in range(reps):
        d = rng.normal(1.0, 2.0, 30)
        lo, hi = bootstrap_ci(d, 2000, 0.95, seed=i)
        hits += lo <= 1.0 <= hi
    # percentile bootstrap undercovers slightly at N=30; 3 binomial sd around 0.94
    assert 0.90 <= hits / reps <= 0.98


def test_effect_size_and_bonferroni():
    assert effect_size_dz([1.0, 2.0, 3.0]) == pytest.approx(2.0)
    assert math.isnan(effect_size_dz([1.0, 1.0]))
    thr, flags = bonferroni([0.01, 0.02, 0.04], 0.06)
    assert thr == pytest.approx(0.02) and flags == [True, False, False]
    with pytest.raises(ValueError):
        bonferroni([])


def test_paired_sample_alignment_and_compare():
    a = {"b": 2.0, "a": 1.0, "c": 4.0}
    b = {"a": 0.5, "c": 3.0, "b": 1.0}
    s = PairedSample.from_mappings(a, b)
    assert s.ids == ["a", "b", "c"] and list(s.diffs) == [0.5, 1.0, 1.0]
    with pytest.raises(ValueError):
        PairedSample.from_mappings(a, {"a": 1.0, "b": 1.0, "z": 1.0})
    rec = compare(a, b, n_flips=1000, n_boot=500, n_tests=2)
    assert rec["n"] == 3 and rec["mean_diff"] == pytest.approx(2.5 / 3)
    assert rec["alpha_corrected"] == 0.025 and rec["ci_lo"] <= rec["mean_diff"] <= rec["ci_hi"]
    assert rec == compare(a, b, n_flips=1000, n_boot=500, n_tests=2)
