"""Paired statistics: sign-flip permutation, Wilcoxon signed-rank, bootstrap CI, d_z, Bonferroni.

Randomized procedures draw from ``numpy.random.Generator(Philox(seed))``, a
counter-based generator whose stream is identical across platforms.
"""
from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

log = logging.getLogger(__name__)

EXACT_WILCOXON_MAX_N = 25
_TIE_RTOL = 1e-12


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class PairedSample:
    ids: list[str]
    a: np.ndarray
    b: np.ndarray

    @classmethod
    def from_mappings(cls, a: dict, b: dict) -> "PairedSample":
        """Align two ``{pair_id: value}`` mappings by id."""
        if set(a) != set(b):
            raise ValueError(f"pair ids differ: {sorted(set(a) ^ set(b))}")
        ids = sorted(a)
        if len(ids) < 2:
            raise ValueError("need at least two pairs")
        return cls(ids, np.array([a[i] for i in ids], float), np.array([b[i] for i in ids], float))

    @property
    def diffs(self) -> np.ndarray:
        return self.a - self.b


def _diffs(x) -> np.ndarray:
    d = x.diffs if isinstance(x, PairedSample) else np.asarray(x, dtype=np.float64)
    if d.ndim != 1 or d.size < 2:
        raise ValueError("need a 1-D sample of at least two differences")
    return d


def _ge(stat: np.ndarray, obs: float) -> np.ndarray:
    return stat >= obs - _TIE_RTOL * max(abs(obs), 1e-300)


def sign_flip_test(sample, n_flips: int = 20000, seed: int = 0, chunk: int = 4096) -> float:
    """Two-sided sign-flip test on ``|mean(d)|`` with ``(k + 1) / (n_flips + 1)`` smoothing."""
    d = _diffs(sample)
    obs = abs(d.mean())
    rng = make_rng(seed)
    k = 0
    done = 0
    while done < n_flips:
        m = min(chunk, n_flips - done)
        signs = rng.integers(0, 2, size=(m, d.size)) * 2 - 1
        k += int(_ge(np.abs(signs @ d) / d.size, obs).sum())
        done += m
    return (k + 1) / (n_flips + 1)


def sign_flip_exact(sample) -> float:
    """Exhaustive two-sided sign-flip p-value over all ``2**N`` patterns."""
    d = _diffs(sample)
    signs = np.array(list(itertools.product((-1, 1), repeat=d.size)))
    return float(_ge(np.abs(signs @ d) / d.size, abs(d.mean())).mean())


@dataclass
class WilcoxonResult:
    w: float
    w_plus: float
    w_minus: float
    p: float
    n: int
    method: str
    degenerate: bool = False


def _exact_cdf(doubled_ranks: np.ndarray, w2: int) -> float:
    """P(W+ <= w) under random signs, by dynamic programming over integer doubled ranks."""
    total = int(doubled_ranks.sum())
    dist = np.zeros(total + 1)
    dist[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        nxt = dist.copy()
        nxt[r:] += dist[: total + 1 - r]
        dist = nxt * 0.5
    return float(dist[: w2 + 1].sum())


def wilcoxon_signed_rank(sample) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test; zero differences are dropped.

    Ranks use the average of tied positions. ``N <= 25`` uses the exact null
    distribution (ties included), larger ``N`` a tie-corrected normal approximation.
    """
    d = _diffs(sample)
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(0.0, 0.0, 0.0, 1.0, 0, "degenerate", True)
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= EXACT_WILCOXON_MAX_N:
        doubled = np.rint(2 * ranks).astype(np.int64)
        p = min(1.0, 2.0 * _exact_cdf(doubled, int(round(2 * w))))
        method = "exact"
    else:
        _, counts = np.unique(ranks, return_counts=True)
        mean = n * (n + 1) / 4
        var = n * (n + 1) * (2 * n + 1) / 24 - float(((counts ** 3) - counts).sum()) / 48
        z = (w - mean) / math.sqrt(var) if var > 0 else 0.0
        p = min(1.0, 2.0 * float(norm.cdf(z)))
        method = "normal"
    return WilcoxonResult(w, w_plus, w_minus, p, n, method)


def wilcoxon_exhaustive(sample) -> float:
    """Enumeration oracle: fraction of sign patterns whose ``min(W+, W-)`` is at most the observed."""
    d = _diffs(sample)
    d = d[d != 0]
    ranks = rankdata(np.abs(d))
    obs = min(ranks[d > 0].sum(), ranks[d < 0].sum())
    total = ranks.sum()
    hits = 0
    patterns = list(itertools.product((0, 1), repeat=d.size))
    for bits in patterns:
        wp = float(np.dot(bits, ranks))
        if min(wp, total - wp) <= obs + 1e-9:
            hits += 1
    return hits / len(patterns)


def bootstrap_ci(sample, n_boot: int = 10000, level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for ``mean(d)`` over resampled pairs."""
    d = _diffs(sample)
    rng = make_rng(seed)
    idx = rng.integers(0, d.size, size=(n_boot, d.size))
    means = d[idx].mean(axis=1)
    alpha = (1 - level) / 2
    lo, hi = np.percentile(means, [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi)


def effect_size_dz(sample) -> float:
    """``mean(d) / sd(d)`` with the N-1 sample sd; NaN (logged) when sd is zero."""
    d = _diffs(sample)
    sd = float(np.std(d, ddof=1))
    if sd == 0:
        log.warning("d_z undefined: zero standard deviation of differences")
        return float("nan")
    return float(d.mean()) / sd


def bonferroni(p_values, alpha: float = 0.05) -> tuple[float, list[bool]]:
    """Per-test threshold ``alpha / K`` and the significance flags ``p < alpha / K``."""
    p = list(p_values)
    if not p:
        raise ValueError("need at least one p-value")
    thr = alpha / len(p)
    return thr, [pi < thr for pi in p]


def compare(a: dict, b: dict, n_flips: int = 20000, n_boot: int = 10000, seed: int = 0, n_tests: int = 1,
            alpha: float = 0.05) -> dict:
    """Full paired comparison record of method A against method B."""
    s = PairedSample.from_mappings(a, b)
    wil = wilcoxon_signed_rank(s)
    p_sf = sign_flip_test(s, n_flips, seed)
    lo, hi = bootstrap_ci(s, n_boot, 0.95, seed)
    thr = alpha / n_tests
    return {
        "n": len(s.ids),
        "mean_diff": float(s.diffs.mean()),
        "p_signflip": p_sf,
        "p_wilcoxon": wil.p,
        "wilcoxon_w": wil.w,
        "wilcoxon_method": wil.method,
        "ci_lo": lo,
        "ci_hi": hi,
        "d_z": effect_size_dz(s),
        "alpha_corrected": thr,
        "significant": p_sf < thr,
    }
