"""Evaluation metrics: label Dice, HD95, image NCC, displacement statistics, retention."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion, distance_transform_edt, generate_binary_structure

from .deform import jacobian_analysis
from .losses import ncc_local
from .tensor import no_record

log = logging.getLogger(__name__)

_SIX = generate_binary_structure(3, 1)


def dice_per_label(fixed_seg, warped_seg, labels) -> tuple[dict[int, float], float]:
    """Per-label ``2|A & B| / (|A| + |B|)`` and their mean.

    Labels absent from both volumes are left out; a label present in only one of
    them scores 0.
    """
    labels = list(labels)
    if not labels:
        raise ValueError("label list is empty")
    a, b = np.asarray(fixed_seg), np.asarray(warped_seg)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    out = {}
    for c in labels:
        ma, mb = a == c, b == c
        na, nb = int(ma.sum()), int(mb.sum())
        if na + nb == 0:
            continue
        out[int(c)] = 2.0 * int((ma & mb).sum()) / (na + nb)
    mean = float(np.mean(list(out.values()))) if out else float("nan")
    return out, mean


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-connected background neighbour (outside counts as background)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~binary_erosion(mask, structure=_SIX, border_value=0)


def surface_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances from every surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    sa, sb = surface(a), surface(b)
    return distance_transform_edt(~sb)[sa]


def hd95(fixed_mask, warped_mask) -> float | None:
    """95th percentile of the pooled bidirectional surface distances; ``None`` if a mask is empty."""
    a, b = np.asarray(fixed_mask, bool), np.asarray(warped_mask, bool)
    if not a.any() or not b.any():
        log.warning("hd95: empty mask, label skipped")
        return None
    d = np.concatenate([surface_distances(a, b), surface_distances(b, a)])
    return float(np.percentile(d, 95, method="linear"))


def hd95_per_label(fixed_seg, warped_seg, labels) -> tuple[dict[int, float], float]:
    out = {}
    for c in labels:
        h = hd95(np.asarray(fixed_seg) == c, np.asarray(warped_seg) == c)
        if h is not None:
            out[int(c)] = h
    return out, float(np.mean(list(out.values()))) if out else float("nan")


def image_ncc(fixed, warped, window: int = 9, eps: float = 1e-8) -> float:
    """Mean local NCC (higher is better), the negated similarity loss."""
    with no_record():
        return -float(ncc_local(fixed, warped, window, eps).data)


def displacement_stats(field) -> tuple[float, float]:
    u = np.asarray(field.data if hasattr(field, "data") else field, dtype=np.float64)
    norms = np.sqrt((u ** 2).sum(axis=0))
    return float(norms.mean()), float(norms.max())


def retention(snn_dice: float, ann_dice: float) -> tuple[float, float]:
    """``(Dice_snn - Dice_ann, Dice_snn / Dice_ann)``."""
    if ann_dice == 0:
        raise ValueError("ann_dice must be non-zero")
    return snn_dice - ann_dice, snn_dice / ann_dice


@dataclass
class PairResult:
    pair_id: str
    dice_mean: float
    dice: dict[int, float]
    hd95_mean: float
    hd95: dict[int, float]
    ncc: float
    fold_percent: float
    sdlogj: float
    disp_mean: float
    disp_max: float
    spike_rates: dict[str, float] = field(default_factory=dict)


CSV_COLUMNS = ("pair_id", "dice_mean", "hd95_mean", "ncc", "fold_percent", "sdlogj", "disp_mean", "disp_max")


def evaluate_pair(pair_id, fixed, fixed_seg, warped, warped_seg, field, labels, window: int = 9,
                  spike_rates=None) -> PairResult:
    dice, dmean = dice_per_label(fixed_seg, warped_seg, labels)
    hd, hmean = hd95_per_label(fixed_seg, warped_seg, labels)
    _, fold, sdlogj = jacobian_analysis(field)
    dm, dx = displacement_stats(field)
    return PairResult(str(pair_id), dmean, dice, hmean, hd, image_ncc(fixed, warped, window), fold, sdlogj, dm, dx,
                      dict(spike_rates or {}))


def results_to_csv(results, extra: dict | None = None) -> str:
    """Rows in :data:`CSV_COLUMNS` order, preceded by ``# key=value`` provenance lines."""
    buf = io.StringIO()
    for k, v in (extra or {}).items():
        buf.write(f"# {k}={v}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in sorted(results, key=lambda r: r.pair_id):
        w.writerow([r.pair_id] + [repr(float(getattr(r, c))) for c in CSV_COLUMNS[1:]])
    return buf.getvalue()


def read_results_csv(text: str) -> dict[str, dict[str, float]]:
    rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    reader = csv.DictReader(rows)
    return {r["pair_id"]: {k: float(v) for k, v in r.items() if k != "pair_id"} for r in reader}
