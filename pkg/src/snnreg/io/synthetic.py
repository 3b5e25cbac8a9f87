"""Synthetic deformable pairs: labelled blob phantoms warped by a smooth diffeomorphism."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from ..deform import DisplacementField, jacobian_analysis, svf_integrate, warp_nearest, warp_trilinear
from ..tensor import no_record

log = logging.getLogger(__name__)


@dataclass
class SyntheticPair:
    fixed: np.ndarray
    moving: np.ndarray
    fixed_labels: np.ndarray
    moving_labels: np.ndarray
    velocity: np.ndarray
    displacement: np.ndarray
    seed: int
    amplitude: float
    classes: int


def make_phantom(shape, classes: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Overlapping ellipsoids with labels ``1..classes`` over a smooth textured background."""
    shape = tuple(int(n) for n in shape)
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij"))
    labels = np.zeros(shape, dtype=np.int16)
    base = np.zeros(shape)
    n_min = min(shape)
    body_r = np.array(shape) * rng.uniform(0.36, 0.44, size=3)
    centre = (np.array(shape) - 1) / 2 + rng.uniform(-1, 1, size=3)
    body = (((grid - centre[:, None, None, None]) / body_r[:, None, None, None]) ** 2).sum(0) <= 1
    base[body] = 0.2
    for c in range(1, classes + 1):
        radii = rng.uniform(0.12, 0.24, size=3) * n_min
        ctr = centre + rng.uniform(-0.45, 0.45, size=3) * (body_r - radii)
        inside = (((grid - ctr[:, None, None, None]) / radii[:, None, None, None]) ** 2).sum(0) <= 1
        inside &= body
        labels[inside] = c
        base[inside] = rng.uniform(0.35, 1.0)
    texture = gaussian_filter(rng.normal(size=shape), 1.5)
    texture *= 0.08 / (np.abs(texture).max() + 1e-12)
    image = gaussian_filter(base, 0.7) + texture * body
    return image, labels


def smooth_velocity(shape, amplitude: float, smoothness: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian-smoothed white noise rescaled so that the largest vector norm is ``amplitude``."""
    v = np.stack([gaussian_filter(rng.normal(size=shape), smoothness, mode="wrap") for _ in range(3)])
    peak = np.sqrt((v ** 2).sum(0)).max()
    return v * (amplitude / peak) if peak > 0 else v


def generate_pair(shape=(32, 32, 32), classes: int = 4, amplitude: float = 2.0, smoothness: float = 4.0,
                  seed: int = 0, max_retries: int = 8) -> SyntheticPair:
    """Draw a phantom (the moving image), a smooth SVF and the warped fixed image/labels, deterministically."""
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    if np.isscalar(shape):
        shape = (int(shape),) * 3
    rng = np.random.Generator(np.random.Philox(seed))
    moving, labels = make_phantom(shape, classes, rng)
    moving = rescale01(moving)
    v_unit = smooth_velocity(shape, 1.0, smoothness, rng)
    amp = float(amplitude)
    for _ in range(max_retries):
        v = v_unit * amp
        with no_record():
            u = svf_integrate(DisplacementField(v, "velocity")).data
        _, fold, _ = jacobian_analysis(u)
        if fold == 0:
            break
        log.warning("generated field folds (%.3f%%) at amplitude %.3f; retrying at %.3f", fold, amp, 0.8 * amp)
        amp *= 0.8
    else:
        raise RuntimeError("could not generate a fold-free field")
    # The phantom is the moving image and the fixed image is its pull-back, so
    # ``u`` is exactly the field a registration should recover:
    # warp_nearest(moving_labels, u) reproduces fixed_labels voxel for voxel.
    with no_record():
        fixed = warp_trilinear(moving, u).data
    return SyntheticPair(
        fixed=fixed,
        moving=moving,
        fixed_labels=warp_nearest(labels, u),
        moving_labels=labels,
        velocity=v,
        displacement=u,
        seed=seed,
        amplitude=amp,
        classes=classes,
    )


def rescale01(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def generate_dataset(n_pairs: int, shape=(32, 32, 32), classes: int = 4, amplitude: float = 2.0,
                     smoothness: float = 4.0, seed: int = 42) -> list[SyntheticPair]:
    """``n_pairs`` independent pairs; pair ``i`` uses seed ``seed * 1000 + i``."""
    return [generate_pair(shape, classes, amplitude, smoothness, seed * 1000 + i) for i in range(n_pairs)]
