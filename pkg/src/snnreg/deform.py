"""Spatial transforms: trilinear and nearest warping, SVF integration, Jacobian analysis.

Fields are ``3 x D x H x W`` arrays in voxel units; component ``i`` displaces
along spatial axis ``i``. Sampling happens at voxel centres, so grid point
``x`` samples the moving volume at ``x + u(x)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, make_result
from .tensor import core as tc

_ACC = np.float64
ROLES = ("displacement", "velocity")


@dataclass
class DisplacementField:
    """A dense 3-vector field tagged as displacement or stationary velocity."""

    u: Tensor
    role: str = "displacement"

    def __post_init__(self) -> None:
        self.u = as_tensor(self.u)
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        if self.u.ndim != 4 or self.u.shape[0] != 3:
            raise ValueError(f"field must be 3 x D x H x W, got {self.u.shape}")

    @property
    def spatial(self) -> tuple[int, int, int]:
        return self.u.shape[1:]


def _field(field, role: str) -> Tensor:
    if isinstance(field, DisplacementField):
        if field.role != role:
            raise ValueError(f"expected a {role} field, got {field.role}")
        return field.u
    u = as_tensor(field)
    if u.ndim != 4 or u.shape[0] != 3:
        raise ValueError(f"field must be 3 x D x H x W, got {u.shape}")
    return u


def identity_grid(spatial) -> np.ndarray:
    return np.stack(np.meshgrid(*[np.arange(n, dtype=_ACC) for n in spatial], indexing="ij"))


def _as_volume(x) -> tuple[Tensor, bool]:
    x = as_tensor(x)
    if x.ndim == 3:
        return tc.reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"volume must be D x H x W or C x D x H x W, got {x.shape}")
    return x, False


def _sample_coords(u: np.ndarray):
    """Clamped sample points, lower corner indices, fractions and in-range masks."""
    spatial = u.shape[1:]
    p = identity_grid(spatial) + u.astype(_ACC)
    i0s, fs, masks = [], [], []
    for ax, n in enumerate(spatial):
        pa = p[ax]
        masks.append((pa > 0) & (pa < n - 1))
        pa = np.clip(pa, 0.0, n - 1)
        i0 = np.clip(np.floor(pa).astype(np.int64), 0, max(n - 2, 0))
        i0s.append(i0)
        fs.append(pa - i0)
    return i0s, fs, masks


def warp_trilinear(moving, field) -> Tensor:
    """Sample ``moving`` at ``x + u(x)`` with trilinear weights.

    Sample points are clamped per axis to ``[0, n-1]``. Differentiable with respect
    to both the volume and the field; outside the clamp range the field gradient
    is zero.
    """
    M, squeezed = _as_volume(moving)
    u = _field(field, "displacement")
    spatial = M.shape[1:]
    if u.shape[1:] != spatial:
        raise ValueError(f"field spatial shape {u.shape[1:]} does not match volume {spatial}")
    C = M.shape[0]
    i0s, fs, masks = _sample_coords(u.data)
    strides = (spatial[1] * spatial[2], spatial[2], 1)
    flatM = M.data.reshape(C, -1).astype(_ACC, copy=False)
    nvox = int(np.prod(spatial))

    corners = []
    out = np.zeros((C,) + spatial, dtype=_ACC)
    for bits in np.ndindex(2, 2, 2):
        idx = np.zeros(spatial, dtype=np.int64)
        w = np.ones(spatial, dtype=_ACC)
        for ax, b in enumerate(bits):
            ia = np.minimum(i0s[ax] + b, spatial[ax] - 1)
            idx += ia * strides[ax]
            w *= fs[ax] if b else 1.0 - fs[ax]
        vals = flatM[:, idx]
        out += w * vals
        corners.append((bits, idx, w, vals))
    out_t = out.astype(M.dtype, copy=False)

    def back(g):
        g = g.astype(_ACC, copy=False)
        gM = gu = None
        if M.requires_grad:
            gM = np.zeros((C, nvox), dtype=_ACC)
            for _, idx, w, _ in corners:
                flat_idx = idx.reshape(-1)
                for c in range(C):
                    gM[c] += np.bincount(flat_idx, weights=(w * g[c]).reshape(-1), minlength=nvox)
            gM = gM.reshape(M.shape).astype(M.dtype)
        if u.requires_grad:
            gu = np.zeros((3,) + spatial, dtype=_ACC)
            for bits, _, _, vals in corners:
                gv = (g * vals).sum(axis=0)
                for ax in range(3):
                    dw = np.ones(spatial, dtype=_ACC) if bits[ax] else -np.ones(spatial, dtype=_ACC)
                    for other, b in enumerate(bits):
                        if other != ax:
                            dw = dw * (fs[other] if b else 1.0 - fs[other])
                    gu[ax] += dw * gv
            for ax in range(3):
                gu[ax] *= masks[ax]
            gu = gu.astype(u.dtype)
        return gM, gu

    res = make_result("warp_trilinear", out_t, (M, u), back)
    return tc.reshape(res, spatial) if squeezed else res


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def warp_nearest(labels, field) -> np.ndarray:
    """Nearest-neighbour resampling of an integer label volume (not differentiable)."""
    lab = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    if lab.dtype.kind == "f" and not np.array_equal(lab, np.round(lab)):
        raise ValueError("warp_nearest expects integer-valued labels")
    u = _field(field, "displacement").data
    spatial = lab.shape[-3:]
    if u.shape[1:] != spatial:
        raise ValueError(f"field spatial shape {u.shape[1:]} does not match labels {spatial}")
    p = identity_grid(spatial) + u.astype(_ACC)
    idx = tuple(
        np.clip(_round_half_away(p[ax]), 0, spatial[ax] - 1).astype(np.int64) for ax in range(3)
    )
    return lab[(Ellipsis,) + idx]


def svf_integrate(velocity, steps: int = 7) -> Tensor:
    """Exponentiate a stationary velocity field by scaling and squaring.

    ``u <- v / 2**steps``, then ``steps`` times ``u <- u + u o (id + u)``.
    Records on the tape, so the result is differentiable in ``v``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    v = _field(velocity, "velocity")
    u = tc.scale(v, 1.0 / 2 ** steps)
    for _ in range(steps):
        u = tc.add(u, warp_trilinear(u, u))
    if not np.isfinite(u.data).all():
        raise tc.NonFiniteError("svf_integrate: non-finite displacement")
    return u


def jacobian_determinant(field) -> np.ndarray:
    """``det(I + grad u)`` per voxel; central differences inside, one-sided at faces."""
    u = _field(field, "displacement").data.astype(_ACC)
    J = np.empty(u.shape[1:] + (3, 3), dtype=_ACC)
    for i in range(3):
        grads = np.gradient(u[i], axis=(0, 1, 2)) if min(u.shape[1:]) > 1 else None
        for j in range(3):
            d = grads[j] if grads is not None else np.zeros(u.shape[1:])
            J[..., i, j] = d + (1.0 if i == j else 0.0)
    return np.linalg.det(J)


def jacobian_analysis(field) -> tuple[np.ndarray, float, float]:
    """Determinant volume, percentage of voxels with ``det <= 0``, and SDlogJ.

    SDlogJ is the population standard deviation of ``log det`` over voxels with a
    positive determinant (NaN when there are none). Boundary voxels are included.
    """
    det = jacobian_determinant(field)
    fold = 100.0 * float(np.mean(det <= 0))
    pos = det[det > 0]
    sdlogj = float(np.std(np.log(pos))) if pos.size else float("nan")
    return det, fold, sdlogj
