"""Native volume format and intensity preprocessing.

A native volume is two files: ``name.raw`` holds the C-order payload and
``name.hdr`` is a sidecar of ``key = value`` lines::

    dims = 32 32 32
    dtype = f32
    spacing = 1.0 1.0 1.0
    endianness = little
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .nifti import VolumeFile

log = logging.getLogger(__name__)

NATIVE_DTYPES = {"u8": np.uint8, "i16": np.int16, "f32": np.float32, "f64": np.float64}


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".raw", ".hdr") else p
    return stem.with_suffix(".raw"), stem.with_suffix(".hdr")


def write_native(path, data: np.ndarray, dtype: str = "f32", spacing=(1.0, 1.0, 1.0), endianness: str = "little") -> None:
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError("native volumes are 3D")
    if dtype not in NATIVE_DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    order = {"little": "<", "big": ">"}[endianness]
    raw, hdr = _paths(path)
    raw.parent.mkdir(parents=True, exist_ok=True)
    raw.write_bytes(data.astype(np.dtype(NATIVE_DTYPES[dtype]).newbyteorder(order)).tobytes(order="C"))
    hdr.write_text(
        f"dims = {' '.join(str(n) for n in data.shape)}\n"
        f"dtype = {dtype}\n"
        f"spacing = {' '.join(repr(float(s)) for s in spacing)}\n"
        f"endianness = {endianness}\n"
    )


def read_native(path) -> VolumeFile:
    raw, hdr = _paths(path)
    fields = {}
    for line in hdr.read_text().splitlines():
        if line.strip() and not line.lstrip().startswith("#"):
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
    missing = {"dims", "dtype", "spacing", "endianness"} - set(fields)
    if missing:
        raise ValueError(f"{hdr}: missing header keys {sorted(missing)}")
    dims = tuple(int(n) for n in fields["dims"].split())
    dtype = fields["dtype"]
    if dtype not in NATIVE_DTYPES or len(dims) != 3:
        raise ValueError(f"{hdr}: bad dims/dtype")
    order = {"little": "<", "big": ">"}[fields["endianness"]]
    npd = np.dtype(NATIVE_DTYPES[dtype]).newbyteorder(order)
    payload = raw.read_bytes()
    if len(payload) != int(np.prod(dims)) * npd.itemsize:
        raise ValueError(f"{raw}: payload is {len(payload)} bytes, expected {int(np.prod(dims)) * npd.itemsize}")
    data = np.frombuffer(payload, dtype=npd).reshape(dims).astype(npd.newbyteorder("="))
    spacing = tuple(float(s) for s in fields["spacing"].split())
    return VolumeFile(dims, spacing, dtype, data, "native")


def read_volume(path) -> VolumeFile:
    p = Path(path)
    if p.suffix == ".nii":
        from .nifti import read_nifti1

        return read_nifti1(p)
    return read_native(p)


def preprocess(volume, lo_pct: float = 0.5, hi_pct: float = 99.5) -> np.ndarray:
    """Clip to the ``[lo_pct, hi_pct]`` percentiles and rescale linearly to ``[0, 1]``."""
    x = np.asarray(volume.data if isinstance(volume, VolumeFile) else volume, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty volume")
    lo, hi = np.percentile(x, [lo_pct, hi_pct])
    if hi <= lo:
        log.warning("preprocess: constant volume, returning zeros")
        return np.zeros_like(x)
    return (np.clip(x, lo, hi) - lo) / (hi - lo)
