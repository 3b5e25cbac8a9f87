"""Minimal NIfTI-1 reader/writer for uncompressed single-file volumes.

Only the header fields needed for 3D scalar volumes are interpreted. Byte
order is detected from ``dim[0]``, which must lie in ``1..7``. Voxel data is
stored x-fastest; the returned array is indexed ``[x, y, z]``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HEADER_SIZE = 348
OFF_SIZEOF_HDR = 0
OFF_DIM = 40
OFF_DATATYPE = 70
OFF_BITPIX = 72
OFF_PIXDIM = 76
OFF_VOX_OFFSET = 108
OFF_SCL_SLOPE = 112
OFF_SCL_INTER = 116
OFF_DESCRIP = 148
OFF_QFORM_CODE = 252
OFF_SFORM_CODE = 254
OFF_SROW_X = 280
OFF_MAGIC = 344

DTYPES = {2: ("u8", np.uint8), 4: ("i16", np.int16), 16: ("f32", np.float32), 64: ("f64", np.float64)}
CODES = {name: code for code, (name, _) in DTYPES.items()}


class NiftiError(ValueError):
    """Base class for malformed NIfTI input."""


class BadMagicError(NiftiError):
    pass


class UnsupportedDtypeError(NiftiError):
    pass


class TruncatedPayloadError(NiftiError):
    pass


class BadHeaderError(NiftiError):
    pass


@dataclass
class VolumeFile:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    dtype: str
    data: np.ndarray
    source: str

    def __post_init__(self) -> None:
        if self.data.shape != tuple(self.dims):
            raise ValueError(f"payload shape {self.data.shape} does not match dims {self.dims}")


def _endian(hdr: bytes) -> str:
    for e in ("<", ">"):
        d0 = struct.unpack_from(e + "h", hdr, OFF_DIM)[0]
        if 1 <= d0 <= 7:
            return e
    raise BadHeaderError(f"dim[0] at byte offset {OFF_DIM} is not in 1..7 in either byte order")


def parse_header(hdr: bytes) -> dict:
    if len(hdr) < HEADER_SIZE:
        raise TruncatedPayloadError(f"header is {len(hdr)} bytes; expected {HEADER_SIZE} (offset 0)")
    e = _endian(hdr)
    sizeof_hdr = struct.unpack_from(e + "i", hdr, OFF_SIZEOF_HDR)[0]
    if sizeof_hdr != HEADER_SIZE:
        raise BadHeaderError(f"sizeof_hdr at byte offset {OFF_SIZEOF_HDR} is {sizeof_hdr}, expected 348")
    magic = hdr[OFF_MAGIC:OFF_MAGIC + 4]
    if magic not in (b"n+1\0", b"ni1\0"):
        raise BadMagicError(f"magic field at byte offset {OFF_MAGIC} is {magic!r}; expected b'n+1\\0' or b'ni1\\0'")
    dim = struct.unpack_from(e + "8h", hdr, OFF_DIM)
    code = struct.unpack_from(e + "h", hdr, OFF_DATATYPE)[0]
    if code not in DTYPES:
        raise UnsupportedDtypeError(f"datatype code {code} at byte offset {OFF_DATATYPE} is not one of {sorted(DTYPES)}")
    return {
        "endian": e,
        "dim": dim,
        "datatype": code,
        "bitpix": struct.unpack_from(e + "h", hdr, OFF_BITPIX)[0],
        "pixdim": struct.unpack_from(e + "8f", hdr, OFF_PIXDIM),
        "vox_offset": struct.unpack_from(e + "f", hdr, OFF_VOX_OFFSET)[0],
        "scl_slope": struct.unpack_from(e + "f", hdr, OFF_SCL_SLOPE)[0],
        "scl_inter": struct.unpack_from(e + "f", hdr, OFF_SCL_INTER)[0],
        "magic": magic,
    }


def read_nifti1(path) -> VolumeFile:
    """Read a 3D scalar ``.nii`` (or ``ni1`` header/image pair) as a float32 volume."""
    path = Path(path)
    raw = path.read_bytes()
    h = parse_header(raw[:HEADER_SIZE])
    ndim = h["dim"][0]
    dims = tuple(int(n) for n in h["dim"][1:4])
    if ndim < 3 or any(n > 1 for n in h["dim"][4:ndim + 1]) or min(dims) < 1:
        raise BadHeaderError(f"dim field at byte offset {OFF_DIM} describes {h['dim']}, not a 3D scalar volume")
    name, np_dtype = DTYPES[h["datatype"]]
    if h["magic"] == b"ni1\0":
        payload, start = path.with_suffix(".img").read_bytes(), 0
    else:
        payload, start = raw, int(h["vox_offset"])
    nbytes = int(np.prod(dims)) * np.dtype(np_dtype).itemsize
    if len(payload) < start + nbytes:
        raise TruncatedPayloadError(
            f"payload needs bytes {start}..{start + nbytes} but the file ends at byte {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=np.dtype(np_dtype).newbyteorder(h["endian"]), count=int(np.prod(dims)),
                        offset=start)
    data = arr.reshape(dims, order="F").astype(np.float64)
    slope, inter = h["scl_slope"], h["scl_inter"]
    if slope not in (0.0,) and np.isfinite(slope):
        data = data * slope + (inter if np.isfinite(inter) else 0.0)
    spacing = tuple(float(abs(s)) for s in h["pixdim"][1:4])
    return VolumeFile(dims, spacing, name, data.astype(np.float32), "nifti1")


def build_header(dims, dtype: str = "f32", spacing=(1.0, 1.0, 1.0), endian: str = "<",
                 magic: bytes = b"n+1\0", scl_slope: float = 1.0, scl_inter: float = 0.0) -> bytearray:
    code = CODES[dtype]
    itemsize = np.dtype(DTYPES[code][1]).itemsize
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into(endian + "i", hdr, OFF_SIZEOF_HDR, HEADER_SIZE)
    struct.pack_into(endian + "8h", hdr, OFF_DIM, 3, *[int(n) for n in dims], 1, 1, 1, 1)
    struct.pack_into(endian + "h", hdr, OFF_DATATYPE, code)
    struct.pack_into(endian + "h", hdr, OFF_BITPIX, 8 * itemsize)
    struct.pack_into(endian + "8f", hdr, OFF_PIXDIM, 1.0, *[float(s) for s in spacing], 0, 0, 0, 0)
    struct.pack_into(endian + "f", hdr, OFF_VOX_OFFSET, 352.0)
    struct.pack_into(endian + "f", hdr, OFF_SCL_SLOPE, scl_slope)
    struct.pack_into(endian + "f", hdr, OFF_SCL_INTER, scl_inter)
    struct.pack_into(endian + "h", hdr, OFF_SFORM_CODE, 1)
    for row, off in enumerate((OFF_SROW_X, OFF_SROW_X + 16, OFF_SROW_X + 32)):
        vals = [0.0, 0.0, 0.0, 0.0]
        vals[row] = float(spacing[row])
        struct.pack_into(endian + "4f", hdr, off, *vals)
    hdr[OFF_MAGIC:OFF_MAGIC + 4] = magic
    return hdr


def write_nifti1(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0), dtype: str = "f32", endian: str = "<") -> None:
    """Write a single-file ``n+1`` volume (352-byte prefix, x-fastest payload)."""
    data = np.asarray(data)
    if data.ndim != 3:
        raise ValueError("write_nifti1 expects a 3D array")
    np_dtype = np.dtype(DTYPES[CODES[dtype]][1]).newbyteorder(endian)
    hdr = build_header(data.shape, dtype, spacing, endian)
    payload = np.asarray(data, dtype=np_dtype).tobytes(order="F")
    Path(path).write_bytes(bytes(hdr) + b"\0\0\0\0" + payload)
