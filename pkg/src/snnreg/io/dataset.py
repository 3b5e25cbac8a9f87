"""On-disk pair directories: one native volume per image and label map plus a manifest."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .synthetic import SyntheticPair
from .volumes import read_native, read_volume, write_native

SPLITS = ("train", "calib", "test")


def write_pair(directory, pair: SyntheticPair) -> None:
    d = Path(directory)
    write_native(d / "fixed", pair.fixed, "f32")
    write_native(d / "moving", pair.moving, "f32")
    write_native(d / "fixed_labels", pair.fixed_labels, "i16")
    write_native(d / "moving_labels", pair.moving_labels, "i16")
    for axis in range(3):
        write_native(d / f"true_u{axis}", pair.displacement[axis], "f32")
    (d / "pair.json").write_text(
        json.dumps({"seed": pair.seed, "amplitude": pair.amplitude, "classes": pair.classes}, sort_keys=True) + "\n"
    )


def read_pair(directory) -> SyntheticPair:
    d = Path(directory)
    meta_path = d / "pair.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"not a pair directory (no pair.json): {d}")
    meta = json.loads(meta_path.read_text())
    fixed = read_native(d / "fixed").data.astype(np.float32)
    disp = np.stack([read_native(d / f"true_u{a}").data for a in range(3)]).astype(np.float64)
    return SyntheticPair(
        fixed=fixed,
        moving=read_native(d / "moving").data.astype(np.float32),
        fixed_labels=read_native(d / "fixed_labels").data.astype(np.int64),
        moving_labels=read_native(d / "moving_labels").data.astype(np.int64),
        velocity=np.zeros_like(disp),
        displacement=disp,
        seed=int(meta["seed"]),
        amplitude=float(meta["amplitude"]),
        classes=int(meta["classes"]),
    )


def write_dataset(root, splits: dict[str, list[SyntheticPair]], provenance: dict) -> None:
    root = Path(root)
    manifest = {"provenance": provenance, "splits": {}}
    for name, pairs in splits.items():
        ids = []
        for i, pair in enumerate(pairs):
            pid = f"{name}_{i:03d}"
            write_pair(root / name / pid, pair)
            ids.append(pid)
        manifest["splits"][name] = ids
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def read_split(root, split: str) -> list[SyntheticPair]:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"dataset manifest not found: {path} (run gen-data first)")
    manifest = json.loads(path.read_text())
    if split not in manifest["splits"]:
        raise KeyError(f"split {split!r} not in {sorted(manifest['splits'])}")
    return [read_pair(root / split / pid) for pid in manifest["splits"][split]]


def load_image_pair(fixed_path, moving_path, fixed_labels=None, moving_labels=None, classes: int | None = None):
    """Assemble a pair from arbitrary volume files (native ``.raw``/``.hdr`` or NIfTI-1)."""
    from .volumes import preprocess

    fixed = preprocess(read_volume(fixed_path)).astype(np.float32)
    moving = preprocess(read_volume(moving_path)).astype(np.float32)
    if fixed.shape != moving.shape:
        raise ValueError(f"fixed {fixed.shape} and moving {moving.shape} shapes differ")
    fl = read_volume(fixed_labels).data.astype(np.int64) if fixed_labels else np.zeros(fixed.shape, np.int64)
    ml = read_volume(moving_labels).data.astype(np.int64) if moving_labels else np.zeros(fixed.shape, np.int64)
    n = classes if classes is not None else int(max(fl.max(), ml.max()))
    zeros = np.zeros((3,) + fixed.shape)
    return SyntheticPair(fixed, moving, fl, ml, zeros, zeros, -1, 0.0, n)
