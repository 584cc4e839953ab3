"""Address-event streams, SEVT files and spike-tensor datasets.

SEVT layout (little-endian)::

    magic  b"SEVT"
    u16    version (= 1)
    u16    width
    u16    height
    u64    count
    count x {u32 t_us, u16 x, u16 y, u8 polarity}   # packed, 9 bytes each
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, InputError
from .quant import rng_stream

MAGIC = b"SEVT"
VERSION = 1
_HEADER = struct.Struct("<4sHHHQ")

EVENT_DTYPE = np.dtype([("t_us", "<u4"), ("x", "<u2"), ("y", "<u2"), ("polarity", "u1")])
assert EVENT_DTYPE.itemsize == 9


def make_events(records) -> np.ndarray:
    """Build an event array from ``(t_us, x, y, polarity)`` tuples."""
    return np.array([tuple(r) for r in records], dtype=EVENT_DTYPE)


def validate_events(events, width, height):
    if events.dtype != EVENT_DTYPE:
        events = events.astype(EVENT_DTYPE)
    bad = np.flatnonzero((events["x"] >= width) | (events["y"] >= height) | (events["polarity"] > 1))
    if bad.size:
        i = int(bad[0])
        raise DataError(f"record {i} out of bounds: {events[i]} for sensor {width}x{height}")
    if events.size > 1:
        dec = np.flatnonzero(np.diff(events["t_us"].astype(np.int64)) < 0)
        if dec.size:
            raise DataError(f"timestamps decrease at record {int(dec[0]) + 1}")
    return events


def write_events(path, events, width: int, height: int):
    events = validate_events(np.asarray(events), width, height)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, width, height, events.size))
        f.write(events.tobytes())


def read_events(path):
    """Return ``((width, height), events)``; the whole file is validated first."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, width, height, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    body = data[_HEADER.size :]
    if len(body) != count * EVENT_DTYPE.itemsize:
        raise FormatError(f"{path}: expected {count} records, body has {len(body)} bytes")
    events = np.frombuffer(body, dtype=EVENT_DTYPE).copy()
    return (width, height), validate_events(events, width, height)


def bin_events(events, dt_us: int, steps: int, width: int, height: int) -> np.ndarray:
    """Bin events into a binary ``(T, 2, H, W)`` spike tensor.

    Events past the last bin are dropped; repeated events in one cell saturate.
    """
    if dt_us <= 0 or steps < 1:
        raise InputError("dt_us must be > 0 and steps >= 1")
    out = np.zeros((steps, 2, height, width), dtype=np.uint8)
    events = np.asarray(events, dtype=EVENT_DTYPE)
    b = events["t_us"].astype(np.int64) // dt_us
    keep = b < steps
    out[b[keep], events["polarity"][keep], events["y"][keep], events["x"][keep]] = 1
    return out


@dataclass
class DatasetManifest:
    n_classes: int
    samples: dict  # class -> list of sample ids
    split: str
    seed: int | None = None


@dataclass
class Dataset:
    X: np.ndarray  # (N, T, 2, H, W) uint8
    y: np.ndarray
    manifest: DatasetManifest
    ids: list = field(default_factory=list)


def class_masks(n_classes, dims, seed, density=0.25):
    h, w = dims
    return [rng_stream(seed, 10, c).random((2, h, w)) < density for c in range(n_classes)]


def synth_sample(mask, steps, rate_hi, rate_lo, seed, label, index):
    rng = rng_stream(seed, 11, label, index)
    prob = np.where(mask, rate_hi, rate_lo)
    return (rng.random((steps,) + mask.shape) < prob).astype(np.uint8)


def synth_dataset(
    n_classes: int,
    samples_per_class: int,
    dims=(16, 16),
    steps: int = 50,
    rate_hi: float = 0.2,
    rate_lo: float = 0.05,
    seed: int = 0,
    split: str = "train",
    start: int = 0,
) -> Dataset:
    """Bernoulli spike tensors around a fixed random pixel mask per class.

    Sample ``k`` of class ``c`` depends only on ``(seed, c, start + k)``, so
    train and test sets drawn with disjoint ``start`` ranges never overlap.
    """
    if not (0.0 <= rate_lo < rate_hi <= 1.0):
        raise InputError(f"need 0 <= rate_lo < rate_hi <= 1, got {rate_lo}, {rate_hi}")
    masks = class_masks(n_classes, dims, seed)
    X, y, ids = [], [], []
    samples = {}
    for k in range(samples_per_class):
        for c in range(n_classes):
            idx = start + k
            X.append(synth_sample(masks[c], steps, rate_hi, rate_lo, seed, c, idx))
            y.append(c)
            ids.append((c, idx))
            samples.setdefault(c, []).append(idx)
    X = np.stack(X) if X else np.zeros((0, steps, 2) + tuple(dims), dtype=np.uint8)
    return Dataset(X, np.asarray(y, dtype=np.int64), DatasetManifest(n_classes, samples, split, seed), ids)


def synth_split(n_classes, n_train, n_test, dims=(16, 16), steps=50, rate_hi=0.2, rate_lo=0.05, seed=0):
    train = synth_dataset(n_classes, n_train, dims, steps, rate_hi, rate_lo, seed, "train", 0)
    test = synth_dataset(n_classes, n_test, dims, steps, rate_hi, rate_lo, seed, "test", n_train)
    return train, test


def load_sevt_dataset(manifest_path, split: str, dt_us: int = 1000, steps: int = 50) -> Dataset:
    """Load a split listed in a JSON manifest of SEVT files.

    The manifest holds ``{"n_classes": int, "train": [{"path", "label"}...],
    "test": [...]}``; paths are relative to the manifest.
    """
    manifest_path = Path(manifest_path)
    try:
        meta = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: {exc}") from None
    entries = meta.get(split)
    if entries is None:
        raise DataError(f"{manifest_path}: no {split!r} split")
    n_classes = int(meta["n_classes"])
    X, y, samples = [], [], {}
    for i, entry in enumerate(entries):
        label = int(entry["label"])
        if not 0 <= label < n_classes:
            raise DataError(f"{manifest_path}: entry {i} label {label} outside [0, {n_classes})")
        (w, h), ev = read_events(manifest_path.parent / entry["path"])
        X.append(bin_events(ev, dt_us, steps, w, h))
        y.append(label)
        samples.setdefault(label, []).append(entry["path"])
    if not X:
        raise DataError(f"{manifest_path}: split {split!r} is empty")
    shapes = {x.shape for x in X}
    if len(shapes) != 1:
        raise DataError(f"{manifest_path}: sensor sizes differ within split: {sorted(shapes)}")
    return Dataset(
        np.stack(X), np.asarray(y, dtype=np.int64), DatasetManifest(n_classes, samples, split), [e["path"] for e in entries]
    )


def split_is_disjoint(a: DatasetManifest, b: DatasetManifest) -> bool:
    for c, ids in a.samples.items():
        if set(ids) & set(b.samples.get(c, [])):
            return False
    return True


__all__ = [
    "EVENT_DTYPE",
    "make_events",
    "write_events",
    "read_events",
    "bin_events",
    "Dataset",
    "DatasetManifest",
    "synth_dataset",
    "synth_split",
    "load_sevt_dataset",
    "split_is_disjoint",
]
