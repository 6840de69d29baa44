"""Volumetric containers, the ``.vol``/``.json`` file pair, and grid resampling.

Arrays are always ordered (depth, height, width) and serialized C-order.
"""

from __future__ import annotations

import enum
import gzip
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ArgumentError, VolumeFormatError, VolumeVersionError

FORMAT_VERSION = 1
MIN_AXIS = 8
NUM_LABELS = 9

LABEL_NAMES = {
    0: "background",
    1: "right_frontal",
    2: "left_frontal",
    3: "right_temporal",
    4: "left_temporal",
    5: "occipital",
    6: "right_parietal",
    7: "left_parietal",
    8: "suture",
}
BONE_LABELS = (1, 2, 3, 4, 5, 6, 7)
SUTURE_LABEL = 8


class Modality(str, enum.Enum):
    MRI = "MRI"
    CT = "CT"
    SCT = "SCT"


def _check_spacing(spacing):
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ArgumentError(f"spacing_mm must be three positive reals, got {spacing}")
    return spacing


def _check_shape(shape):
    if len(shape) != 3:
        raise ArgumentError(f"expected a 3D grid, got shape {shape}")
    if min(shape) < MIN_AXIS:
        raise ArgumentError(f"every axis must be >= {MIN_AXIS}, got {shape}")


@dataclass
class Volume:
    """Scalar intensity grid with physical spacing and a modality tag."""

    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    modality: Modality = Modality.CT

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        _check_shape(self.data.shape)
        self.spacing_mm = _check_spacing(self.spacing_mm)
        self.modality = Modality(self.modality)
        if not np.all(np.isfinite(self.data)):
            raise ArgumentError("volume data contains NaN or Inf")

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data, modality=None):
        return Volume(data, self.spacing_mm, self.modality if modality is None else modality)


@dataclass
class LabelMap:
    """Integer code grid; codes follow ``LABEL_NAMES``."""

    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype.kind == "f":
            if not np.all(arr == np.round(arr)):
                raise ArgumentError("label data must be integral")
        if arr.size and (arr.min() < 0 or arr.max() >= NUM_LABELS):
            raise ArgumentError(f"label codes must lie in 0..{NUM_LABELS - 1}")
        self.data = np.ascontiguousarray(arr, dtype=np.uint8)
        _check_shape(self.data.shape)
        self.spacing_mm = _check_spacing(self.spacing_mm)

    @property
    def shape(self):
        return self.data.shape

    def one_hot(self):
        return np.eye(NUM_LABELS, dtype=np.float32)[self.data].transpose(3, 0, 1, 2)


@dataclass
class SubjectRecord:
    subject_id: str
    age_days: int
    sex: str
    mri: Volume
    ct: Volume
    labels: LabelMap
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.age_days <= 0:
            raise ArgumentError("age_days must be positive")
        if self.sex not in ("M", "F"):
            raise ArgumentError(f"sex must be 'M' or 'F', got {self.sex!r}")


# ---------------------------------------------------------------------------
# file format


def _base_path(path):
    path = Path(path)
    name = path.name
    for suffix in (".vol.gz", ".vol", ".json"):
        if name.endswith(suffix):
            return path.with_name(name[: -len(suffix)])
    return path


def save_volume(v, path, compress=False):
    """Write ``v`` as ``<name>.vol`` (or ``.vol.gz``) plus a ``<name>.json`` sidecar.

    ``path`` may be given with or without the ``.vol``/``.vol.gz`` suffix; a
    ``.vol.gz`` suffix implies ``compress=True``. Returns the payload path.
    """
    compress = compress or str(path).endswith(".gz")
    base = _base_path(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(v, LabelMap):
        payload = v.data.astype("u1").tobytes(order="C")
        modality, dtype = "LABEL", "u8"
    elif isinstance(v, Volume):
        payload = v.data.astype("<f4").tobytes(order="C")
        modality, dtype = v.modality.value, "f32"
    else:
        raise ArgumentError(f"cannot save object of type {type(v).__name__}")
    header = {
        "shape": [int(s) for s in v.shape],
        "spacing_mm": [float(s) for s in v.spacing_mm],
        "modality": modality,
        "dtype": dtype,
        "version": FORMAT_VERSION,
    }
    vol_path = base.with_name(base.name + (".vol.gz" if compress else ".vol"))
    if compress:
        # mtime pinned so identical payloads give identical files
        with open(vol_path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(payload)
    else:
        vol_path.write_bytes(payload)
    base.with_name(base.name + ".json").write_text(json.dumps(header, indent=1))
    return vol_path


def load_volume(path):
    """Read a volume pair written by :func:`save_volume`.

    Returns a :class:`LabelMap` when the sidecar modality is ``LABEL``.
    """
    base = _base_path(path)
    header_path = base.with_name(base.name + ".json")
    try:
        header = json.loads(header_path.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{header_path}: malformed sidecar ({exc})") from None
    if header.get("version") != FORMAT_VERSION:
        raise VolumeVersionError(f"{header_path}: unsupported version {header.get('version')!r}")
    for key in ("shape", "spacing_mm", "modality", "dtype"):
        if key not in header:
            raise VolumeFormatError(f"{header_path}: missing header key {key!r}")
    plain = base.with_name(base.name + ".vol")
    packed = base.with_name(base.name + ".vol.gz")
    if plain.exists():
        payload = plain.read_bytes()
    elif packed.exists():
        with gzip.open(packed, "rb") as fh:
            payload = fh.read()
    else:
        raise FileNotFoundError(f"no payload next to {header_path}")

    dtype = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}.get(header["dtype"])
    if dtype is None:
        raise VolumeFormatError(f"{header_path}: unknown dtype {header['dtype']!r}")
    shape = tuple(int(s) for s in header["shape"])
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{header_path}: payload has {len(payload)} bytes, header shape {list(shape)} needs {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    if header["modality"] == "LABEL":
        return LabelMap(data, header["spacing_mm"])
    return Volume(data.astype(np.float32), header["spacing_mm"], header["modality"])


# ---------------------------------------------------------------------------
# resampling


def resample(v, target_shape):
    """Resample onto ``target_shape`` keeping the physical field of view.

    Voxel centres are mapped corner-aligned, so the extent ``shape * spacing``
    is preserved exactly. Intensities are interpolated trilinearly, label maps
    by nearest neighbour.
    """
    target_shape = tuple(int(s) for s in target_shape)
    if len(target_shape) != 3 or min(target_shape) < MIN_AXIS:
        raise ArgumentError(f"target_shape must be 3 ints >= {MIN_AXIS}, got {target_shape}")
    src_shape = np.array(v.shape, dtype=np.float64)
    ratio = src_shape / np.array(target_shape, dtype=np.float64)
    matrix = np.diag(ratio)
    offset = 0.5 * ratio - 0.5
    spacing = tuple(float(s) * r for s, r in zip(v.spacing_mm, ratio))
    if isinstance(v, LabelMap):
        data = _kernels.warp_nearest(v.data, matrix, offset, target_shape, clamp=True)
        return LabelMap(data, spacing)
    if tuple(v.shape) == target_shape:
        return Volume(v.data.copy(), v.spacing_mm, v.modality)
    data = _kernels.warp_linear(v.data, matrix, offset, target_shape, clamp=True)
    return Volume(data, spacing, v.modality)


# ---------------------------------------------------------------------------
# subject directories


def save_subject(rec, directory, compress=False):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_volume(rec.mri, directory / "mri", compress)
    save_volume(rec.ct, directory / "ct", compress)
    save_volume(rec.labels, directory / "labels", compress)
    meta = {"id": rec.subject_id, "age_days": int(rec.age_days), "sex": rec.sex}
    meta.update(rec.meta)
    (directory / "subject.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_subject(directory):
    directory = Path(directory)
    meta = json.loads((directory / "subject.json").read_text())
    extra = {k: v for k, v in meta.items() if k not in ("id", "age_days", "sex")}
    return SubjectRecord(
        subject_id=meta["id"],
        age_days=int(meta["age_days"]),
        sex=meta["sex"],
        mri=load_volume(directory / "mri"),
        ct=load_volume(directory / "ct"),
        labels=load_volume(directory / "labels"),
        meta=extra,
    )


def load_cohort(directory):
    """Load every subject directory under ``directory`` sorted by subject id."""
    directory = Path(directory)
    subs = sorted(p for p in directory.iterdir() if (p / "subject.json").exists())
    return [load_subject(p) for p in subs]
