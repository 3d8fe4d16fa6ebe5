"""Voxel containers, the ``.vvol`` file format, slicing and label operations.

Arrays are indexed ``[x, y, z]``. On disk the payload is written x-fastest
(Fortran order), little-endian, after a single-line JSON header.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import BoundsError, FormatError, ShapeError, ValidationError

MAGIC = "vvol"
VERSION = 1

DTYPES = {"u8": "<u1", "i16": "<i2", "f32": "<f4", "f64": "<f8"}
_DTYPE_NAMES = {np.dtype(v): k for k, v in DTYPES.items()}

# axial = fixed z, sagittal = fixed x, coronal = fixed y
AXES = {"axial": 2, "sagittal": 0, "coronal": 1}


def axis_index(axis: str | int) -> int:
    if isinstance(axis, str):
        try:
            return AXES[axis]
        except KeyError:
            raise ValidationError(f"unknown axis {axis!r}; expected one of {sorted(AXES)}") from None
    if axis not in (0, 1, 2):
        raise ValidationError(f"axis must be 0, 1 or 2, got {axis}")
    return int(axis)


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    dtype: str
    kind: str
    n_labels: int | None = None

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) < 1 for d in self.dims):
            raise ValidationError(f"dims must be 3 positive integers, got {self.dims}")
        if len(self.spacing) != 3 or any(not float(s) > 0 for s in self.spacing):
            raise ValidationError(f"spacing must be 3 positive reals, got {self.spacing}")
        if self.dtype not in DTYPES:
            raise ValidationError(f"unknown dtype {self.dtype!r}")
        if self.kind not in ("scalar", "label"):
            raise ValidationError(f"unknown kind {self.kind!r}")
        if self.kind == "label":
            if self.dtype != "u8":
                raise ValidationError("label volumes must be stored as u8")
            if self.n_labels is None or not 1 <= self.n_labels <= 255:
                raise ValidationError(f"label volumes need 1 <= n_labels <= 255, got {self.n_labels}")

    def to_json(self) -> dict:
        out = {
            "format": MAGIC,
            "version": VERSION,
            "dims": [int(d) for d in self.dims],
            "spacing": [float(s) for s in self.spacing],
            "dtype": self.dtype,
            "kind": self.kind,
        }
        if self.kind == "label":
            out["n_labels"] = int(self.n_labels)
        return out


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _as_spacing(spacing) -> tuple[float, float, float]:
    s = tuple(float(v) for v in spacing)
    if len(s) != 3 or any(not v > 0 for v in s):
        raise ValidationError(f"spacing must be 3 positive reals, got {spacing}")
    return s


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """Real-valued voxel grid (MRI intensities, conductivities, fields)."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeError(f"volume data must be 3D, got shape {data.shape}")
        if data.dtype == np.bool_:
            data = data.astype(np.uint8)
        if data.dtype not in _DTYPE_NAMES:
            data = data.astype(np.float64)
        if data.dtype.kind == "f" and not np.all(np.isfinite(data)):
            raise ValidationError("scalar volume contains NaN or Inf")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def header(self) -> VolumeHeader:
        return VolumeHeader(self.dims, self.spacing, _DTYPE_NAMES[self.data.dtype], "scalar")

    def with_data(self, data) -> "ScalarVolume":
        return ScalarVolume(data, self.spacing)


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Small-integer label grid; 0 is background."""

    data: np.ndarray
    n_labels: int
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ShapeError(f"volume data must be 3D, got shape {data.shape}")
        n = int(self.n_labels)
        if not 1 <= n <= 255:
            raise ValidationError(f"n_labels must be in 1..255, got {n}")
        if data.size and (data.min() < 0 or data.max() > n):
            raise ValidationError(f"label values must lie in 0..{n}, found {data.min()}..{data.max()}")
        object.__setattr__(self, "data", _readonly(data.astype(np.uint8)))
        object.__setattr__(self, "n_labels", n)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.data.shape)

    @property
    def header(self) -> VolumeHeader:
        return VolumeHeader(self.dims, self.spacing, "u8", "label", self.n_labels)

    def mask(self, labels: int | Iterable[int]) -> np.ndarray:
        if isinstance(labels, (int, np.integer)):
            return self.data == labels
        return np.isin(self.data, list(labels))


@dataclass(frozen=True, eq=False)
class Slice2D:
    values: np.ndarray
    axis: str
    index: int

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ShapeError(f"slice values must be 2D, got shape {v.shape}")
        axis_index(self.axis)
        object.__setattr__(self, "values", _readonly(v))

    @property
    def width(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]


# -- container I/O ----------------------------------------------------------


def write_container(path, header: Mapping, payload: bytes) -> None:
    text = json.dumps(header, sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(text.encode("utf-8"))
        fh.write(b"\n")
        fh.write(payload)


def read_container(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing header record")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict) or header.get("format") != MAGIC:
        raise FormatError(f"{path}: not a {MAGIC} container")
    return header, raw[nl + 1:]


def save_volume(volume: ScalarVolume | LabelVolume, path) -> None:
    header = volume.header
    dt = np.dtype(DTYPES[header.dtype])
    payload = np.asarray(volume.data, dtype=dt).tobytes(order="F")
    write_container(path, header.to_json(), payload)


def load_volume(path) -> ScalarVolume | LabelVolume:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    raw_header, payload = read_container(path)
    try:
        header = VolumeHeader(
            dims=tuple(int(d) for d in raw_header["dims"]),
            spacing=tuple(float(s) for s in raw_header["spacing"]),
            dtype=raw_header["dtype"],
            kind=raw_header["kind"],
            n_labels=raw_header.get("n_labels"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed header ({exc})") from None
    dt = np.dtype(DTYPES[header.dtype])
    count = int(np.prod(header.dims))
    if len(payload) != count * dt.itemsize:
        raise FormatError(
            f"{path}: payload has {len(payload)} bytes, expected {count * dt.itemsize}"
        )
    data = np.frombuffer(payload, dtype=dt).reshape(header.dims, order="F")
    if header.kind == "label":
        if data.size and data.max() > header.n_labels:
            raise ValidationError(
                f"{path}: label value {int(data.max())} exceeds n_labels={header.n_labels}"
            )
        return LabelVolume(data, header.n_labels, header.spacing)
    if dt.kind == "f" and not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: payload contains NaN or Inf")
    return ScalarVolume(data.astype(dt.newbyteorder("=")), header.spacing)


# -- slicing ----------------------------------------------------------------


def extract_slice(volume: ScalarVolume | LabelVolume, axis: str | int, index: int) -> Slice2D:
    ax = axis_index(axis)
    n = volume.dims[ax]
    if not 0 <= index < n:
        raise BoundsError(f"slice index {index} out of range 0..{n - 1} on axis {axis}")
    name = axis if isinstance(axis, str) else _axis_name(ax)
    return Slice2D(np.take(volume.data, index, axis=ax), name, int(index))


def insert_slice(volume: ScalarVolume, s: Slice2D) -> ScalarVolume:
    """Return a copy of ``volume`` with the plane of ``s`` overwritten."""
    ax = axis_index(s.axis)
    if not 0 <= s.index < volume.dims[ax]:
        raise BoundsError(f"slice index {s.index} out of range on axis {s.axis}")
    plane_shape = tuple(d for i, d in enumerate(volume.dims) if i != ax)
    if s.values.shape != plane_shape:
        raise ShapeError(f"slice shape {s.values.shape} does not match plane {plane_shape}")
    data = np.array(volume.data, copy=True)
    idx = [slice(None)] * 3
    idx[ax] = s.index
    data[tuple(idx)] = s.values
    return volume.with_data(data)


def _axis_name(ax: int) -> str:
    return {v: k for k, v in AXES.items()}[ax]


def stack_slices(volume, axis: str | int) -> np.ndarray:
    """All slices along ``axis`` as an array ``(n_slices, width, height)``."""
    return np.moveaxis(np.asarray(volume.data), axis_index(axis), 0)


def unstack_slices(stack: np.ndarray, axis: str | int) -> np.ndarray:
    """Inverse of :func:`stack_slices` for the last three axes of ``stack``."""
    return np.moveaxis(stack, -3, axis_index(axis) - 3)


# -- masking / embedding ----------------------------------------------------


def _check_dims(a, b):
    if a.dims != b.dims:
        raise ShapeError(f"dims mismatch: {a.dims} vs {b.dims}")


def apply_mask(volume: ScalarVolume, mask: LabelVolume, keep: Iterable[int]) -> ScalarVolume:
    _check_dims(volume, mask)
    sel = mask.mask(set(int(k) for k in keep))
    return volume.with_data(np.where(sel, volume.data, np.zeros((), volume.data.dtype)))


def embed_labels(base: LabelVolume, deep: LabelVolume, label_offset: int) -> LabelVolume:
    _check_dims(base, deep)
    n_total = base.n_labels + deep.n_labels
    if label_offset < 0 or deep.n_labels + label_offset > 255 or n_total > 255:
        raise ValidationError(
            f"embedding {deep.n_labels} labels at offset {label_offset} overflows u8"
        )
    n_out = max(n_total, deep.n_labels + label_offset)
    d = deep.data.astype(np.int32)
    out = np.where(d > 0, d + label_offset, base.data)
    return LabelVolume(out, n_out, base.spacing)


# -- phantoms ---------------------------------------------------------------


@dataclass(frozen=True)
class Ellipsoid:
    label: int
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    mean_intensity: float


@dataclass(frozen=True)
class PhantomSpec:
    """Ellipsoid phantom description.

    Coordinates and radii are in voxel units. Entries with ``label == 0`` only
    paint intensity (head shells). ``center_jitter`` (voxels) and
    ``radius_jitter`` (fraction) perturb each ellipsoid per seed.
    """

    dims: tuple[int, int, int]
    structures: tuple[Ellipsoid, ...]
    background_mean: float = 0.0
    noise_sigma: float = 0.0
    max_intensity: float = 1.0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_labels: int | None = None
    center_jitter: float = 0.0
    radius_jitter: float = 0.0
    names: dict = field(default_factory=dict)

    @property
    def label_count(self) -> int:
        if self.n_labels is not None:
            return int(self.n_labels)
        return max([e.label for e in self.structures] + [1])

    @classmethod
    def from_dict(cls, d: Mapping) -> "PhantomSpec":
        try:
            structures = tuple(
                Ellipsoid(
                    int(s["label"]),
                    tuple(float(c) for c in s["center"]),
                    tuple(float(r) for r in s["radii"]),
                    float(s["mean_intensity"]),
                )
                for s in d["structures"]
            )
            return cls(
                dims=tuple(int(v) for v in d["dims"]),
                structures=structures,
                background_mean=float(d.get("background_mean", 0.0)),
                noise_sigma=float(d.get("noise_sigma", 0.0)),
                max_intensity=float(d.get("max_intensity", 1.0)),
                spacing=tuple(float(v) for v in d.get("spacing", (1.0, 1.0, 1.0))),
                n_labels=d.get("n_labels"),
                center_jitter=float(d.get("center_jitter", 0.0)),
                radius_jitter=float(d.get("radius_jitter", 0.0)),
                names={int(k): v for k, v in d.get("names", {}).items()},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"bad phantom descriptor: {exc}") from None

    @classmethod
    def load(cls, path) -> "PhantomSpec":
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: {exc}") from None
        return cls.from_dict(d)


def make_phantom(spec: PhantomSpec | Mapping, seed: int = 0) -> tuple[ScalarVolume, LabelVolume]:
    if not isinstance(spec, PhantomSpec):
        spec = PhantomSpec.from_dict(spec)
    dims = spec.dims
    if len(dims) != 3 or min(dims) < 1:
        raise ValidationError(f"bad phantom dims {dims}")
    if not spec.structures:
        raise ValidationError("phantom needs at least one ellipsoid")
    n_labels = spec.label_count
    rng = np.random.default_rng(seed)
    shapes = []
    for e in spec.structures:
        if not 0 <= e.label <= n_labels:
            raise ValidationError(f"structure label {e.label} outside 0..{n_labels}")
        if any(r <= 0 for r in e.radii) or len(e.radii) != 3 or len(e.center) != 3:
            raise ValidationError(f"bad ellipsoid geometry for label {e.label}")
        c = np.asarray(e.center) + spec.center_jitter * rng.uniform(-1, 1, 3)
        r = np.asarray(e.radii) * (1 + spec.radius_jitter * rng.uniform(-1, 1, 3))
        lo, hi = c - r, c + r
        if np.any(lo < -0.5) or np.any(hi > np.asarray(dims) - 0.5):
            raise ValidationError(
                f"ellipsoid for label {e.label} (center {c.round(2).tolist()}, radii "
                f"{r.round(2).tolist()}) extends outside the {dims} grid"
            )
        shapes.append((e, c, r))

    intensity = np.full(dims, spec.background_mean, dtype=np.float64)
    labels = np.zeros(dims, dtype=np.uint8)
    grid = np.ogrid[: dims[0], : dims[1], : dims[2]]
    for e, c, r in shapes:
        inside = sum(((g - ci) / ri) ** 2 for g, ci, ri in zip(grid, c, r)) <= 1.0
        intensity[inside] = e.mean_intensity
        labels[inside] = e.label
    if spec.noise_sigma > 0:
        intensity = intensity + rng.normal(0.0, spec.noise_sigma, dims)
        intensity = np.clip(intensity, 0.0, spec.max_intensity)
    return ScalarVolume(intensity, spec.spacing), LabelVolume(labels, n_labels, spec.spacing)
