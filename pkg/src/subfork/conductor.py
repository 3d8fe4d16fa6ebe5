"""Conductivity assignment, electrode rasterization and current-injection montages.

Geometry convention: voxel ``i`` along an axis has its center at ``i * spacing``
mm and spans nodes ``i`` and ``i + 1``; node ``i`` sits at ``(i - 0.5) * spacing``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping

import numpy as np

from .errors import PlacementError, ShapeError, ValidationError
from .volume import LabelVolume, ScalarVolume

NORMALS = {"+x": (0, 1), "-x": (0, -1), "+y": (1, 1), "-y": (1, -1), "+z": (2, 1), "-z": (2, -1)}


@dataclass(frozen=True)
class ConductivityTable:
    """Label -> conductivity (S/m). ``materials`` holds non-tissue entries
    such as the electrode sponge and rubber."""

    sigma: Mapping[int, float]
    names: Mapping[int, str] = field(default_factory=dict)
    materials: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for lab, s in list(self.sigma.items()) + list(self.materials.items()):
            if not (s >= 0 and np.isfinite(s)):
                raise ValidationError(f"conductivity for {lab!r} must be finite and >= 0, got {s}")
        if 0 in self.sigma and self.sigma[0] != 0:
            raise ValidationError("background (label 0) must map to 0 S/m")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConductivityTable":
        sigma, names, materials = {}, {}, {}
        try:
            for key, entry in d.items():
                s = float(entry["sigma"])
                if str(key).isdigit():
                    sigma[int(key)] = s
                    names[int(key)] = str(entry.get("name", key))
                else:
                    materials[str(key)] = s
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ValidationError(f"bad conductivity table entry: {exc}") from None
        return cls(sigma, names, materials)

    @classmethod
    def load(cls, path) -> "ConductivityTable":
        with open(path) as fh:
            try:
                return cls.from_dict(json.load(fh))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}: {exc}") from None

    @classmethod
    def default(cls) -> "ConductivityTable":
        text = resources.files("subfork.data").joinpath("conductivity.json").read_text()
        return cls.from_dict(json.loads(text))

    def label_of(self, name: str) -> int:
        for lab, n in self.names.items():
            if n.lower() == name.lower():
                return lab
        raise KeyError(name)

    def by_name(self, name: str) -> float:
        if name in self.materials:
            return self.materials[name]
        return self.sigma[self.label_of(name)]


def assign_conductivity(model: LabelVolume, table: ConductivityTable) -> ScalarVolume:
    present = np.unique(model.data)
    missing = [int(v) for v in present if v != 0 and int(v) not in table.sigma]
    if missing:
        raise ValidationError(f"labels without a conductivity: {missing}")
    lut = np.zeros(256, dtype=np.float64)
    for lab, s in table.sigma.items():
        if 0 < lab < 256:
            lut[lab] = s
    return ScalarVolume(lut[model.data], model.spacing)


@dataclass(frozen=True)
class ElectrodeSpec:
    """Axis-aligned sponge electrode with an embedded rubber sheet.

    ``center`` is in mm. ``rubber_depth`` is the rubber's distance (mm) from
    the sponge's outer face; 0 puts the rubber in the outermost layer.
    """

    center: tuple[float, float, float]
    normal_axis: str = "+z"
    size: tuple[float, float] = (50.0, 50.0)
    sponge_thickness: float = 5.0
    rubber_thickness: float = 1.0
    sponge_sigma: float = 1.6
    rubber_sigma: float = 0.1
    polarity: str = "anode"
    rubber_depth: float = 0.0

    def __post_init__(self):
        if self.normal_axis not in NORMALS:
            raise ValidationError(f"normal_axis must be one of {sorted(NORMALS)}, got {self.normal_axis!r}")
        if len(self.center) != 3 or len(self.size) != 2:
            raise ValidationError("center needs 3 coordinates and size 2 extents")
        if min(self.size) <= 0 or self.sponge_thickness <= 0 or self.rubber_thickness <= 0:
            raise ValidationError("electrode size and thicknesses must be positive")
        if self.rubber_depth < 0 or self.rubber_depth + self.rubber_thickness > self.sponge_thickness + 1e-9:
            raise ValidationError("rubber sheet must lie inside the sponge")
        if self.polarity not in ("anode", "cathode"):
            raise ValidationError(f"polarity must be anode or cathode, got {self.polarity!r}")
        if self.sponge_sigma < 0 or self.rubber_sigma < 0:
            raise ValidationError("electrode conductivities must be >= 0")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ElectrodeSpec":
        d = dict(d)
        try:
            d["center"] = tuple(float(c) for c in d["center"])
            if "size" in d:
                d["size"] = tuple(float(s) for s in d["size"])
            return cls(**d)
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"bad electrode descriptor: {exc}") from None


def _voxels(length_mm: float, h: float) -> int:
    return max(1, int(round(length_mm / h)))


@dataclass
class PlacementReport:
    """Voxel counts per material; ``footprint`` marks every voxel written."""

    sponge_voxels: int
    saline_voxels: int
    rubber_voxels: int
    columns: int
    footprint: np.ndarray
    source_node: tuple[int, int, int]

    def counts(self) -> dict:
        return {"sponge": self.sponge_voxels, "saline": self.saline_voxels,
                "rubber": self.rubber_voxels, "columns": self.columns}


def place_electrode(sigma: ScalarVolume, model: LabelVolume, spec: ElectrodeSpec):
    """Stack a sponge outward from the scalp over the electrode footprint.

    Returns ``(updated sigma, PlacementReport)``. The report's ``source_node``
    is the grid node nearest the center of the rubber's outer face.
    """
    if sigma.dims != model.dims:
        raise ShapeError(f"dims mismatch: {sigma.dims} vs {model.dims}")
    ax, sign = NORMALS[spec.normal_axis]
    plane = [a for a in range(3) if a != ax]
    h = sigma.spacing
    L = sigma.dims[ax]
    T = _voxels(spec.sponge_thickness, h[ax])
    Tr = _voxels(spec.rubber_thickness, h[ax])
    rd = int(round(spec.rubber_depth / h[ax]))
    if rd + Tr > T:
        raise PlacementError("rubber sheet does not fit inside the sponge at this spacing")

    # work with the normal axis last, pointing outward
    head = np.moveaxis(model.data > 0, ax, -1)
    sig = np.moveaxis(np.array(sigma.data, dtype=np.float64), ax, -1)
    if sign < 0:
        head, sig = head[..., ::-1], sig[..., ::-1]
    has = head.any(-1)
    outer = L - 1 - np.argmax(head[..., ::-1], axis=-1)

    cvox = [spec.center[a] / h[a] for a in plane]
    ccol = [int(np.floor(c + 0.5)) for c in cvox]
    n_uv = [_voxels(spec.size[i], h[a]) for i, a in enumerate(plane)]
    lo = [int(np.floor(c - (n - 1) / 2 + 0.5)) for c, n in zip(cvox, n_uv)]
    dims_uv = head.shape[:2]
    if not all(0 <= ccol[i] < dims_uv[i] for i in range(2)) or not has[ccol[0], ccol[1]]:
        raise PlacementError(f"electrode center {spec.center} does not project onto the head along {spec.normal_axis}")

    u0, v0 = max(lo[0], 0), max(lo[1], 0)
    u1, v1 = min(lo[0] + n_uv[0], dims_uv[0]), min(lo[1] + n_uv[1], dims_uv[1])
    cols = np.zeros(dims_uv, dtype=bool)
    cols[u0:u1, v0:v1] = True
    cols &= has
    uu, vv = np.nonzero(cols)
    fp = np.zeros(sig.shape, dtype=bool)
    n_saline = n_rubber = 0
    rubber_layers = range(T - rd - Tr + 1, T - rd + 1)
    for k in range(1, T + 1):
        idx = outer[uu, vv] + k
        ok = idx < L
        val = spec.rubber_sigma if k in rubber_layers else spec.sponge_sigma
        sig[uu[ok], vv[ok], idx[ok]] = val
        fp[uu[ok], vv[ok], idx[ok]] = True
        if k in rubber_layers:
            n_rubber += int(ok.sum())
        else:
            n_saline += int(ok.sum())
    if n_rubber == 0 or n_saline + n_rubber == 0 or (T > Tr and n_saline == 0):
        raise PlacementError("electrode rasterized to zero voxels of sponge or rubber")

    # outermost rubber voxel of the center column, and its outer face node
    top = int(outer[ccol[0], ccol[1]]) + T - rd
    if top >= L:
        raise PlacementError("rubber at the electrode center falls outside the grid; pad the volume")
    face = top + 1 if sign > 0 else L - 1 - top
    node = [0, 0, 0]
    node[ax] = face
    for i, a in enumerate(plane):
        node[a] = ccol[i] + (1 if cvox[i] >= ccol[i] else 0)

    if sign < 0:
        sig, fp = sig[..., ::-1], fp[..., ::-1]
    out = np.moveaxis(sig, -1, ax)
    fp = np.moveaxis(fp, -1, ax)
    report = PlacementReport(n_saline + n_rubber, n_saline, n_rubber, int(cols.sum()),
                             np.ascontiguousarray(fp), tuple(node))
    return ScalarVolume(out, sigma.spacing), report


@dataclass(frozen=True)
class Montage:
    """Conductivity volume with current source/sink nodes.

    ``plates`` optionally replaces the point injections by whole node layers
    ``((axis, layer) for source, (axis, layer) for sink)``; the current is then
    spread over the layer in proportion to the conductance of each node's
    edge into the volume.
    """

    sigma: ScalarVolume
    source_node: tuple[int, int, int]
    sink_node: tuple[int, int, int]
    injected_current: float = 2e-3
    plates: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "source_node", tuple(int(i) for i in self.source_node))
        object.__setattr__(self, "sink_node", tuple(int(i) for i in self.sink_node))
        if self.source_node == self.sink_node:
            raise PlacementError(f"source and sink coincide at node {self.source_node}")
        if not self.injected_current > 0:
            raise ValidationError(f"injected current must be positive, got {self.injected_current}")
        nd = tuple(d + 1 for d in self.sigma.dims)
        for n in (self.source_node, self.sink_node):
            if len(n) != 3 or any(not 0 <= n[i] < nd[i] for i in range(3)):
                raise PlacementError(f"node {n} outside the node grid {nd}")


def node_voxels(node, dims):
    """Indices of the (up to 8) voxels that share a grid node."""
    out = []
    for d in np.ndindex(2, 2, 2):
        v = tuple(node[i] - d[i] for i in range(3))
        if all(0 <= v[i] < dims[i] for i in range(3)):
            out.append(v)
    return out


def build_montage(sigma: ScalarVolume, model: LabelVolume, anode: ElectrodeSpec,
                  cathode: ElectrodeSpec, current: float = 2e-3):
    """Place both electrodes; returns ``(Montage, {"anode": report, "cathode": report})``."""
    s1, ra = place_electrode(sigma, model, anode)
    s2, rc = place_electrode(s1, model, cathode)
    if ra.source_node == rc.source_node:
        raise PlacementError(f"anode and cathode share node {ra.source_node}")
    if np.any(ra.footprint & rc.footprint):
        raise PlacementError("anode and cathode footprints overlap")
    return Montage(s2, ra.source_node, rc.source_node, current), {"anode": ra, "cathode": rc}


def plate_montage(sigma: ScalarVolume, axis: int = 0, current: float = 2e-3) -> Montage:
    """Full-face plate electrodes on the two grid faces normal to ``axis``."""
    nd = [d + 1 for d in sigma.dims]
    mid = [n // 2 for n in nd]
    src, snk = list(mid), list(mid)
    src[axis], snk[axis] = 0, nd[axis] - 1
    return Montage(sigma, tuple(src), tuple(snk), current, plates=((axis, 0), (axis, nd[axis] - 1)))


def montage_from_descriptor(d: Mapping, sigma: ScalarVolume, model: LabelVolume):
    """Build from a JSON descriptor: either ``{"anode": {...}, "cathode": {...},
    "current": A}`` or ``{"plates": {"axis": k}, "current": A}``."""
    current = float(d.get("current", 2e-3))
    if "plates" in d:
        axis = int(d["plates"].get("axis", 0))
        if not 0 <= axis < 3:
            raise ValidationError(f"plate axis must be 0, 1 or 2, got {axis}")
        return plate_montage(sigma, axis, current), {}
    try:
        anode = ElectrodeSpec.from_dict({**d["anode"], "polarity": "anode"})
        cathode = ElectrodeSpec.from_dict({**d["cathode"], "polarity": "cathode"})
    except KeyError as exc:
        raise ValidationError(f"montage descriptor lacks {exc}") from None
    return build_montage(sigma, model, anode, cathode, current)
