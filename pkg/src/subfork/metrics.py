"""Segmentation overlap/distance metrics and electric-field error measures.

All percentages are on a 0-100 scale. Distances are in mm, using the
volumes' voxel spacing.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ShapeError, UndefinedMetricError, ValidationError
from .volume import LabelVolume, ScalarVolume


def _arr(v):
    return v.data if isinstance(v, (ScalarVolume, LabelVolume)) else np.asarray(v)


def _check_dims(a, b):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"dims mismatch: {np.shape(a)} vs {np.shape(b)}")


def _region(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = np.asarray(_arr(mask)).astype(bool)
    _check_dims(m, np.empty(shape))
    return m


def dice(R, R0, label: int) -> float:
    """Dice overlap of ``label`` in percent; 100 when both masks are empty."""
    a, b = _arr(R), _arr(R0)
    _check_dims(a, b)
    A, B = a == label, b == label
    size = int(A.sum()) + int(B.sum())
    if size == 0:
        return 100.0
    return 200.0 * int(np.logical_and(A, B).sum()) / size


def _spacing(*vols):
    for v in vols:
        if isinstance(v, (ScalarVolume, LabelVolume)):
            return tuple(float(s) for s in v.spacing)
    return (1.0, 1.0, 1.0)


def _directed(A: np.ndarray, B: np.ndarray, spacing) -> float:
    # exact Euclidean distance transform of B's complement, read off at A
    dist = ndimage.distance_transform_edt(~B, sampling=spacing[:B.ndim])
    return float(dist[A].max())


def hausdorff(R, R0, label: int, mode: str = "symmetric", spacing=None) -> float:
    """Hausdorff distance (mm) between the ``label`` voxel sets of ``R`` and ``R0``.

    ``mode="directed"`` is max over R of the distance to the nearest R0 voxel.
    """
    a, b = _arr(R), _arr(R0)
    _check_dims(a, b)
    if mode not in ("directed", "symmetric"):
        raise ValidationError(f"unknown Hausdorff mode {mode!r}")
    A, B = a == label, b == label
    if not A.any() or not B.any():
        raise UndefinedMetricError(f"label {label} is absent from one of the volumes")
    sp = spacing if spacing is not None else _spacing(R, R0)
    d = _directed(A, B, sp)
    if mode == "symmetric":
        d = max(d, _directed(B, A, sp))
    return d


def percentile_cap(E, region_mask=None, q: float = 99.9):
    """q-th percentile of ``E`` over the region (linear interpolation) and a
    copy of ``E`` with larger values clamped to it."""
    e = np.asarray(_arr(E), dtype=np.float64)
    m = _region(region_mask, e.shape)
    if not m.any():
        raise UndefinedMetricError("percentile over an empty region")
    if not 0.0 <= q <= 100.0:
        raise ValidationError(f"percentile must lie in [0, 100], got {q}")
    p = float(np.percentile(e[m], q, method="linear"))
    capped = np.minimum(e, p)
    if isinstance(E, ScalarVolume):
        capped = E.with_data(capped)
    return p, capped


def global_error(E, E0, region_mask=None) -> float:
    """Mean absolute field difference over the region, relative to the larger
    of the two maxima, in percent."""
    e, e0 = np.asarray(_arr(E), dtype=np.float64), np.asarray(_arr(E0), dtype=np.float64)
    _check_dims(e, e0)
    m = _region(region_mask, e.shape)
    if not m.any():
        raise UndefinedMetricError("global error over an empty region")
    peak = max(e[m].max(), e0[m].max())
    if peak <= 0:
        raise UndefinedMetricError("both fields vanish on the region")
    return float(np.abs(e[m] - e0[m]).sum() / m.sum() / peak * 100.0)


def local_error(E, E0, region_mask=None) -> float:
    """Relative difference of the regional field maxima, in percent."""
    e, e0 = np.asarray(_arr(E), dtype=np.float64), np.asarray(_arr(E0), dtype=np.float64)
    _check_dims(e, e0)
    m = _region(region_mask, e.shape)
    if not m.any():
        raise UndefinedMetricError("local error over an empty region")
    ref = e0[m].max()
    if ref <= 0:
        raise UndefinedMetricError("reference field maximum is zero on the region")
    return float(abs(e[m].max() - ref) / ref * 100.0)


# -- reports ---------------------------------------------------------------


@dataclass
class MetricReport:
    """Rows keyed by structure/region name. ``None`` marks an undefined value."""

    segmentation: dict[str, dict] = field(default_factory=dict)
    fields: dict[str, dict] = field(default_factory=dict)

    def to_dict(self):
        return {"segmentation": self.segmentation, "fields": self.fields}

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True, allow_nan=False)

    def write_csv(self, path):
        cols = ["section", "structure", "dice_pct", "hausdorff_mm", "global_err_pct", "local_err_pct", "status"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for name, row in self.segmentation.items():
                w.writerow(["segmentation", name, _fmt(row.get("dice_pct")), _fmt(row.get("hausdorff_mm")),
                            "", "", row.get("status", "ok")])
            for name, row in self.fields.items():
                w.writerow(["field", name, "", "", _fmt(row.get("global_err_pct")),
                            _fmt(row.get("local_err_pct")), row.get("status", "ok")])


def _fmt(x):
    if x is None:
        return "undefined"
    return repr(float(x))


def segmentation_report(R: LabelVolume, R0: LabelVolume, labels, names=None, hd_mode="symmetric") -> dict:
    """Per-label Dice and Hausdorff rows plus a ``mean``/``sd`` summary row."""
    _check_dims(R.data, R0.data)
    rows = {}
    for lab in labels:
        key = names.get(lab, str(lab)) if names else str(lab)
        row = {"label": int(lab), "dice_pct": dice(R, R0, lab)}
        try:
            row["hausdorff_mm"] = hausdorff(R, R0, lab, hd_mode)
            row["status"] = "ok"
        except UndefinedMetricError:
            row["hausdorff_mm"] = None
            row["status"] = "undefined"
        rows[key] = row
    dv = [r["dice_pct"] for r in rows.values()]
    hv = [r["hausdorff_mm"] for r in rows.values() if r["hausdorff_mm"] is not None]
    if dv:
        rows["mean"] = {"dice_pct": float(np.mean(dv)),
                        "hausdorff_mm": float(np.mean(hv)) if hv else None, "status": "summary"}
        rows["sd"] = {"dice_pct": float(np.std(dv)),
                      "hausdorff_mm": float(np.std(hv)) if hv else None, "status": "summary"}
    return rows


def field_report(E, E0, regions: dict, q: float = 99.9) -> dict:
    """Global/local error per named region after percentile capping each field
    within the region."""
    rows = {}
    for name, mask in regions.items():
        try:
            _, ec = percentile_cap(E, mask, q)
            _, e0c = percentile_cap(E0, mask, q)
            rows[name] = {"global_err_pct": global_error(ec, e0c, mask),
                          "local_err_pct": local_error(ec, e0c, mask), "status": "ok"}
        except UndefinedMetricError as exc:
            rows[name] = {"global_err_pct": None, "local_err_pct": None, "status": "undefined", "reason": str(exc)}
    return rows
