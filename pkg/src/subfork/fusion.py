"""Per-slice labeling of probability maps and three-direction label fusion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy import ndimage

from .errors import ShapeError, ValidationError
from .volume import AXES, LabelVolume

AXIS_ORDER = ("axial", "sagittal", "coronal")


@dataclass(frozen=True)
class FusionConfig:
    """``gm_mask``/``allowed_labels``: optional restriction of nonzero output."""

    epsilon: float = 0.3
    neighborhood: int = 3
    gm_mask: LabelVolume | None = None
    allowed_labels: tuple[int, ...] | None = None

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValidationError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if self.neighborhood < 1 or self.neighborhood % 2 == 0:
            raise ValidationError(f"neighborhood must be odd and >= 1, got {self.neighborhood}")
        if self.gm_mask is not None and not self.allowed_labels:
            raise ValidationError("gm_mask given without allowed_labels")


def label_slice(maps, epsilon: float = 0.3) -> np.ndarray:
    """Argmax track (1-based) where the winning probability reaches ``epsilon``, else 0.

    ``maps`` has the track index first; any trailing shape is allowed, so a
    whole per-axis stack ``(N, X, Y, Z)`` can be labeled at once. Ties go to
    the smallest track index.
    """
    maps = np.asarray(maps)
    if maps.ndim < 1 or maps.shape[0] == 0:
        raise ValidationError("label_slice needs at least one probability map")
    best = maps.argmax(axis=0)  # first occurrence on ties
    peak = np.take_along_axis(maps, best[None], axis=0)[0]
    out = np.where(peak >= epsilon, best + 1, 0)
    return out.astype(np.uint8)


def _window(axis_name: str, size: int):
    shape = [size, size, size]
    shape[AXES[axis_name]] = 1
    return np.ones(shape, dtype=np.int32)


def neighborhood_counts(volumes: Mapping[str, np.ndarray], n_labels: int, size: int = 3) -> np.ndarray:
    """Counts ``(n_labels+1, X, Y, Z)`` of each label over the in-plane window
    of every directional volume (window lies in that volume's slice plane),
    pooled across the volumes. Out-of-grid positions are not counted."""
    shape = next(iter(volumes.values())).shape
    counts = np.zeros((n_labels + 1,) + shape, dtype=np.int32)
    for name, vol in volumes.items():
        win = _window(name, size)
        for lab in range(n_labels + 1):
            ind = (vol == lab).astype(np.int32)
            counts[lab] += ndimage.correlate(ind, win, mode="constant", cval=0)
    return counts


def fuse_directions(r_axial: LabelVolume, r_sagittal: LabelVolume, r_coronal: LabelVolume,
                    cfg: FusionConfig = FusionConfig()) -> LabelVolume:
    """Majority vote of the three directional labelings; voxels with three
    different labels take the most frequent label in the pooled neighborhood
    (smallest label on ties)."""
    vols = (r_axial, r_sagittal, r_coronal)
    for v in vols[1:]:
        if v.dims != r_axial.dims:
            raise ShapeError(f"dims mismatch: {r_axial.dims} vs {v.dims}")
        if v.n_labels != r_axial.n_labels:
            raise ValidationError("directional volumes disagree on n_labels")
    a, s, c = (v.data for v in vols)
    out = np.where((a == s) | (a == c), a, np.where(s == c, s, 0)).astype(np.uint8)
    none = (a != s) & (a != c) & (s != c)
    if none.any():
        counts = neighborhood_counts(dict(zip(AXIS_ORDER, (a, s, c))), r_axial.n_labels, cfg.neighborhood)
        out[none] = counts[:, none].argmax(axis=0).astype(np.uint8)
    if cfg.gm_mask is not None:
        if cfg.gm_mask.dims != r_axial.dims:
            raise ShapeError(f"gm_mask dims {cfg.gm_mask.dims} do not match {r_axial.dims}")
        out[~cfg.gm_mask.mask(cfg.allowed_labels)] = 0
    return LabelVolume(out, r_axial.n_labels, r_axial.spacing)


def label_stacks(stacks: Mapping[str, np.ndarray], epsilon: float, spacing=(1.0, 1.0, 1.0)) -> dict[str, LabelVolume]:
    """Apply :func:`label_slice` to each per-axis ``(N, X, Y, Z)`` stack."""
    out = {}
    for name in AXIS_ORDER:
        st = np.asarray(stacks[name])
        out[name] = LabelVolume(label_slice(st, epsilon), st.shape[0], spacing)
    return out


def probability_fuse_infer(stacks: Mapping[str, np.ndarray], cfg: FusionConfig = FusionConfig(),
                           spacing=(1.0, 1.0, 1.0)) -> LabelVolume:
    missing = [a for a in AXIS_ORDER if a not in stacks]
    if missing:
        raise ValidationError(f"missing per-axis stacks: {missing}")
    shapes = {np.shape(stacks[a]) for a in AXIS_ORDER}
    if len(shapes) != 1:
        raise ShapeError(f"per-axis stacks disagree in shape: {sorted(shapes)}")
    labeled = label_stacks(stacks, cfg.epsilon, spacing)
    return fuse_directions(labeled["axial"], labeled["sagittal"], labeled["coronal"], cfg)
