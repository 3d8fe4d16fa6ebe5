"""ADAM, the training loop, slice preparation and per-axis volume inference."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ShapeError, ValidationError
from ..volume import AXES, LabelVolume, ScalarVolume, axis_index
from .model import NetworkParams, NetworkSpec, _Pass, build_network, forward, is_trainable
from . import layers as L

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.lr > 0:
            raise ValidationError(f"learning rate must be positive, got {self.lr}")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: NetworkParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like())


def adam_step(params: NetworkParams, grads, state: AdamState, t: int, cfg: TrainConfig,
              inplace: bool = False):
    """One bias-corrected ADAM update at step ``t`` (1-based).

    Returns ``(params, state)``; copies unless ``inplace``.
    """
    if t < 1:
        raise ValidationError(f"ADAM step index must be >= 1, got {t}")
    if not inplace:
        params = params.copy()
        state = AdamState({k: v.copy() for k, v in state.m.items()}, {k: v.copy() for k, v in state.v.items()})
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, g in grads.items():
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params.arrays[name] -= cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)
    return params, state


def update_running_stats(params: NetworkParams, stats, momentum: float) -> None:
    """Exponential moving average of batch statistics (unbiased variance)."""
    for prefix, (mean, var, count) in stats.items():
        unbias = count / (count - 1) if count > 1 else 1.0
        rm = params.arrays[f"{prefix}.running_mean"]
        rv = params.arrays[f"{prefix}.running_var"]
        rm *= 1.0 - momentum
        rm += momentum * mean
        rv *= 1.0 - momentum
        rv += momentum * var * unbias


@dataclass
class TrainResult:
    params: NetworkParams
    epoch_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)

    @property
    def epochs(self) -> list[int]:
        return list(range(1, len(self.epoch_loss) + 1))


def _stack_dataset(spec: NetworkSpec, dataset):
    xs, ts = [], []
    S, N = spec.input_size, spec.degree
    for x, t in dataset:
        x = np.asarray(getattr(x, "values", x), dtype=np.float64)
        t = np.asarray(t)
        if x.shape != (S, S) or t.shape != (N, S, S):
            raise ShapeError(f"sample shapes {x.shape}/{t.shape} do not match spec (S={S}, N={N})")
        xs.append(x)
        ts.append(t)
    X, T = np.stack(xs), np.stack(ts).astype(np.float64)
    if np.any((T != 0) & (T != 1)):
        raise ValidationError("target masks must contain only 0 and 1")
    return X, T


def evaluate_loss(params: NetworkParams, X, T, batch_size=16) -> float:
    total = 0.0
    for s in range(0, len(X), batch_size):
        z = _Pass(params, False).forward(X[s:s + batch_size])
        loss, _ = L.bce_with_logits(z, T[s:s + batch_size])
        total += loss * z.size
    return total / T.size


def train(spec: NetworkSpec, dataset: Sequence, cfg: TrainConfig = TrainConfig(),
          validation: Sequence | None = None, init: NetworkParams | None = None,
          callback=None) -> TrainResult:
    """Minimize mean BCE with ADAM; fully deterministic for a fixed ``cfg.seed``.

    Shuffle order for epoch ``e`` comes from one generator seeded with
    ``cfg.seed``; initial weights come from ``build_network(spec, cfg.seed)``.
    """
    if len(dataset) == 0:
        raise ValidationError("training dataset is empty")
    X, T = _stack_dataset(spec, dataset)
    Xv = Tv = None
    if validation:
        Xv, Tv = _stack_dataset(spec, validation)
    params = init.copy() if init is not None else build_network(spec, cfg.seed)
    state = AdamState.zeros(params)
    rng = np.random.default_rng([cfg.seed, 1])
    result = TrainResult(params)
    t = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(X))
        running = 0.0
        for s in range(0, len(X), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            ps = _Pass(params, True)
            logits = ps.forward(X[idx])
            loss, dz = L.bce_with_logits(logits, T[idx])
            grads = ps.backward(dz)
            t += 1
            adam_step(params, grads, state, t, cfg, inplace=True)
            update_running_stats(params, ps.batch_stats(), cfg.bn_momentum)
            running += loss * len(idx)
        result.epoch_loss.append(running / len(X))
        if Xv is not None:
            result.val_loss.append(evaluate_loss(params, Xv, Tv))
        log.info("epoch %d loss %.6f", epoch, result.epoch_loss[-1])
        if callback is not None:
            callback(epoch, result)
    return result


# -- data preparation -------------------------------------------------------


def normalize_slice(values: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; constant slices map to zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def _pad_crop_offsets(n: int, S: int):
    # (source start, target start, length) for centering n inside S
    if n <= S:
        return 0, (S - n) // 2, n
    return (n - S) // 2, 0, S


def fit_to_size(a: np.ndarray, S: int) -> np.ndarray:
    """Center zero-pad or crop the last two axes to ``S x S``."""
    a = np.asarray(a)
    out = np.zeros(a.shape[:-2] + (S, S), dtype=a.dtype)
    s0, t0, n0 = _pad_crop_offsets(a.shape[-2], S)
    s1, t1, n1 = _pad_crop_offsets(a.shape[-1], S)
    out[..., t0:t0 + n0, t1:t1 + n1] = a[..., s0:s0 + n0, s1:s1 + n1]
    return out


def restore_size(a: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`fit_to_size`; cropped-away regions come back as 0."""
    S = a.shape[-1]
    out = np.zeros(a.shape[:-2] + tuple(shape), dtype=a.dtype)
    s0, t0, n0 = _pad_crop_offsets(shape[0], S)
    s1, t1, n1 = _pad_crop_offsets(shape[1], S)
    out[..., s0:s0 + n0, s1:s1 + n1] = a[..., t0:t0 + n0, t1:t1 + n1]
    return out


def prepare_input(values: np.ndarray, S: int) -> np.ndarray:
    return fit_to_size(normalize_slice(values), S)


def binarize(labels: np.ndarray, n_tracks: int) -> np.ndarray:
    """One binary mask per structure label 1..N, stacked on a new leading axis."""
    labels = np.asarray(labels)
    return np.stack([(labels == n).astype(np.uint8) for n in range(1, n_tracks + 1)])


def slice_dataset(mri: ScalarVolume, labels: LabelVolume, axis, spec: NetworkSpec,
                  keep_empty: float = 1.0, rng=None):
    """(input, masks) pairs for every slice along ``axis``.

    ``keep_empty`` is the fraction of slices without any foreground that are kept.
    """
    if mri.dims != labels.dims:
        raise ShapeError(f"dims mismatch: {mri.dims} vs {labels.dims}")
    ax = axis_index(axis)
    S, N = spec.input_size, spec.degree
    out = []
    for k in range(mri.dims[ax]):
        lab = np.take(labels.data, k, axis=ax)
        masks = binarize(lab, N)
        if not masks.any() and keep_empty < 1.0:
            if rng is None or rng.random() >= keep_empty:
                continue
        out.append((prepare_input(np.take(mri.data, k, axis=ax), S), fit_to_size(masks, S)))
    return out


def infer_volume(params_by_axis, mri: ScalarVolume, batch_size: int = 16,
                 dtype=np.float64) -> dict[str, np.ndarray]:
    """Per-axis probability stacks, each ``(N, X, Y, Z)`` in the volume's geometry.

    ``params_by_axis`` maps axis name to parameters, or is a sequence ordered
    (axial, sagittal, coronal).
    """
    if not isinstance(params_by_axis, dict):
        params_by_axis = dict(zip(("axial", "sagittal", "coronal"), params_by_axis))
    if min(mri.dims) < 1:
        raise ShapeError(f"volume dims {mri.dims} too thin")
    out = {}
    for name, params in params_by_axis.items():
        ax = axis_index(name)
        spec = params.spec
        planes = np.moveaxis(np.asarray(mri.data, dtype=np.float64), ax, 0)
        inp = np.stack([prepare_input(p, spec.input_size) for p in planes])
        maps = np.empty((len(inp), spec.degree, spec.input_size, spec.input_size), dtype=dtype)
        for s in range(0, len(inp), batch_size):
            maps[s:s + batch_size] = forward(params, inp[s:s + batch_size], "eval", dtype=dtype)
        maps = restore_size(maps, planes.shape[1:])  # (K, N, w, h)
        stack = np.moveaxis(maps, 0, 1)  # (N, K, w, h)
        out[name] = np.moveaxis(stack, 1, ax + 1)
    return out
