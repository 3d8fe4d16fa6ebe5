"""SubForkNet: one encoder track feeding ``N`` independent decoder tracks.

Layer inventory for depth ``D`` and input size ``S``::

    EncMod_i   i = 1..D+1   conv(2^(i+2), r) -> BN -> ReLU -> maxpool
    DecMod_j,n j = D+1..1   deconv(2^(j+1), 2x2/2) -> BN -> ReLU -> conv(2^(j+1), r) -> BN -> ReLU
    ConvMod_j,n j = D..1    conv(2^(j+2), r) -> BN -> ReLU      (reads EncMod_j pooled output)
    Concat_j,n j = D..1     [DecMod_{j+1,n}, ConvMod_{j,n}]
    Map_n                   conv(1, r) -> sigmoid

DecMod_{D+1,n} consumes the pooled output of the last encoder module and
DecMod_{j,n} (j <= D) consumes Concat_{j,n}.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ShapeError, SpecError, ValidationError
from . import layers as L


@dataclass(frozen=True)
class NetworkSpec:
    degree: int = 7
    depth: int = 2
    input_size: int = 256
    encoder_kernel: int = 3
    decoder_kernels: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.degree < 1:
            raise SpecError(f"degree N must be >= 1, got {self.degree}")
        if self.depth < 1:
            raise SpecError(f"depth D must be >= 1, got {self.depth}")
        S = self.input_size
        if S < 1 or S & (S - 1):
            raise SpecError(f"input size must be a power of two, got {S}")
        if S % 2 ** (self.depth + 1):
            raise SpecError(f"input size {S} not divisible by 2^(D+1) = {2 ** (self.depth + 1)}")
        kernels = self.decoder_kernels
        if kernels is None:
            kernels = (self.encoder_kernel,) * self.degree
        kernels = tuple(int(k) for k in kernels)
        if len(kernels) != self.degree:
            raise SpecError(f"{len(kernels)} decoder kernels given for degree N={self.degree}")
        for k in (self.encoder_kernel,) + kernels:
            if k < 3 or k % 2 == 0:
                raise SpecError(f"kernel sizes must be odd and >= 3, got {k}")
        object.__setattr__(self, "decoder_kernels", kernels)

    def to_json(self) -> dict:
        return {
            "degree": self.degree,
            "depth": self.depth,
            "input_size": self.input_size,
            "encoder_kernel": self.encoder_kernel,
            "decoder_kernels": list(self.decoder_kernels),
        }

    @classmethod
    def from_json(cls, d) -> "NetworkSpec":
        return cls(
            degree=int(d["degree"]),
            depth=int(d["depth"]),
            input_size=int(d["input_size"]),
            encoder_kernel=int(d["encoder_kernel"]),
            decoder_kernels=tuple(int(k) for k in d["decoder_kernels"]),
        )

    def track_groups(self) -> list[tuple[int, list[int]]]:
        """Tracks (0-based) bucketed by kernel size, in first-seen order."""
        groups: dict[int, list[int]] = {}
        for n, k in enumerate(self.decoder_kernels):
            groups.setdefault(k, []).append(n)
        return list(groups.items())


def enc_channels(i: int) -> int:
    return 2 ** (i + 2)


def dec_channels(j: int) -> int:
    return 2 ** (j + 1)


def _bn_entries(prefix, c):
    return [
        (f"{prefix}.gamma", (c,)),
        (f"{prefix}.beta", (c,)),
        (f"{prefix}.running_mean", (c,)),
        (f"{prefix}.running_var", (c,)),
    ]


def layer_manifest(spec: NetworkSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) of every parameter array, a pure function of ``spec``."""
    D, r = spec.depth, spec.encoder_kernel
    out: list[tuple[str, tuple[int, ...]]] = []
    for i in range(1, D + 2):
        cin = 1 if i == 1 else enc_channels(i - 1)
        c = enc_channels(i)
        out += [(f"enc{i}.conv.w", (c, cin, r, r)), (f"enc{i}.conv.b", (c,))]
        out += _bn_entries(f"enc{i}.bn", c)
    for n in range(1, spec.degree + 1):
        k = spec.decoder_kernels[n - 1]
        for j in range(D + 1, 0, -1):
            cin = enc_channels(D + 1) if j == D + 1 else 2 ** (j + 3)
            c = dec_channels(j)
            p = f"dec{j}.t{n}"
            out += [(f"{p}.deconv.w", (c, cin, 2, 2)), (f"{p}.deconv.b", (c,))]
            out += _bn_entries(f"{p}.bn1", c)
            out += [(f"{p}.conv.w", (c, c, k, k)), (f"{p}.conv.b", (c,))]
            out += _bn_entries(f"{p}.bn2", c)
            if j <= D:
                s = f"skip{j}.t{n}"
                ce = enc_channels(j)
                out += [(f"{s}.conv.w", (ce, ce, k, k)), (f"{s}.conv.b", (ce,))]
                out += _bn_entries(f"{s}.bn", ce)
        out += [(f"map.t{n}.conv.w", (1, dec_channels(1), k, k)), (f"map.t{n}.conv.b", (1,))]
    return out


def is_trainable(name: str) -> bool:
    return not name.endswith((".running_mean", ".running_var"))


@dataclass(eq=False)
class NetworkParams:
    spec: NetworkSpec
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self, trainable_only=False):
        return [n for n in self.arrays if not trainable_only or is_trainable(n)]

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.spec, {k: v.copy() for k, v in self.arrays.items()})

    def num_parameters(self, trainable_only=True) -> int:
        return sum(v.size for k, v in self.arrays.items() if not trainable_only or is_trainable(k))

    def zeros_like(self, trainable_only=True) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items() if not trainable_only or is_trainable(k)}


def build_network(spec: NetworkSpec, seed: int = 0) -> NetworkParams:
    """He-uniform convolution weights, zero biases, unit BN scale."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in layer_manifest(spec):
        if name.endswith(".w"):
            fan_in = shape[1] if ".deconv." in name else shape[1] * shape[2] * shape[3]
            lim = math.sqrt(6.0 / fan_in)
            arrays[name] = rng.uniform(-lim, lim, shape)
        elif name.endswith((".gamma", ".running_var")):
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = np.zeros(shape)
    return NetworkParams(spec, arrays)


# -- graph ------------------------------------------------------------------


class _Block:
    """conv/deconv -> BN -> ReLU with stacked weights for one group of tracks."""

    def __init__(self, params, names, kind, bn, train, dtype, pattern=None):
        self.names, self.kind, self.bn, self.train = names, kind, bn, train
        self.pattern = pattern
        a = params.arrays
        self.w = np.stack([a[f"{n}.w"] for n in names]).astype(dtype, copy=False)
        self.b = np.stack([a[f"{n}.b"] for n in names]).astype(dtype, copy=False)
        if bn is not None:
            self.bn_vals = [
                np.stack([a[f"{b}.{f}"] for b in bn]).astype(dtype, copy=False)
                for f in ("gamma", "beta", "running_mean", "running_var")
            ]

    def forward(self, x):
        if self.kind == "deconv":
            y, self.c_conv = L.deconv_forward(x, self.w, self.b)
        else:
            y, self.c_conv = L.conv_forward(x, self.w, self.b)
        if self.bn is None:
            return y
        y, self.c_bn = L.bn_forward(y, *self.bn_vals, self.train)
        y, self.c_relu = L.relu_forward(y, self.pattern.replay())
        self.pattern.record(self.c_relu)
        return y

    def backward(self, dy, grads, need_dx=True):
        if self.bn is not None:
            dy = L.relu_backward(dy, self.c_relu)
            dy, dg, db = L.bn_backward(dy, self.c_bn)
            for g, bname in enumerate(self.bn):
                grads[f"{bname}.gamma"] = dg[g]
                grads[f"{bname}.beta"] = db[g]
        if self.kind == "deconv":
            dx, dw, dbias = L.deconv_backward(dy, self.c_conv)
        else:
            dx, dw, dbias = L.conv_backward(dy, self.c_conv, need_dx)
        for g, n in enumerate(self.names):
            grads[f"{n}.w"] = dw[g]
            grads[f"{n}.b"] = dbias[g]
        return dx

    def batch_stats(self):
        if self.bn is None:
            return {}
        xhat, _, _, mean, var, _ = self.c_bn
        m = xhat.shape[1] * xhat.shape[3] * xhat.shape[4]
        return {b: (mean[g], var[g], m) for g, b in enumerate(self.bn)}


class ActivationPattern:
    """ReLU masks and max-pool winners of one forward pass, in graph order.

    A pattern recorded at one parameter point can be replayed at nearby points,
    which evaluates the network on a single linear piece of its ReLU/max-pool
    nonlinearities (used by finite-difference gradient checks).
    """

    def __init__(self, frozen=None):
        self.items = [] if frozen is None else None
        self._frozen = None if frozen is None else iter(frozen.items)

    def replay(self):
        return None if self._frozen is None else next(self._frozen)

    def record(self, item):
        if self.items is not None:
            self.items.append(item)


class _Pass:
    """One forward evaluation that remembers what backward needs."""

    def __init__(self, params: NetworkParams, train: bool, dtype=np.float64, trace=None,
                 frozen: ActivationPattern | None = None):
        self.params, self.spec, self.train, self.dtype, self.trace = params, params.spec, train, dtype, trace
        self.pattern = ActivationPattern(frozen)

    def _record(self, name, y, tracks=None):
        if self.trace is None:
            return
        shape = (y.shape[4], y.shape[2], y.shape[3])
        if tracks is None:
            self.trace.append((name, shape))
            return
        mod, _, part = name.partition(".")
        for n in tracks:
            self.trace.append((f"{mod},{n}" + (f".{part}" if part else ""), shape))

    def forward(self, x):
        """``x`` has shape (B, S, S); returns logits (B, N, S, S)."""
        spec, D, p = self.spec, self.spec.depth, self.params
        h = x.astype(self.dtype, copy=False)[None, :, :, :, None]
        self.enc, self.pools = [], []
        pooled = []
        for i in range(1, D + 2):
            blk = _Block(p, [f"enc{i}.conv"], "conv", [f"enc{i}.bn"], self.train, self.dtype, self.pattern)
            h = blk.forward(h)
            self._record(f"EncMod_{i}.conv", h)
            h, c = L.maxpool_forward(h, self.pattern.replay())
            self.pattern.record(c[0])
            self._record(f"EncMod_{i}.pool", h)
            self.enc.append(blk)
            self.pools.append(c)
            pooled.append(h)
        self.pooled = pooled

        B, S = x.shape[0], spec.input_size
        logits = np.empty((B, spec.degree, S, S), dtype=self.dtype)
        self.groups = []
        for _, tracks in spec.track_groups():
            G = len(tracks)
            t = [n + 1 for n in tracks]
            blocks = {}
            feat = np.broadcast_to(pooled[D], (G,) + pooled[D].shape[1:])
            for j in range(D + 1, 0, -1):
                if j <= D:
                    sk = _Block(p, [f"skip{j}.t{n}.conv" for n in t], "conv",
                                [f"skip{j}.t{n}.bn" for n in t], self.train, self.dtype, self.pattern)
                    s = sk.forward(np.broadcast_to(pooled[j - 1], (G,) + pooled[j - 1].shape[1:]))
                    self._record(f"ConvMod_{j}", s, t)
                    feat, split = L.concat_forward(feat, s)
                    self._record(f"Concat_{j}", feat, t)
                    blocks[f"skip{j}"] = (sk, split)
                up = _Block(p, [f"dec{j}.t{n}.deconv" for n in t], "deconv",
                            [f"dec{j}.t{n}.bn1" for n in t], self.train, self.dtype, self.pattern)
                feat = up.forward(feat)
                self._record(f"DecMod_{j}.deconv", feat, t)
                cv = _Block(p, [f"dec{j}.t{n}.conv" for n in t], "conv",
                            [f"dec{j}.t{n}.bn2" for n in t], self.train, self.dtype, self.pattern)
                feat = cv.forward(feat)
                self._record(f"DecMod_{j}.conv", feat, t)
                blocks[f"dec{j}"] = (up, cv)
            mp = _Block(p, [f"map.t{n}.conv" for n in t], "conv", None, self.train, self.dtype, self.pattern)
            z = mp.forward(feat)
            self._record("Map.conv", z, t)
            blocks["map"] = mp
            logits[:, tracks] = z[..., 0].transpose(1, 0, 2, 3)
            self.groups.append((tracks, blocks))
        return logits

    def backward(self, dlogits):
        """Gradient of every trainable parameter given d(loss)/d(logits)."""
        D = self.spec.depth
        grads: dict[str, np.ndarray] = {}
        dpooled = [np.zeros_like(pl) for pl in self.pooled]
        for tracks, blocks in self.groups:
            dz = dlogits[:, tracks].transpose(1, 0, 2, 3)[..., None]
            dfeat = blocks["map"].backward(np.ascontiguousarray(dz), grads)
            for j in range(1, D + 2):
                up, cv = blocks[f"dec{j}"]
                dfeat = cv.backward(dfeat, grads)
                dfeat = up.backward(dfeat, grads)
                if j <= D:
                    sk, split = blocks[f"skip{j}"]
                    dprev, ds = L.concat_backward(dfeat, split)
                    dsx = sk.backward(np.ascontiguousarray(ds), grads)
                    dpooled[j - 1] += dsx.sum(axis=0, keepdims=True)
                    dfeat = np.ascontiguousarray(dprev)
            dpooled[D] += dfeat.sum(axis=0, keepdims=True)
        dh = dpooled[D]
        for i in range(D + 1, 0, -1):
            dh = L.maxpool_backward(dh, self.pools[i - 1])
            dh = self.enc[i - 1].backward(dh, grads, need_dx=i > 1)
            if i > 1:
                dh = dh + dpooled[i - 2]
        return {k: grads[k] for k in self.params.arrays if is_trainable(k)}

    def batch_stats(self):
        stats = {}
        for blk in self.enc:
            stats.update(blk.batch_stats())
        for _, blocks in self.groups:
            for v in blocks.values():
                items = v if isinstance(v, tuple) else (v,)
                for b in items:
                    if isinstance(b, _Block):
                        stats.update(b.batch_stats())
        return stats


def _as_batch(spec, x):
    if hasattr(x, "values"):
        x = x.values
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None]
    S = spec.input_size
    if x.ndim != 3 or x.shape[1:] != (S, S):
        raise ShapeError(f"expected input of shape ({S}, {S}) or (B, {S}, {S}), got {x.shape}")
    return x


def forward(params: NetworkParams, x, mode: str = "eval", dtype=np.float64, trace=None) -> np.ndarray:
    """Probability maps ``(B, N, S, S)`` (or ``(N, S, S)`` for a single slice).

    ``mode='train'`` normalizes with batch statistics, ``'eval'`` with the
    running estimates.
    """
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    single = np.ndim(getattr(x, "values", x)) == 2
    xb = _as_batch(params.spec, x)
    logits = _Pass(params, mode == "train", dtype, trace).forward(xb)
    probs = L.sigmoid(logits)
    return probs[0] if single else probs


def trace_shapes(params: NetworkParams, dtype=np.float32) -> list[tuple[str, tuple[int, int, int]]]:
    """(module, (channels, height, width)) for every module output, in graph order.

    Decoder modules carry the 1-based track index, e.g. ``"DecMod_2,5.conv"``.
    """
    trace: list = []
    S = params.spec.input_size
    _Pass(params, False, dtype, trace).forward(np.zeros((1, S, S), dtype=dtype))
    return trace


def loss_and_gradients(params: NetworkParams, batch: Sequence, return_stats=False,
                       pattern: ActivationPattern | None = None):
    """Mean BCE over batch, tracks and pixels, and its gradient.

    ``batch`` is a sequence of ``(slice, masks)`` with ``masks`` of shape
    ``(N, S, S)`` holding 0/1 values. ``pattern`` (from :func:`activation_pattern`)
    pins ReLU/max-pool switching to a reference point.
    """
    spec = params.spec
    xs, ts = [], []
    for x, t in batch:
        xs.append(_as_batch(spec, x)[0])
        t = np.asarray(t, dtype=np.float64)
        if t.shape != (spec.degree, spec.input_size, spec.input_size):
            raise ShapeError(f"target masks must have shape {(spec.degree, spec.input_size, spec.input_size)}, got {t.shape}")
        ts.append(t)
    if not xs:
        raise ValidationError("empty batch")
    targets = np.stack(ts)
    if np.any((targets != 0) & (targets != 1)):
        raise ValidationError("target masks must contain only 0 and 1")
    ps = _Pass(params, True, frozen=pattern)
    logits = ps.forward(np.stack(xs))
    loss, dz = L.bce_with_logits(logits, targets)
    grads = ps.backward(dz)
    if return_stats:
        return loss, grads, ps.batch_stats()
    return loss, grads


def activation_pattern(params: NetworkParams, batch: Sequence) -> ActivationPattern:
    """Record the train-mode ReLU/max-pool pattern of ``params`` on ``batch``."""
    xs = np.stack([_as_batch(params.spec, x)[0] for x, _ in batch])
    ps = _Pass(params, True)
    ps.forward(xs)
    return ps.pattern


def loss_value(params: NetworkParams, batch: Sequence, pattern: ActivationPattern | None = None) -> float:
    """Train-mode loss only (no backward pass)."""
    spec = params.spec
    xs = np.stack([_as_batch(spec, x)[0] for x, _ in batch])
    targets = np.stack([np.asarray(t, dtype=np.float64) for _, t in batch])
    logits = _Pass(params, True, frozen=pattern).forward(xs)
    return L.bce_with_logits(logits, targets)[0]
