"""Scalar-potential finite differences on the voxel grid.

Nodes sit at voxel corners (node dims = voxel dims + 1). Each axis-aligned
edge carries conductance ``g = mean(sigma of the 4 voxels sharing the edge) *
(cross-section / length)``, with voxels outside the grid counting as air.
Kirchhoff's law at every node gives ``L phi = b`` with ``L`` the weighted graph
Laplacian and ``b`` the injected nodal currents. Units: S/m, mm spacing
(converted to m), A, V.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .conductor import Montage
from .errors import BoundsError, ConvergenceError, ShapeError, SingularSystemError, SpecError, ValidationError
from .volume import ScalarVolume

log = logging.getLogger(__name__)

MM = 1e-3


@dataclass(frozen=True)
class SolverConfig:
    """``smoother_omega`` is the relaxation factor used inside multigrid
    V-cycles; ``omega`` drives plain SOR."""

    method: str = "sor"
    omega: float = 1.9
    tol: float = 1e-6
    max_iters: int = 200000
    mg_levels: int = 3
    mg_pre_smooths: int = 2
    mg_post_smooths: int = 2
    smoother_omega: float = 1.15
    coarse_sweeps: int = 400
    coarsening: str = "arithmetic"
    check_every: int = 10

    def __post_init__(self):
        if self.method not in ("sor", "multigrid"):
            raise ValidationError(f"method must be 'sor' or 'multigrid', got {self.method!r}")
        if not 0.0 < self.omega < 2.0:
            raise ValidationError(f"omega must lie in (0, 2), got {self.omega}")
        if not 0.0 < self.smoother_omega < 2.0:
            raise ValidationError(f"smoother_omega must lie in (0, 2), got {self.smoother_omega}")
        if not self.tol > 0:
            raise ValidationError(f"tol must be positive, got {self.tol}")
        if self.max_iters < 1 or self.mg_levels < 1 or self.check_every < 1:
            raise ValidationError("max_iters, mg_levels and check_every must be >= 1")
        if self.mg_pre_smooths < 0 or self.mg_post_smooths < 0:
            raise ValidationError("smoothing counts must be >= 0")
        if self.coarsening not in ("arithmetic", "harmonic"):
            raise ValidationError(f"coarsening must be arithmetic or harmonic, got {self.coarsening!r}")


@dataclass
class NodeGrid:
    """Edge conductances ``g[a]`` for edges along axis ``a`` (node pairs
    ``n`` and ``n + e_a``), plus the derived diagonal."""

    g: tuple[np.ndarray, np.ndarray, np.ndarray]
    spacing: tuple[float, float, float]
    active: np.ndarray | None = None
    sink: tuple | None = None  # gauge node, potential fixed to 0

    def __post_init__(self):
        gx, gy, gz = self.g
        self.shape = (gx.shape[0] + 1, gx.shape[1], gx.shape[2])
        d = np.zeros(self.shape)
        for a, ga in enumerate(self.g):
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[a], hi[a] = slice(None, -1), slice(1, None)
            d[tuple(lo)] += ga
            d[tuple(hi)] += ga
        self.diag = d
        if self.active is None:
            self.active = d > 0
        with np.errstate(divide="ignore"):
            self.inv_diag = np.where(self.active, 1.0 / np.where(d > 0, d, 1.0), 0.0)
        idx = np.indices(self.shape).sum(axis=0) % 2
        self.colors = (self.active & (idx == 0), self.active & (idx == 1))

    @property
    def voxel_dims(self):
        return tuple(n - 1 for n in self.shape)

    def neighbor_sum(self, phi):
        s = np.zeros_like(phi)
        gx, gy, gz = self.g
        s[:-1] += gx * phi[1:]
        s[1:] += gx * phi[:-1]
        s[:, :-1] += gy * phi[:, 1:]
        s[:, 1:] += gy * phi[:, :-1]
        s[:, :, :-1] += gz * phi[:, :, 1:]
        s[:, :, 1:] += gz * phi[:, :, :-1]
        return s

    def apply(self, phi):
        """``L phi``: net current leaving each node."""
        return self.diag * phi - self.neighbor_sum(phi)

    def residual(self, phi, b):
        r = b - self.apply(phi)
        r[~self.active] = 0.0
        return r


def edge_conductances(sigma: np.ndarray, spacing) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    s = np.asarray(sigma, dtype=np.float64)
    h = [float(v) * MM for v in spacing]
    sp = np.pad(s, 1)  # air outside the grid
    out = []
    for a in range(3):
        b, c = [x for x in range(3) if x != a]
        # voxels adjacent to an edge along a: offsets 0/-1 along the other two axes
        sl = lambda ob, oc: tuple(  # noqa: E731
            slice(1, -1) if x == a else (slice(ob, ob + s.shape[x] + 1) if x == b else slice(oc, oc + s.shape[x] + 1))
            for x in range(3))
        mean = (sp[sl(0, 0)] + sp[sl(1, 0)] + sp[sl(0, 1)] + sp[sl(1, 1)]) / 4.0
        out.append(mean * (h[b] * h[c] / h[a]))
    return tuple(out)


def build_grid(sigma: ScalarVolume) -> NodeGrid:
    if np.any(sigma.data < 0):
        raise ValidationError("conductivities must be >= 0")
    return NodeGrid(edge_conductances(sigma.data, sigma.spacing), sigma.spacing)


def _plate_currents(grid: NodeGrid, axis: int, layer: int, current: float):
    """Spread ``current`` over node layer ``layer`` in proportion to each
    node's conductance into the volume along ``axis``."""
    g = grid.g[axis]
    edge = g.take(0 if layer == 0 else g.shape[axis] - 1, axis=axis)
    total = edge.sum()
    if total <= 0:
        raise SingularSystemError(f"plate at layer {layer} of axis {axis} touches no conductive voxel")
    b = np.zeros(grid.shape)
    sl = [slice(None)] * 3
    sl[axis] = layer
    b[tuple(sl)] = current * edge / total
    return b


def _component_mask(grid: NodeGrid, seeds):
    """Nodes connected to ``seeds`` through positive conductances."""
    n = int(np.prod(grid.shape))
    ids = np.arange(n).reshape(grid.shape)
    rows, cols = [], []
    for a, ga in enumerate(grid.g):
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[a], hi[a] = slice(None, -1), slice(1, None)
        m = ga > 0
        rows.append(ids[tuple(lo)][m])
        cols.append(ids[tuple(hi)][m])
    r, c = np.concatenate(rows), np.concatenate(cols)
    adj = coo_matrix((np.ones(len(r), dtype=np.int8), (r, c)), shape=(n, n))
    _, lab = connected_components(adj, directed=False)
    lab = lab.reshape(grid.shape)
    comps = {int(lab[s]) for s in seeds}
    if len(comps) != 1:
        raise SingularSystemError("source and sink are not connected through conductive tissue")
    return lab == comps.pop()


def assemble(sigma: ScalarVolume, montage: Montage):
    """Returns ``(grid, b)``. ``grid.active`` is restricted to the conductive
    component that links source and sink; other nodes are held at 0 V."""
    grid = build_grid(sigma)
    I = montage.injected_current
    if montage.plates is not None:
        (sa, sl), (ka, kl) = montage.plates
        b = _plate_currents(grid, sa, sl, I) - _plate_currents(grid, ka, kl, I)
        seeds = [tuple(i) for i in np.argwhere(b != 0)]
    else:
        b = np.zeros(grid.shape)
        b[montage.source_node] += I
        b[montage.sink_node] -= I
        seeds = [montage.source_node, montage.sink_node]
    for s in (montage.source_node, montage.sink_node) if montage.plates is None else seeds:
        if grid.diag[s] <= 0:
            raise SingularSystemError(f"node {tuple(int(i) for i in s)} touches no conductive voxel")
    active = _component_mask(grid, seeds)
    return NodeGrid(grid.g, grid.spacing, active, montage.sink_node), b


@dataclass
class PotentialField:
    phi: np.ndarray
    residual_norm: float
    iterations: int
    history: list[float] = field(default_factory=list)
    sweeps: int = 0
    wall_time: float = 0.0


def _sor_sweep(grid: NodeGrid, phi, b, omega):
    for color in grid.colors:
        gs = (grid.neighbor_sum(phi) + b) * grid.inv_diag
        phi[color] += omega * (gs[color] - phi[color])


def _rel_res(grid, phi, b, bnorm):
    return float(np.linalg.norm(grid.residual(phi, b)) / bnorm)


def _finish(grid, phi):
    # gauge: potential at the sink node is 0; disconnected nodes stay at 0
    if grid.sink is not None:
        phi -= phi[grid.sink]
    phi[~grid.active] = 0.0
    return phi


def _check_rhs(grid, b):
    b = np.asarray(b, dtype=np.float64)
    if b.shape != grid.shape:
        raise ShapeError(f"current vector shape {b.shape} does not match node grid {grid.shape}")
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0:
        raise ValidationError("no current injected")
    if abs(b.sum()) > 1e-12 * np.abs(b).sum():
        raise ValidationError("injected currents do not balance")
    if np.any(b[~grid.active] != 0):
        raise SingularSystemError("current injected at a node outside the conductive component")
    return b, bnorm


def sor_solve(grid: NodeGrid, b, cfg: SolverConfig = SolverConfig(), phi0=None) -> PotentialField:
    """Red-black SOR until ``||b - L phi|| / ||b|| <= cfg.tol``."""
    t0 = time.perf_counter()
    b, bnorm = _check_rhs(grid, b)
    phi = np.zeros(grid.shape) if phi0 is None else np.array(phi0, dtype=np.float64)
    history = [_rel_res(grid, phi, b, bnorm)]
    it = 0
    while history[-1] > cfg.tol:
        if it >= cfg.max_iters:
            raise ConvergenceError(f"SOR did not reach tol {cfg.tol} in {cfg.max_iters} iterations "
                                   f"(residual {history[-1]:.3e})", history)
        for _ in range(min(cfg.check_every, cfg.max_iters - it)):
            _sor_sweep(grid, phi, b, cfg.omega)
            it += 1
        history.append(_rel_res(grid, phi, b, bnorm))
        if not np.isfinite(history[-1]):
            raise ConvergenceError("SOR diverged", history)
    log.info("SOR converged in %d sweeps, residual %.3e", it, history[-1])
    return PotentialField(_finish(grid, phi), history[-1], it, history, it, time.perf_counter() - t0)


# -- multigrid -------------------------------------------------------------


def _coarsen_sigma(s: np.ndarray, mode: str) -> np.ndarray:
    X, Y, Z = (d // 2 for d in s.shape)
    blocks = s.reshape(X, 2, Y, 2, Z, 2)
    if mode == "arithmetic":
        return blocks.mean(axis=(1, 3, 5))
    # harmonic mean, air blocks stay air
    with np.errstate(divide="ignore"):
        inv = np.where(blocks > 0, 1.0 / np.where(blocks > 0, blocks, 1.0), np.inf)
    h = 8.0 / inv.sum(axis=(1, 3, 5))
    return np.where(np.isfinite(h), h, 0.0)


def _prolong(c: np.ndarray) -> np.ndarray:
    """Trilinear interpolation from coarse nodes to fine nodes (2n-1 per axis)."""
    f = c
    for a in range(3):
        n = f.shape[a]
        shape = list(f.shape)
        shape[a] = 2 * n - 1
        out = np.empty(shape)
        ev = [slice(None)] * 3
        od = [slice(None)] * 3
        ev[a], od[a] = slice(0, None, 2), slice(1, None, 2)
        out[tuple(ev)] = f
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[a], hi[a] = slice(None, -1), slice(1, None)
        out[tuple(od)] = 0.5 * (f[tuple(lo)] + f[tuple(hi)])
        f = out
    return f


def _restrict(f: np.ndarray) -> np.ndarray:
    """Transpose of :func:`_prolong`; conserves the total current."""
    c = f
    for a in range(3):
        n = (c.shape[a] + 1) // 2
        ev = [slice(None)] * 3
        ev[a] = slice(0, None, 2)
        out = c[tuple(ev)].copy()
        od = [slice(None)] * 3
        od[a] = slice(1, None, 2)
        half = 0.5 * c[tuple(od)]
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[a], hi[a] = slice(None, n - 1), slice(1, n)
        out[tuple(lo)] += half
        out[tuple(hi)] += half
        c = out
    return c


def check_levels(voxel_dims, levels: int) -> None:
    f = 2 ** (levels - 1)
    if any(d % f for d in voxel_dims) or min(voxel_dims) // f < 2:
        raise SpecError(f"voxel dims {tuple(voxel_dims)} do not allow {levels} multigrid levels "
                        f"(need multiples of {f} with at least 2 coarse voxels per axis)")


def _hierarchy(sigma: np.ndarray, spacing, fine: NodeGrid, levels: int, mode: str):
    grids = [fine]
    s, h = sigma, tuple(spacing)
    for _ in range(levels - 1):
        s = _coarsen_sigma(s, mode)
        h = tuple(2 * v for v in h)
        grids.append(NodeGrid(edge_conductances(s, h), h))
    return grids


def _vcycle(grids, l, phi, b, cfg, counter):
    g = grids[l]
    if l == len(grids) - 1:
        for _ in range(cfg.coarse_sweeps):
            _sor_sweep(g, phi, b, cfg.omega)
        return
    for _ in range(cfg.mg_pre_smooths):
        _sor_sweep(g, phi, b, cfg.smoother_omega)
    if l == 0:
        counter[0] += cfg.mg_pre_smooths + cfg.mg_post_smooths
    rc = _restrict(g.residual(phi, b))
    rc[~grids[l + 1].active] = 0.0
    ec = np.zeros(grids[l + 1].shape)
    _vcycle(grids, l + 1, ec, rc, cfg, counter)
    corr = _prolong(ec)
    corr[~g.active] = 0.0
    phi += corr
    for _ in range(cfg.mg_post_smooths):
        _sor_sweep(g, phi, b, cfg.smoother_omega)


def multigrid_solve(grid: NodeGrid, b, cfg: SolverConfig = SolverConfig(), sigma: ScalarVolume | None = None,
                    phi0=None) -> PotentialField:
    """V-cycles with red-black SOR smoothing. Coarse operators are
    re-discretized from 2x2x2-averaged conductivities (``sigma`` is required
    for that); residuals restrict by the transpose of trilinear prolongation."""
    t0 = time.perf_counter()
    if sigma is None:
        raise ValidationError("multigrid needs the conductivity volume to build coarse levels")
    if tuple(d + 1 for d in sigma.dims) != grid.shape:
        raise ShapeError(f"sigma dims {sigma.dims} do not match node grid {grid.shape}")
    check_levels(sigma.dims, cfg.mg_levels)
    b, bnorm = _check_rhs(grid, b)
    grids = _hierarchy(np.asarray(sigma.data, dtype=np.float64), sigma.spacing, grid, cfg.mg_levels, cfg.coarsening)
    phi = np.zeros(grid.shape) if phi0 is None else np.array(phi0, dtype=np.float64)
    history = [_rel_res(grid, phi, b, bnorm)]
    counter = [0]
    it = 0
    while history[-1] > cfg.tol:
        if it >= cfg.max_iters:
            raise ConvergenceError(f"multigrid did not reach tol {cfg.tol} in {cfg.max_iters} V-cycles "
                                   f"(residual {history[-1]:.3e})", history)
        _vcycle(grids, 0, phi, b, cfg, counter)
        it += 1
        history.append(_rel_res(grid, phi, b, bnorm))
        if not np.isfinite(history[-1]):
            raise ConvergenceError("multigrid diverged", history)
    log.info("multigrid converged in %d V-cycles (%d fine sweeps), residual %.3e", it, counter[0], history[-1])
    return PotentialField(_finish(grid, phi), history[-1], it, history, counter[0], time.perf_counter() - t0)


def solve(sigma: ScalarVolume, montage: Montage, cfg: SolverConfig = SolverConfig()):
    """Assemble and solve; returns ``(grid, b, PotentialField)``."""
    grid, b = assemble(sigma, montage)
    if cfg.method == "multigrid":
        return grid, b, multigrid_solve(grid, b, cfg, sigma)
    return grid, b, sor_solve(grid, b, cfg)


# -- post-processing -------------------------------------------------------


@dataclass
class EFieldVolume:
    components: np.ndarray  # (3, X, Y, Z), V/m
    magnitude: ScalarVolume


def compute_efield(phi, grid: NodeGrid, sigma: ScalarVolume) -> EFieldVolume:
    """Per-voxel field: each component averages ``-dphi/h`` over the voxel's
    four parallel edges. Air voxels carry zero field."""
    p = phi.phi if isinstance(phi, PotentialField) else np.asarray(phi, dtype=np.float64)
    if p.shape != grid.shape or tuple(d + 1 for d in sigma.dims) != p.shape:
        raise ShapeError(f"potential shape {p.shape} does not match grid {grid.shape} / sigma {sigma.dims}")
    h = [v * MM for v in grid.spacing]
    comps = np.empty((3,) + sigma.dims)
    for a in range(3):
        d = -np.diff(p, axis=a) / h[a]
        b, c = [x for x in range(3) if x != a]
        sl = lambda ob, oc: tuple(  # noqa: E731
            slice(None) if x == a else (slice(ob, ob + sigma.dims[x]) if x == b else slice(oc, oc + sigma.dims[x]))
            for x in range(3))
        comps[a] = (d[sl(0, 0)] + d[sl(1, 0)] + d[sl(0, 1)] + d[sl(1, 1)]) / 4.0
    comps[:, sigma.data <= 0] = 0.0
    mag = np.sqrt((comps ** 2).sum(axis=0))
    return EFieldVolume(comps, ScalarVolume(mag, sigma.spacing))


def current_audit(phi, grid: NodeGrid, axis: int, plane: int) -> float:
    """Net current (A) crossing from node layer ``plane`` to ``plane + 1``."""
    p = phi.phi if isinstance(phi, PotentialField) else np.asarray(phi, dtype=np.float64)
    if p.shape != grid.shape:
        raise ShapeError(f"potential shape {p.shape} does not match grid {grid.shape}")
    if axis not in (0, 1, 2):
        raise BoundsError(f"axis must be 0, 1 or 2, got {axis}")
    if not 0 <= plane < grid.shape[axis] - 1:
        raise BoundsError(f"plane {plane} outside 0..{grid.shape[axis] - 2} along axis {axis}")
    g = grid.g[axis].take(plane, axis=axis)
    return float((g * (p.take(plane, axis=axis) - p.take(plane + 1, axis=axis))).sum())
