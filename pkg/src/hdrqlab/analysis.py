"""Error barriers along linear paths, 2-D loss surfaces and curvature probes.

Hessians are never formed.  Curvature along a direction ``v`` comes from a
central difference of the gradient, ``v . (g(theta + h v) - g(theta - h v)) / 2h``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nnet import Batch, DimensionError, Network, Objective, CrossEntropy, check_same_architecture

DEFAULT_GRID = 21


@dataclass
class BarrierReport:
    lambdas: np.ndarray
    losses: np.ndarray
    endpoint_losses: tuple[float, float]
    barrier: float
    domain: str | None = None

    def recompute(self) -> float:
        return float(np.max(self.losses - 0.5 * sum(self.endpoint_losses)))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lambda", "loss"])
            for lam, loss in zip(self.lambdas, self.losses):
                w.writerow([repr(float(lam)), repr(float(loss))])


@dataclass
class SurfaceGrid:
    basis: tuple[np.ndarray, np.ndarray]
    origin: Network
    grid: np.ndarray  # [nu, nv]
    u: np.ndarray
    v: np.ndarray

    @property
    def resolution(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def extent(self):
        return (float(self.u[0]), float(self.u[-1])), (float(self.v[0]), float(self.v[-1]))

    def coords(self, net: Network) -> tuple[float, float]:
        d = net.flat() - self.origin.flat()
        return float(d @ self.basis[0]), float(d @ self.basis[1])

    def point(self, u: float, v: float) -> Network:
        return self.origin.from_flat(self.origin.flat() + u * self.basis[0] + v * self.basis[1])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["u", "v", "loss"])
            for i, u in enumerate(self.u):
                for j, v in enumerate(self.v):
                    w.writerow([repr(float(u)), repr(float(v)), repr(float(self.grid[i, j]))])


def interpolate(t1: Network, t2: Network, lam: float) -> Network:
    """``(1 - lam) * t1 + lam * t2``, exact at both endpoints."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    check_same_architecture(t1, t2)
    if lam == 0.0:
        return t1.copy()
    if lam == 1.0:
        return t2.copy()
    if lam == 0.5:
        return t1.with_params([(a + b) / 2 for a, b in zip(t1.params(), t2.params())])
    return t1.with_params([(1.0 - lam) * a + lam * b for a, b in zip(t1.params(), t2.params())])


def error_barrier(t1: Network, t2: Network, eval_batch: Batch | None, grid_n: int = DEFAULT_GRID,
                  loss: Objective | None = None, domain: str | None = None) -> BarrierReport:
    """Largest excess of the path loss over the mean endpoint loss."""
    if grid_n < 3:
        raise ValueError("grid_n must be >= 3")
    loss = loss or CrossEntropy()
    lambdas = np.linspace(0.0, 1.0, grid_n)
    losses = np.array([loss(interpolate(t1, t2, float(lam)), eval_batch) for lam in lambdas])
    ends = (float(losses[0]), float(losses[-1]))
    rep = BarrierReport(lambdas, losses, ends, 0.0, domain)
    rep.barrier = rep.recompute()
    return rep


def cross_domain_barrier(t1: Network, t2: Network, batch_d1: Batch | None, batch_d2: Batch | None,
                         grid_n: int = DEFAULT_GRID, loss1: Objective | None = None,
                         loss2: Objective | None = None):
    """Barriers under each domain's loss plus the shifted floor ``0.5 |L1(t1) - L1(t2)|``.

    Returns ``(report_d1, report_d2, floor_d1, floor_d2)``.
    """
    loss1 = loss1 or CrossEntropy()
    loss2 = loss2 or loss1
    r1 = error_barrier(t1, t2, batch_d1, grid_n, loss1, "d1")
    r2 = error_barrier(t1, t2, batch_d2, grid_n, loss2, "d2")
    floor1 = 0.5 * abs(r1.endpoint_losses[0] - r1.endpoint_losses[1])
    floor2 = 0.5 * abs(r2.endpoint_losses[0] - r2.endpoint_losses[1])
    return r1, r2, floor1, floor2


def surface_grid(origin: Network, t1: Network, t2: Network, eval_batch: Batch | None,
                 resolution: tuple[int, int] = (21, 21), extent=None,
                 loss: Objective | None = None) -> SurfaceGrid:
    """Loss on the plane through ``origin`` spanned by ``t1 - origin`` and ``t2 - origin``.

    ``extent`` is ``((u_min, u_max), (v_min, v_max))``; by default it covers
    the origin and both targets with a 25% margin.
    """
    check_same_architecture(origin, t1, t2)
    loss = loss or CrossEntropy()
    o = origin.flat()
    d1, d2 = t1.flat() - o, t2.flat() - o
    n1 = np.linalg.norm(d1)
    if n1 == 0.0:
        raise ValueError("degenerate basis: t1 coincides with the origin")
    e1 = d1 / n1
    r = d2 - (d2 @ e1) * e1
    nr = np.linalg.norm(r)
    if nr <= 1e-12 * max(1.0, np.linalg.norm(d2)):
        raise ValueError("degenerate basis: t1 - origin and t2 - origin are collinear")
    e2 = r / nr
    e2 = e2 - (e2 @ e1) * e1
    e2 /= np.linalg.norm(e2)
    if extent is None:
        us = [0.0, float(d1 @ e1), float(d2 @ e1)]
        vs = [0.0, float(d1 @ e2), float(d2 @ e2)]
        extent = (_pad(us), _pad(vs))
    nu, nv = resolution
    u = np.linspace(extent[0][0], extent[0][1], nu)
    v = np.linspace(extent[1][0], extent[1][1], nv)
    grid = np.empty((nu, nv))
    for i, a in enumerate(u):
        for j, b in enumerate(v):
            grid[i, j] = loss(origin.from_flat(o + a * e1 + b * e2), eval_batch)
    return SurfaceGrid((e1, e2), origin, grid, u, v)


def _pad(vals, frac=0.25):
    lo, hi = min(vals), max(vals)
    span = hi - lo
    return lo - frac * span, hi + frac * span


def hessian_quadform(net: Network, batch: Batch | None, v, h: float = 1e-4,
                     loss: Objective | None = None) -> float:
    """``v^T H v`` from a central difference of gradients along ``v``."""
    if not h > 0:
        raise ValueError("h must be positive")
    loss = loss or CrossEntropy()
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.shape != (net.n_params,):
        raise DimensionError(f"probe has {v.size} entries, network has {net.n_params} parameters")
    if not np.any(v):
        return 0.0
    theta = net.flat()
    gp = np.concatenate([g.ravel() for g in loss.grad(net.from_flat(theta + h * v), batch)])
    gm = np.concatenate([g.ravel() for g in loss.grad(net.from_flat(theta - h * v), batch)])
    return float(v @ (gp - gm) / (2.0 * h))


def midpoint_hessian_gap(t1: Network, t2: Network, batch: Batch | None, v, h: float = 1e-4,
                         loss: Objective | None = None) -> float:
    """``|q(mid) - (q(t1) + q(t2)) / 2|`` for the curvature ``q`` along ``v``."""
    mid = interpolate(t1, t2, 0.5)
    q_mid = hessian_quadform(mid, batch, v, h, loss)
    q1 = hessian_quadform(t1, batch, v, h, loss)
    q2 = hessian_quadform(t2, batch, v, h, loss)
    return abs(q_mid - 0.5 * (q1 + q2))


def mean_curvature(net: Network, batch: Batch | None, n_probes: int, rng: np.random.Generator,
                   h: float = 1e-4, loss: Objective | None = None) -> float:
    """Average ``v^T H v`` over random unit probes."""
    total = 0.0
    for _ in range(n_probes):
        v = rng.normal(size=net.n_params)
        total += hessian_quadform(net, batch, v / np.linalg.norm(v), h, loss)
    return total / n_probes
