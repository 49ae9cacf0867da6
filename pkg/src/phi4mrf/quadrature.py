"""Tensor-product Simpson quadrature of the model density for up to 3 free sites.

This is the reference that the Monte Carlo code is checked against, so it
shares nothing with the sampler beyond ``CouplingSet``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .model import CouplingSet, Moments, action, pair_index

MAX_FREE_SITES = 3


class QuadratureError(ValueError):
    pass


@dataclass(frozen=True)
class QuadratureSpec:
    """Integration box and resolution.

    ``half_width`` is the starting L of the box ``[-L, L]`` per axis; it is
    doubled until the relative density on the boundary drops below
    ``boundary_tol``. ``points`` must be odd (Simpson).
    """

    half_width: float = 6.0
    points: int = 401
    boundary_tol: float = 1e-16
    max_doublings: int = 6
    chunk: int = 16


@dataclass(frozen=True)
class QuadratureResult:
    log_z: float
    moments: Moments
    half_width: float
    observables: dict

    @property
    def z(self) -> float:
        return math.exp(self.log_z)


def simpson_weights(n: int, h: float) -> np.ndarray:
    if n < 3 or n % 2 == 0:
        raise QuadratureError("Simpson rule needs an odd number of points >= 3")
    wts = np.ones(n)
    wts[1:-1:2] = 4.0
    wts[2:-1:2] = 2.0
    return wts * (h / 3.0)


def _free_action_parts(theta: CouplingSet, clamp_mask, clamp_values):
    """Reduce the action to the free sites, folding clamped values into linear terms."""
    v = theta.volume
    mask = np.zeros(v, dtype=bool) if clamp_mask is None else np.asarray(clamp_mask, dtype=bool)
    values = np.zeros(v) if clamp_values is None else np.asarray(clamp_values, dtype=np.float64)
    free = np.flatnonzero(~mask)
    fixed = np.flatnonzero(mask)
    wm = theta.w_matrix
    w_ff = wm[np.ix_(free, free)]
    # clamped neighbours act as an extra external field on free sites
    a_eff = theta.a[free] + wm[np.ix_(free, fixed)] @ values[fixed]
    return free, w_ff, theta.mu[free], theta.lam[free], a_eff


def _grid_action(axes: list[np.ndarray], w_ff, mu, lam, a) -> np.ndarray:
    """Free-site action on the outer-product grid of ``axes`` (broadcast, no meshgrid)."""
    k = len(axes)
    s = 0.0
    for i, x in enumerate(axes):
        x2 = x * x
        shape = [1] * k
        shape[i] = x.size
        s = s + (mu[i] * x2 + lam[i] * x2 * x2 - a[i] * x).reshape(shape)
        for j in range(i + 1, k):
            shape_j = [1] * k
            shape_j[j] = axes[j].size
            s = s - w_ff[i, j] * x.reshape(shape) * axes[j].reshape(shape_j)
    return np.broadcast_to(s, tuple(ax.size for ax in axes))


def quadrature_oracle(
    theta: CouplingSet,
    spec: QuadratureSpec | None = None,
    clamp_mask=None,
    clamp_values=None,
    observables: Mapping[str, Callable[[np.ndarray], np.ndarray]] | None = None,
) -> QuadratureResult:
    """Exact (to quadrature accuracy) partition function and moments.

    With a clamp, the result describes the conditional law of the free sites;
    moments are then reported over the free sites only, in site order.
    ``observables`` maps names to functions of the stacked free-site grid
    (shape ``(..., k)``) whose model expectations are returned as well.
    """
    spec = spec or QuadratureSpec()
    free, w_ff, mu, lam, a = _free_action_parts(theta, clamp_mask, clamp_values)
    k = free.size
    if k == 0:
        raise QuadratureError("no free sites to integrate")
    if k > MAX_FREE_SITES:
        raise QuadratureError(f"quadrature supports at most {MAX_FREE_SITES} free sites, got {k}")

    L = float(spec.half_width)
    for _ in range(spec.max_doublings + 1):
        x = np.linspace(-L, L, spec.points)
        s_min = _min_action(x, k, w_ff, mu, lam, a, spec.chunk)
        if _boundary_ok(x, k, w_ff, mu, lam, a, s_min, spec.boundary_tol):
            break
        L *= 2.0
    else:
        raise QuadratureError("density does not decay inside the largest integration box")

    wts = simpson_weights(spec.points, x[1] - x[0])
    observables = dict(observables or {})
    step = spec.chunk if k > 1 else spec.points
    total = 0.0
    # 2-D marginals of the weighted density are enough for every moment we need
    marg = {}
    single = np.zeros(spec.points) if k == 1 else None
    acc_obs = {name: 0.0 for name in observables}
    for start in range(0, spec.points, step):
        sl = slice(start, start + step)
        axes = [x[sl]] + [x] * (k - 1)
        mass = np.exp(-(_grid_action(axes, w_ff, mu, lam, a) - s_min))
        mass *= _outer_weights([wts[sl]] + [wts] * (k - 1))
        total += mass.sum()
        if k == 1:
            single += mass
        else:
            for i in range(k):
                for j in range(i + 1, k):
                    other = tuple(ax for ax in range(k) if ax not in (i, j))
                    m = mass.sum(axis=other) if other else mass
                    if i == 0:
                        marg.setdefault((i, j), np.zeros((spec.points, spec.points)))[sl] += m
                    else:
                        marg[(i, j)] = marg.get((i, j), 0.0) + m
        if observables:
            grids = np.meshgrid(*axes, indexing="ij")
            stacked = np.stack(grids, axis=-1)
            for name, fn in observables.items():
                acc_obs[name] += (mass * fn(stacked)).sum()

    if k == 1:
        margins = [single / total]
    else:
        for key in marg:
            marg[key] = marg[key] / total
        margins = [marg[(0, 1)].sum(axis=1)] + [marg[(0, j)].sum(axis=0) for j in range(1, k)]
    x2 = x * x
    mean_phi = np.array([m @ x for m in margins])
    mean_sq = np.array([m @ x2 for m in margins])
    mean_quart = np.array([m @ (x2 * x2) for m in margins])
    mean_pair = np.array([x @ marg[(i, j)] @ x for i, j in zip(*pair_index(k))])
    log_z = math.log(total) - s_min
    moments = Moments(mean_phi, mean_pair, mean_sq, mean_quart)
    return QuadratureResult(log_z, moments, L, {n: v / total for n, v in acc_obs.items()})


def _outer_weights(vectors: list[np.ndarray]) -> np.ndarray:
    out = vectors[0]
    for v in vectors[1:]:
        out = np.multiply.outer(out, v)
    return out


def _min_action(x, k, w_ff, mu, lam, a, chunk) -> float:
    step = chunk if k > 1 else x.size
    best = math.inf
    for start in range(0, x.size, step):
        s = _grid_action([x[start : start + step]] + [x] * (k - 1), w_ff, mu, lam, a)
        best = min(best, float(s.min()))
    return best


def _boundary_ok(x, k, w_ff, mu, lam, a, s_min, tol) -> bool:
    """Density on every face of the box, relative to the peak, must be below ``tol``."""
    edge = np.array([x[0], x[-1]])
    for axis in range(k):
        axes = [x] * k
        axes[axis] = edge
        s = _grid_action(axes, w_ff, mu, lam, a)
        if np.max(np.exp(-(s - s_min))) >= tol:
            return False
    return True


def log_partition(theta: CouplingSet, spec: QuadratureSpec | None = None) -> float:
    return quadrature_oracle(theta, spec).log_z


def kl_divergence(theta: CouplingSet, data, spec: QuadratureSpec | None = None) -> float:
    """KL(q || p) up to the (theta-independent) entropy of the empirical law q.

    Returns ``mean_q[S] + ln Z``, whose derivatives equal those of the KL.
    """
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    return float(np.mean(action(theta, data))) + log_partition(theta, spec)
