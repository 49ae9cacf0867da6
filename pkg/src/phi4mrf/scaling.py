"""Finite-size scaling of mean couplings against the number of sites."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import ReturnPanel
from .model import CouplingSet
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FitResult:
    """Power law ``|y| = prefactor * V**exponent`` fitted in log-log space."""

    exponent: float
    prefactor: float
    stderr_k: float
    r_squared: float
    sign: int
    points: tuple[tuple[int, float], ...]


def coupling_means(theta: CouplingSet) -> tuple[float, float]:
    """Mean pair weight over the V(V-1)/2 pairs and mean bias over the V sites."""
    if theta.volume < 2:
        raise ValueError("need at least 2 sites for a mean weight")
    return float(np.mean(theta.w)), float(np.mean(theta.a))


def powerlaw_fit(points: Sequence[tuple[float, float]]) -> FitResult:
    """Ordinary least squares of ``ln|y|`` on ``ln V``.

    All ``y`` must be nonzero and share a sign, which is reported separately.
    With two points the fit is exact and ``stderr_k`` is NaN.
    """
    pts = [(float(v), float(y)) for v, y in points]
    if len(pts) < 2:
        raise ValueError("need at least 2 points")
    v = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    if np.any(v <= 0) or len(set(v.tolist())) != v.size:
        raise ValueError("volumes must be positive and distinct")
    if np.any(y == 0) or not (np.all(y > 0) or np.all(y < 0)):
        raise ValueError("values must be nonzero and of one sign")
    sign = 1 if y[0] > 0 else -1
    lx, ly = np.log(v), np.log(np.abs(y))
    xm, ym = lx.mean(), ly.mean()
    sxx = np.sum((lx - xm) ** 2)
    k = float(np.sum((lx - xm) * (ly - ym)) / sxx)
    c = float(ym - k * xm)
    resid = ly - (c + k * lx)
    sst = float(np.sum((ly - ym) ** 2))
    ssr = float(np.sum(resid**2))
    r2 = 1.0 - ssr / sst if sst > 0 else 1.0
    n = v.size
    stderr = math.sqrt(ssr / (n - 2) / sxx) if n > 2 else float("nan")
    return FitResult(k, math.exp(c), stderr, r2, sign, tuple((int(a) if a.is_integer() else a, b) for a, b in pts))


def nested_subsets(tickers: Sequence[str], volumes: Sequence[int], rule: str = "alphabetical", seed: int = 0) -> dict[int, tuple[str, ...]]:
    """Nested ticker subsets, one per volume (each contained in the next larger one)."""
    ordered = sorted(tickers)
    if rule == "random":
        rng = np.random.default_rng(seed)
        ordered = [ordered[k] for k in rng.permutation(len(ordered))]
    elif rule != "alphabetical":
        raise ValueError(f"unknown subset rule {rule!r}")
    return {v: tuple(ordered[:v]) for v in volumes}


@dataclass
class ScalingResult:
    rows: list[tuple[int, float, float]] = field(default_factory=list)
    weights: FitResult | None = None
    biases: FitResult | None = None
    thetas: dict = field(default_factory=dict)
    error: str | None = None


def scaling_run(
    panel: ReturnPanel,
    volumes: Sequence[int],
    train_cfg: TrainConfig | None = None,
    subset_rule: str = "alphabetical",
    draws: int = 1,
    seed: int = 0,
    fit_fn: Callable[[ReturnPanel, TrainConfig], CouplingSet] | None = None,
) -> ScalingResult:
    """Train at each volume, record mean weight and bias, and fit both power laws.

    ``fit_fn(sub_panel, cfg)`` replaces training (used to inject known
    couplings). With ``subset_rule="random"`` the means are averaged over
    ``draws`` seeded nested subsets. A training failure stops the run and the
    points collected so far are kept in the result.
    """
    volumes = list(volumes)
    if volumes != sorted(set(volumes)):
        raise ValueError("volumes must be sorted and distinct")
    if volumes[-1] > len(panel.tickers):
        raise ValueError(f"panel has {len(panel.tickers)} tickers, need {volumes[-1]}")
    cfg = train_cfg or TrainConfig()
    fit_fn = fit_fn or (lambda sub, c: train(sub.returns, c, sub.tickers).theta)
    n_draws = draws if subset_rule == "random" else 1
    subsets = [nested_subsets(panel.tickers, volumes, subset_rule, seed + d) for d in range(n_draws)]
    result = ScalingResult()
    for v in volumes:
        mw, ma = [], []
        try:
            for d, subs in enumerate(subsets):
                theta = fit_fn(panel.select(subs[v]), cfg)
                result.thetas[(v, d)] = theta
                w, a = coupling_means(theta)
                mw.append(w)
                ma.append(a)
        except Exception as exc:  # noqa: BLE001 - partial results are part of the contract
            log.error("training failed at V=%d: %s", v, exc)
            result.error = f"V={v}: {exc}"
            break
        result.rows.append((v, float(np.mean(mw)), float(np.mean(ma))))
    if len(result.rows) >= 2:
        for attr, col in (("weights", 1), ("biases", 2)):
            try:
                setattr(result, attr, powerlaw_fit([(r[0], r[col]) for r in result.rows]))
            except ValueError as exc:
                log.warning("cannot fit %s: %s", attr, exc)
    return result
