"""Imputation, next-day forecasting and the two baselines."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .data import build_windows
from .model import CouplingSet
from .sampler import ConditionalSummary, SamplerConfig, conditional_mean
from .trainer import DivergenceError, InitSpec, TrainConfig, train

log = logging.getLogger(__name__)

IMPUTE_SAMPLER = SamplerConfig(sweeps_burn_in=500, sweeps_between_samples=2, n_samples=4000)
FORECAST_SAMPLER = SamplerConfig(sweeps_burn_in=200, sweeps_between_samples=2, n_samples=2000)
FORECAST_TRAIN = TrainConfig(
    learning_rate=0.05,
    lr_scale_lambda=0.1,
    epochs=300,
    chains=8,
    samples_per_chain=4,
    l2_weight_decay=2.0,
    average_last=150,
    init=InitSpec(w_init_std=0.0),
    sampler=SamplerConfig(proposal_width=0.5, sweeps_burn_in=50, sweeps_between_samples=1, n_samples=0),
)


def impute(
    theta: CouplingSet,
    target: str | int,
    observed: Mapping[str, float] | Sequence[float],
    cfg: SamplerConfig = IMPUTE_SAMPLER,
    seed=0,
    chains: int = 2,
) -> ConditionalSummary:
    """Posterior of one site given observed values for every other site.

    ``observed`` is a ticker -> value mapping, or a length-V sequence whose
    target entry is ignored.
    """
    v = theta.volume
    if isinstance(target, str):
        if target not in theta.tickers:
            raise KeyError(f"target {target!r} is not a modelled ticker")
        t = theta.tickers.index(target)
    else:
        t = int(target)
        if not 0 <= t < v:
            raise KeyError(f"target site {t} out of range")
    values = np.zeros(v)
    if isinstance(observed, Mapping):
        unknown = set(observed) - set(theta.tickers)
        if unknown:
            raise KeyError(f"observed tickers not in model: {sorted(unknown)}")
        for k, name in enumerate(theta.tickers):
            if k == t:
                continue
            if name not in observed:
                raise ValueError(f"missing observed value for {name!r}")
            values[k] = float(observed[name])
    else:
        obs = np.asarray(observed, dtype=np.float64)
        if obs.shape != (v,):
            raise ValueError(f"observed must have length {v}")
        values[:] = obs
        values[t] = 0.0
    mask = np.ones(v, dtype=bool)
    mask[t] = False
    if not np.all(np.isfinite(values[mask])):
        raise ValueError("observed values must be finite")
    return conditional_mean(theta, cfg, (mask, values), seed, chains)


def rescaled_mean_baseline(observed: Sequence[float], sigmas: Sequence[float], sigma_target: float) -> float:
    """``sigma_target`` times the mean of the standardized observed returns.

    With two observed stocks A and B this is
    ``(sigma_target / 2) * (phi_A / sigma_A + phi_B / sigma_B)``.
    """
    obs = [float(x) for x in observed]
    sig = [float(s) for s in sigmas]
    if len(obs) != len(sig) or not obs:
        raise ValueError("need one sigma per observed value")
    if sigma_target <= 0 or any(s <= 0 for s in sig):
        raise ValueError("standard deviations must be positive")
    return sigma_target * sum(x / s for x, s in zip(obs, sig)) / len(obs)


@dataclass(frozen=True)
class ForecastRow:
    index: int  # position in the series of the day being predicted
    date: object
    truth: float
    mean: float
    std: float
    q05: float
    q50: float
    q95: float


def _forecast_clamp(history: np.ndarray, window: int) -> tuple[np.ndarray, np.ndarray]:
    """Clamp sites 1..W-1 to (x_t, x_{t-1}, ...); site 0 (tomorrow) stays free."""
    values = np.zeros(window)
    values[1:] = history[::-1][: window - 1]
    mask = np.ones(window, dtype=bool)
    mask[0] = False
    return mask, values


def next_day_forecast(
    series,
    forecast_index: Sequence[int],
    window: int = 150,
    train_days: int = 230,
    train_cfg: TrainConfig = FORECAST_TRAIN,
    sampler_cfg: SamplerConfig = FORECAST_SAMPLER,
    retrain_every: int = 1,
    seed: int = 0,
    dates: Sequence | None = None,
    threads: int = 1,
) -> list[ForecastRow]:
    """Walk-forward one-day-ahead forecasts of ``series[i]`` for each i in ``forecast_index``.

    The model predicting day i is trained on the ``train_days`` returns ending
    at the most recent retrain day ``r <= i - 1`` (windows of length ``window``
    anchored on each of those days that has a full window), then sampled with
    the latest ``window - 1`` returns before i clamped. Nothing dated i or later
    is read. Days whose training diverges are skipped and logged.
    """
    x = np.asarray(series, dtype=np.float64)
    idx = sorted(int(i) for i in forecast_index)
    if not idx:
        return []
    if train_days < window:
        raise ValueError("train_days must be at least the window length")
    if idx[0] < train_days:
        raise ValueError(f"first forecast index {idx[0]} needs {train_days} days of history")
    if idx[-1] >= x.shape[0]:
        raise ValueError("forecast index beyond the series")
    if retrain_every < 1:
        raise ValueError("retrain_every must be >= 1")

    # each forecast day uses the model fitted on data up to its retrain day
    retrain_day = {i: idx[0] - 1 + ((i - idx[0]) // retrain_every) * retrain_every for i in idx}
    fit_days = sorted(set(retrain_day.values()))

    def fit(r: int) -> CouplingSet | None:
        hist = x[r - train_days + 1 : r + 1]
        ds = build_windows(hist, window)
        cfg = replace(train_cfg, seed=_day_seed(seed, r, 0), threads=1)
        try:
            return train(ds.vectors, cfg).theta
        except DivergenceError as exc:
            log.warning("training for day %d diverged: %s", r, exc)
            return None

    def predict(i: int, theta: CouplingSet) -> ForecastRow:
        hist = x[i - window + 1 : i]
        summary = conditional_mean(theta, sampler_cfg, _forecast_clamp(hist, window), _day_seed(seed, i, 1))
        return ForecastRow(
            i,
            dates[i] if dates is not None else i,
            float(x[i]),
            float(summary.mean[0]),
            float(summary.std[0]),
            float(summary.q05[0]),
            float(summary.q50[0]),
            float(summary.q95[0]),
        )

    def run(r: int) -> list[ForecastRow]:
        theta = fit(r)
        if theta is None:
            return []
        return [predict(i, theta) for i in idx if retrain_day[i] == r]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(run, fit_days))
    else:
        chunks = [run(r) for r in fit_days]
    return [row for chunk in chunks for row in chunk]


def _day_seed(seed: int, day: int, stream: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, day, stream])


def rolling_linreg_baseline(
    series,
    windows: Sequence[int],
    forecast_index: Sequence[int],
    lags: int = 1,
) -> dict[int, np.ndarray]:
    """Walk-forward AR(p) least-squares forecasts for each rolling window size.

    For day i the regression uses the ``window`` most recent (lagged inputs,
    next return) pairs whose target is dated before i, with an intercept.
    Returns window -> predictions aligned with ``forecast_index`` (NaN where
    the design matrix is rank deficient).
    """
    x = np.asarray(series, dtype=np.float64)
    idx = np.asarray(sorted(int(i) for i in forecast_index))
    p = lags
    if p < 1:
        raise ValueError("need at least one lag")
    out = {}
    for w in windows:
        if w < p + 1:
            raise ValueError(f"window {w} too small for {p} lags plus intercept")
        if idx.size and idx[0] - w - p < 0:
            raise ValueError(f"window {w} needs {w + p} days of history before index {idx[0]}")
        preds = np.full(idx.size, np.nan)
        for k, i in enumerate(idx):
            targets = np.arange(i - w, i)
            design = np.column_stack([np.ones(w)] + [x[targets - lag] for lag in range(1, p + 1)])
            y = x[targets]
            coef, _, rank, _ = np.linalg.lstsq(design, y, rcond=None)
            if rank < p + 1:
                log.warning("singular design for window %d at day %d", w, i)
                continue
            preds[k] = coef[0] + sum(coef[lag] * x[i - lag] for lag in range(1, p + 1))
        out[w] = preds
    return out


def mae_ignoring_missing(pred, truth) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    ok = np.isfinite(pred)
    if not ok.any():
        return math.nan
    return float(np.mean(np.abs(pred[ok] - truth[ok])))
