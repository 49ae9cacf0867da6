"""Market statistics: cross-sectional mean, rolling Pearson kurtosis, MAE."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .data import ReturnPanel, binarize, binarize_panel, minmax_rescale, sma
from .model import CouplingSet
from .sampler import SamplerConfig, sample
from .trainer import TrainConfig, train

KURTOSIS_CONVENTION = "pearson"


def market_series(panel: ReturnPanel | np.ndarray) -> np.ndarray:
    """Equal-weight mean return across tickers for each day."""
    r = panel.returns if isinstance(panel, ReturnPanel) else np.asarray(panel, dtype=np.float64)
    if r.ndim == 1:
        return r.copy()
    if r.size == 0:
        raise ValueError("panel is empty")
    return r.mean(axis=1)


def _pearson(windows: np.ndarray) -> np.ndarray:
    """Kurtosis of each row of ``windows`` (which may be ``(n, w)`` or ``(n, w, k)`` pooled)."""
    flat = windows.reshape(windows.shape[0], -1)
    dev = flat - flat.mean(axis=1, keepdims=True)
    d2 = dev * dev
    m2 = d2.mean(axis=1)
    m4 = (d2 * d2).mean(axis=1)
    out = np.full(flat.shape[0], np.nan)
    ok = m2 > 0
    out[ok] = m4[ok] / (m2[ok] * m2[ok])
    return out


def rolling_kurtosis(series, window: int = 250) -> np.ndarray:
    """Pearson kurtosis m4 / m2^2 over each trailing window (population moments).

    Windows with zero variance yield NaN. ``series`` may be ``(T,)`` or a
    ``(T, k)`` array, in which case each window pools all k columns.
    """
    x = np.asarray(series, dtype=np.float64)
    if window < 4:
        raise ValueError("window must be >= 4")
    if x.shape[0] < window:
        raise ValueError(f"series of length {x.shape[0]} is shorter than window {window}")
    views = np.lib.stride_tricks.sliding_window_view(x, window, axis=0)
    return _pearson(views)


def two_point_kurtosis(frac_plus) -> np.ndarray:
    """Pearson kurtosis of a +/-1 variable that equals +1 with probability p.

    Equals ``1 / (p (1 - p)) - 3``; undefined (NaN) at p in {0, 1}.
    """
    p = np.asarray(frac_plus, dtype=np.float64)
    pq = p * (1.0 - p)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(pq > 0, 1.0 / np.where(pq > 0, pq, 1.0) - 3.0, np.nan)


def mae(pred, truth) -> float:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("empty series")
    return float(np.mean(np.abs(p - t)))


def market_statistics(panel: ReturnPanel, window: int = 250, pooled: bool = False) -> dict[str, np.ndarray]:
    """Trailing SMA of the market mean and rolling market kurtosis.

    Both outputs are aligned with ``dates[window - 1:]``. With ``pooled`` the
    kurtosis is taken over all ticker returns in each window instead of the
    market-mean series.
    """
    m = market_series(panel)
    kurt = rolling_kurtosis(panel.returns if pooled else m, window)
    return {"market_mean_sma": sma(m, window), "market_kurtosis": kurt}


def phi4_panel(
    panel: ReturnPanel,
    theta: CouplingSet | None = None,
    train_cfg: TrainConfig | None = None,
    sampler_cfg: SamplerConfig | None = None,
    seed: int = 0,
    refit_every: int | None = None,
    fit_window: int = 250,
    threads: int = 1,
) -> ReturnPanel:
    """Synthetic panel with one model sample per date of ``panel``.

    With ``theta`` given it is sampled as is. Otherwise the couplings are fit
    to the whole panel, or, with ``refit_every`` = n, refit every n days on
    the trailing ``fit_window`` days before the block (the first blocks reuse
    the first ``fit_window`` days). Samples of one block come from a single
    chain ``sweeps_between_samples`` apart.
    """
    t = len(panel)
    x = panel.returns
    scfg = sampler_cfg or SamplerConfig(sweeps_burn_in=1000, sweeps_between_samples=5, n_samples=0)
    tcfg = train_cfg or TrainConfig()
    if theta is not None or refit_every is None:
        blocks = [(0, t)]
    else:
        if refit_every < 1:
            raise ValueError("refit_every must be >= 1")
        if t < fit_window:
            raise ValueError(f"panel has {t} days, fit_window is {fit_window}")
        blocks = [(b, min(b + refit_every, t)) for b in range(0, t, refit_every)]

    def block(k: int) -> np.ndarray:
        b, e = blocks[k]
        th = theta
        if th is None:
            if refit_every is None:
                fit_rows = x
            else:
                lo = max(0, b - fit_window)
                fit_rows = x[lo : lo + fit_window]
            th = train(fit_rows, replace(tcfg, seed=np.random.SeedSequence([seed, k, 0]), threads=1)).theta
        rng = np.random.default_rng(np.random.SeedSequence([seed, k, 1]))
        return sample(th, replace(scfg, n_samples=e - b), seed=rng)

    if threads > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(block, range(len(blocks))))
    else:
        parts = [block(k) for k in range(len(blocks))]
    return ReturnPanel(panel.tickers, panel.dates, np.concatenate(parts))


def comparison_table(
    original: ReturnPanel,
    phi4: ReturnPanel | None = None,
    window: int = 250,
    pooled: bool = False,
    binarized: bool = True,
) -> list[tuple]:
    """Rows ``(date, market_mean_sma, market_kurtosis, source_label)``.

    The binarized series is the sign of the market series (or, with
    ``pooled``, of every return), so its kurtosis depends only on the +1
    fraction in each window. Its mean is min-max rescaled onto the range of
    the original mean so the two can share an axis.
    """
    dates = original.dates[window - 1 :]
    rows = []
    base = market_statistics(original, window, pooled)
    sources = [("original", base)]
    if phi4 is not None:
        if len(phi4) != len(original):
            raise ValueError("phi4 panel must cover the same dates as the original")
        sources.append(("phi4", market_statistics(phi4, window, pooled)))
    if binarized:
        if pooled:
            binar = market_statistics(binarize_panel(original), window, pooled=True)
        else:
            signs = binarize(market_series(original))
            binar = {"market_mean_sma": sma(signs, window), "market_kurtosis": rolling_kurtosis(signs, window)}
        lo, hi = float(base["market_mean_sma"].min()), float(base["market_mean_sma"].max())
        binar["market_mean_sma"] = minmax_rescale(binar["market_mean_sma"], lo, hi)
        sources.append(("binarized", binar))
    for label, st in sources:
        for d, mean, kurt in zip(dates, st["market_mean_sma"], st["market_kurtosis"]):
            rows.append((d, float(mean), float(kurt), label))
    return rows
