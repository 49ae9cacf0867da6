"""Maximum-likelihood (KL-minimising) training by moment matching.

The KL divergence from the empirical law q to the model p has gradient
``<dS/dtheta>_q - <dS/dtheta>_p``; model expectations come from Metropolis
chains that by default persist across epochs.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, NamedTuple

import numpy as np

from .model import (
    LAMBDA_MIN,
    CouplingGradient,
    CouplingSet,
    DimensionError,
    MomentAccumulator,
    Moments,
    n_pairs,
    pair_index,
)
from .sampler import SamplerConfig, burn_in, chain_seeds, chains_se, init_chain, run_sweeps, sample_chains

log = logging.getLogger(__name__)

FAMILIES = ("phi", "pair", "sq", "quart")
# couplings in units where every site has unit RMS never legitimately reach this
BLOWUP = 1e6


class DivergenceError(RuntimeError):
    """Training produced a non-finite gradient or coupling."""

    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class InitSpec:
    w_init_std: float = 0.01
    a_init: float = 0.0
    mu_init: float = 0.5
    lambda_init: float = 0.5

    def __post_init__(self):
        if self.lambda_init < LAMBDA_MIN:
            raise ValueError(f"lambda_init must be >= {LAMBDA_MIN}")

    def build(self, volume: int, rng: np.random.Generator, tickers=(), lambda_min=LAMBDA_MIN) -> CouplingSet:
        return CouplingSet(
            rng.normal(0.0, self.w_init_std, n_pairs(volume)) if self.w_init_std > 0 else np.zeros(n_pairs(volume)),
            np.full(volume, self.mu_init),
            np.full(volume, self.lambda_init),
            np.full(volume, self.a_init),
            tickers,
            lambda_min,
        )


TRAIN_SAMPLER = SamplerConfig(proposal_width=0.5, sweeps_burn_in=200, sweeps_between_samples=1, n_samples=0)


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser and chain settings.

    Per epoch every chain advances ``samples_per_chain * sampler.sweeps_between_samples``
    sweeps and contributes its state every ``sweeps_between_samples`` sweeps to
    the model moments. ``average_last`` > 0 returns the mean of the couplings
    over that many final epochs. With ``lr_decay_epochs`` = tau > 0 the step at
    epoch t is ``learning_rate / (1 + t / tau)``. ``standardize`` trains on returns divided by
    their per-site RMS and maps the result back to return units exactly.
    """

    learning_rate: float = 1e-2
    lr_decay_epochs: float = 0.0
    lr_scale_w: float = 1.0
    lr_scale_mu: float = 1.0
    lr_scale_lambda: float = 0.1
    lr_scale_a: float = 1.0
    epochs: int = 500
    chains: int = 8
    samples_per_chain: int = 4
    persistent: bool = True
    sampler: SamplerConfig = TRAIN_SAMPLER
    init: InitSpec = field(default_factory=InitSpec)
    seed: int = 0
    l2_weight_decay: float = 0.0
    standardize: bool = True
    average_last: int = 0
    threads: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 1 or self.chains < 1 or self.samples_per_chain < 1:
            raise ValueError("epochs, chains and samples_per_chain must be >= 1")
        if self.lr_decay_epochs < 0:
            raise ValueError("lr_decay_epochs must be non-negative")
        if self.l2_weight_decay < 0:
            raise ValueError("l2_weight_decay must be non-negative")
        if not 0 <= self.average_last <= self.epochs:
            raise ValueError("average_last must lie in [0, epochs]")


def data_moments(configs) -> MomentAccumulator:
    """Empirical sufficient statistics of a set of configurations."""
    x = np.asarray(configs, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("need at least one configuration")
    if not np.all(np.isfinite(x)):
        raise ValueError("configurations contain non-finite values")
    return MomentAccumulator.from_samples(x)


def _means(m) -> Moments:
    return m.means() if isinstance(m, MomentAccumulator) else Moments(*m)


def kl_gradient(theta: CouplingSet, data, model) -> CouplingGradient:
    """Gradient of KL(q || p) from data (q) and model (p) moments."""
    dq, dp = _means(data), _means(model)
    v = theta.volume
    for m in (dq, dp):
        if m.phi.shape != (v,) or m.pair.shape != (n_pairs(v),):
            raise DimensionError("moment dimensions disagree with couplings")
    return CouplingGradient(
        -(dq.pair - dp.pair),
        dq.sq - dp.sq,
        dq.quart - dp.quart,
        -(dq.phi - dp.phi),
    )


def moment_residuals(data, model) -> dict[str, float]:
    """Largest absolute data-vs-model gap in each family."""
    dq, dp = _means(data), _means(model)
    return {
        name: float(np.max(np.abs(q - p))) if q.size else 0.0
        for name, q, p in zip(FAMILIES, dq, dp)
    }


class TrainResult(NamedTuple):
    theta: CouplingSet
    history: list[dict]
    scale: np.ndarray


def learning_rate_at(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_decay_epochs > 0:
        return cfg.learning_rate / (1.0 + epoch / cfg.lr_decay_epochs)
    return cfg.learning_rate


def _apply_update(
    theta: CouplingSet, grad: CouplingGradient, cfg: TrainConfig, eta: float, lam_floor
) -> CouplingSet:
    gw = grad.w + cfg.l2_weight_decay * theta.w
    return CouplingSet(
        theta.w - eta * cfg.lr_scale_w * gw,
        theta.mu - eta * cfg.lr_scale_mu * grad.mu,
        np.maximum(theta.lam - eta * cfg.lr_scale_lambda * grad.lam, lam_floor),
        theta.a - eta * cfg.lr_scale_a * grad.a,
        theta.tickers,
        theta.lambda_min,
    )


def _natural_size(theta: CouplingSet, rms: np.ndarray) -> float:
    i, j = pair_index(theta.volume)
    r2 = rms * rms
    parts = [np.abs(theta.w) * rms[i] * rms[j], np.abs(theta.mu) * r2, theta.lam * r2 * r2, np.abs(theta.a) * rms]
    return max(float(p.max()) if p.size else 0.0 for p in parts)


def train(
    data,
    cfg: TrainConfig | None = None,
    tickers=(),
    init_theta: CouplingSet | None = None,
    callback: Callable[[int, CouplingSet, dict], None] | None = None,
) -> TrainResult:
    """Fit couplings to the rows of ``data`` (shape ``(n, V)``).

    ``init_theta`` (in return units) warm-starts the couplings instead of
    ``cfg.init``. The returned couplings are in the units of ``data``.
    """
    cfg = cfg or TrainConfig()
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("training data must be a non-empty (n, V) array")
    if not np.all(np.isfinite(x)):
        raise ValueError("training data contain non-finite values")
    n, v = x.shape
    if init_theta is not None and init_theta.volume != v:
        raise DimensionError("init_theta volume disagrees with data")

    if cfg.standardize:
        scale = np.sqrt(np.mean(x * x, axis=0))
        scale[scale == 0] = 1.0
    else:
        scale = np.ones(v)
    z = x / scale
    # the floor applies in return units: lam_raw = lam_scaled / scale**4
    lam_floor = LAMBDA_MIN * scale**4 * (1 + 1e-12)
    dq = data_moments(z)
    rms = np.sqrt(np.mean(z * z, axis=0))
    rms[rms == 0] = 1.0

    root = cfg.seed if isinstance(cfg.seed, np.random.SeedSequence) else np.random.SeedSequence(cfg.seed)
    init_seq, pick_seq, chain_root = root.spawn(3)
    # working couplings live in rescaled units, where the floor is lam_floor
    work_min = float(lam_floor.min())
    if init_theta is None:
        theta = cfg.init.build(v, np.random.default_rng(init_seq), tickers, work_min)
    else:
        theta = init_theta.rescaled(1.0 / scale, lambda_min=work_min)
        if tickers:
            theta = theta.replace(tickers=tickers)
    theta = theta.replace(lam=np.maximum(theta.lam, lam_floor))
    pick = np.random.default_rng(pick_seq)
    seeds = chain_seeds(chain_root, cfg.chains)

    def fresh_chains(rngs):
        states = []
        for rng in rngs:
            st = init_chain(theta, z[pick.integers(n)], rng, None, cfg.sampler.proposal_width)
            states.append(st)
        return states

    rngs = [np.random.default_rng(s) for s in seeds]
    states = fresh_chains(rngs)
    thin = max(1, cfg.sampler.sweeps_between_samples)
    sweeps = cfg.samples_per_chain * thin

    def advance(k):
        st = states[k]
        if not cfg.persistent or epoch == 0:
            burn_in(theta, st, cfg.sampler)
        # widths stay frozen after burn-in: state-dependent tuning would bias the chain
        before = st.accepted.copy()
        xs = run_sweeps(theta, st, sweeps, thin=thin)
        rate = (st.accepted - before) / sweeps
        return xs, float(rate.mean())

    history = []
    avg = None
    pool = ThreadPoolExecutor(max_workers=min(cfg.threads, cfg.chains)) if cfg.threads > 1 else None
    try:
        for epoch in range(cfg.epochs):
            if not cfg.persistent and epoch > 0:
                widths = [st.widths for st in states]
                states = fresh_chains(rngs)
                for st, w in zip(states, widths):
                    st.widths = w.copy()
            results = list(pool.map(advance, range(cfg.chains))) if pool else [advance(k) for k in range(cfg.chains)]
            dp = MomentAccumulator.from_samples(np.concatenate([xs for xs, _ in results]))
            grad = kl_gradient(theta, dq, dp)
            if not grad.is_finite():
                raise DivergenceError(epoch, "non-finite gradient")
            row = {"epoch": epoch}
            row.update({f"resid_{k}": val for k, val in moment_residuals(dq, dp).items()})
            row["acceptance"] = float(np.mean([r for _, r in results]))
            history.append(row)
            try:
                theta = _apply_update(theta, grad, cfg, learning_rate_at(cfg, epoch), lam_floor)
            except ValueError as exc:
                raise DivergenceError(epoch, f"non-finite couplings ({exc})") from exc
            if _natural_size(theta, rms) > BLOWUP:
                raise DivergenceError(epoch, f"couplings exceed {BLOWUP:g} in unit-RMS units")
            if callback is not None:
                callback(epoch, theta, row)
            if cfg.average_last and epoch >= cfg.epochs - cfg.average_last:
                parts = (theta.w, theta.mu, theta.lam, theta.a)
                avg = [p.copy() for p in parts] if avg is None else [s + p for s, p in zip(avg, parts)]
    finally:
        if pool is not None:
            pool.shutdown()

    if avg is not None:
        theta = CouplingSet(*(s / cfg.average_last for s in avg), tickers=theta.tickers, lambda_min=work_min)
    return TrainResult(theta.rescaled(scale, lambda_min=LAMBDA_MIN), history, scale)


def estimate_model_moments(
    theta: CouplingSet,
    cfg: SamplerConfig,
    chains: int = 4,
    seed=0,
    initial=None,
    threads: int = 1,
) -> tuple[Moments, Moments]:
    """Long-run MCMC moments and their standard errors (batch means across chains)."""
    runs = sample_chains(theta, cfg, chains, initial, None, seed, threads)
    iu = pair_index(theta.volume)

    def stats(x):
        sq = x * x
        return np.concatenate([x, x[:, iu[0]] * x[:, iu[1]], sq, sq * sq], axis=1)

    per_chain = [stats(r) for r in runs]
    mean = np.concatenate(per_chain).mean(axis=0)
    se = chains_se(per_chain)
    return _split(mean, theta.volume), _split(se, theta.volume)


def _split(flat: np.ndarray, v: int) -> Moments:
    p = n_pairs(v)
    return Moments(flat[:v], flat[v : v + p], flat[v + p : 2 * v + p], flat[2 * v + p :])


def with_sampler(cfg: TrainConfig, **changes) -> TrainConfig:
    return replace(cfg, sampler=replace(cfg.sampler, **changes))
