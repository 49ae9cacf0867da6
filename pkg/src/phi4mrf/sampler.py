"""Single-site random-walk Metropolis for the phi^4 Boltzmann distribution.

Sites can be clamped to observed values; the chain then targets the
conditional law of the remaining (free) sites. Sites are visited in a fixed
order within each sweep.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from ._kernels import metropolis_block
from .model import CouplingSet, DimensionError

log = logging.getLogger(__name__)

# cap on random numbers drawn per kernel call (keeps memory flat for large V)
_MAX_DRAWS = 1 << 18
_ADAPT_BATCH = 50


@dataclass(frozen=True)
class SamplerConfig:
    proposal_width: float = 0.5
    sweeps_burn_in: int = 2000
    sweeps_between_samples: int = 10
    n_samples: int = 5000
    adapt_acceptance: float | None = 0.44

    def __post_init__(self):
        if not self.proposal_width > 0:
            raise ValueError("proposal_width must be positive")
        for name in ("sweeps_burn_in", "sweeps_between_samples", "n_samples"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.adapt_acceptance is not None and not 0 < self.adapt_acceptance < 1:
            raise ValueError("adapt_acceptance must lie in (0, 1)")



@dataclass
class ChainState:
    """One Markov chain. Clamped entries of ``phi`` are never written."""

    phi: np.ndarray
    rng: np.random.Generator
    clamp_mask: np.ndarray
    widths: np.ndarray
    step_count: int = 0
    accepted: np.ndarray = field(default=None)
    proposed: int = 0

    def __post_init__(self):
        self.free = np.flatnonzero(~self.clamp_mask).astype(np.int64)
        if self.accepted is None:
            self.accepted = np.zeros(self.free.size, dtype=np.int64)

    @property
    def acceptance_rate(self) -> float:
        if self.proposed == 0:
            return float("nan")
        return float(self.accepted.sum()) / (self.proposed * max(self.free.size, 1))


def _as_clamp(volume: int, clamp) -> tuple[np.ndarray, np.ndarray]:
    if clamp is None:
        return np.zeros(volume, dtype=bool), np.zeros(volume)
    mask, values = clamp
    mask = np.asarray(mask, dtype=bool)
    values = np.asarray(values, dtype=np.float64)
    if mask.shape != (volume,) or values.shape != (volume,):
        raise DimensionError(f"clamp mask and values must both have length {volume}")
    if not np.all(np.isfinite(values[mask])):
        raise ValueError("clamped values must be finite")
    return mask, values


def init_chain(
    theta: CouplingSet,
    initial=None,
    seed=0,
    clamp=None,
    proposal_width: float | np.ndarray = 0.5,
) -> ChainState:
    """Build a chain at ``initial`` (zeros by default) with clamped sites set."""
    v = theta.volume
    mask, values = _as_clamp(v, clamp)
    phi = np.zeros(v) if initial is None else np.array(initial, dtype=np.float64)
    if phi.shape != (v,):
        raise DimensionError(f"initial state must have length {v}")
    phi[mask] = values[mask]
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    widths = np.broadcast_to(np.asarray(proposal_width, dtype=np.float64), (v,))[~mask].copy()
    return ChainState(phi, rng, mask, widths)


def run_sweeps(theta: CouplingSet, state: ChainState, n_sweeps: int, thin: int = 0) -> np.ndarray | None:
    """Advance ``state`` by ``n_sweeps`` sweeps.

    With ``thin > 0`` returns the states after every ``thin``-th sweep as an
    ``(n_sweeps // thin, V)`` array.
    """
    if state.phi.shape != (theta.volume,):
        raise DimensionError("chain and couplings disagree on volume")
    n_free = state.free.size
    out = np.empty((n_sweeps // thin if thin > 0 else 0, theta.volume))
    if n_sweeps == 0:
        return out if thin > 0 else None
    if n_free == 0:
        state.step_count += n_sweeps
        if thin > 0:
            out[:] = state.phi
            return out
        return None
    wm, mu, lam, a = theta.w_matrix, theta.mu, theta.lam, theta.a
    per_call = max(1, _MAX_DRAWS // n_free)
    if thin > 0:
        per_call = max(thin, per_call - per_call % thin)
    done = 0
    row = 0
    while done < n_sweeps:
        n = min(per_call, n_sweeps - done)
        normals = state.rng.standard_normal((n, n_free))
        uniforms = state.rng.random((n, n_free))
        row += metropolis_block(
            state.phi, wm, mu, lam, a, state.free, state.widths,
            normals, uniforms, state.accepted, out[row:], thin,
        )
        done += n
    state.step_count += n_sweeps
    state.proposed += n_sweeps
    return out if thin > 0 else None


def metropolis_sweep(theta: CouplingSet, state: ChainState, cfg: SamplerConfig | None = None) -> ChainState:
    """One sequential-scan sweep over the free sites."""
    run_sweeps(theta, state, 1)
    return state


def burn_in(theta: CouplingSet, state: ChainState, cfg: SamplerConfig) -> ChainState:
    """Discard ``cfg.sweeps_burn_in`` sweeps, tuning per-site widths if requested."""
    remaining = cfg.sweeps_burn_in
    target = cfg.adapt_acceptance
    while remaining > 0:
        n = min(_ADAPT_BATCH, remaining) if target is not None else remaining
        before = state.accepted.copy()
        run_sweeps(theta, state, n)
        remaining -= n
        if target is not None and state.free.size:
            rate = (state.accepted - before) / n
            state.widths *= np.exp(2.0 * (rate - target))
            np.clip(state.widths, 1e-8, 1e8, out=state.widths)
    # acceptance statistics describe the recording phase only
    state.accepted[:] = 0
    state.proposed = 0
    return state


def sample(
    theta: CouplingSet,
    cfg: SamplerConfig,
    initial=None,
    clamp=None,
    seed=0,
) -> np.ndarray:
    """Burn in, then record ``cfg.n_samples`` states ``sweeps_between_samples`` apart.

    Returns an ``(n_samples, V)`` array; clamped columns hold the observed
    values exactly.
    """
    mask, _ = _as_clamp(theta.volume, clamp)
    if mask.all():
        raise ValueError("all sites are clamped; nothing to sample")
    state = init_chain(theta, initial, seed, clamp, cfg.proposal_width)
    burn_in(theta, state, cfg)
    thin = max(1, cfg.sweeps_between_samples)
    return run_sweeps(theta, state, cfg.n_samples * thin, thin=thin)


def chain_seeds(seed, n: int) -> list[np.random.SeedSequence]:
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return root.spawn(n)


def sample_chains(
    theta: CouplingSet,
    cfg: SamplerConfig,
    chains: int = 4,
    initial=None,
    clamp=None,
    seed=0,
    threads: int = 1,
) -> list[np.ndarray]:
    """Independent chains with spawned seeds; output order is the chain order.

    The result does not depend on ``threads``.
    """
    seeds = chain_seeds(seed, chains)

    def one(k):
        return sample(theta, cfg, initial, clamp, np.random.default_rng(seeds[k]))

    if threads > 1 and chains > 1:
        with ThreadPoolExecutor(max_workers=min(threads, chains)) as pool:
            return list(pool.map(one, range(chains)))
    return [one(k) for k in range(chains)]


def batch_means_se(x, n_batches: int = 32) -> np.ndarray:
    """Standard error of the mean of a correlated series by non-overlapping batch means."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    n_batches = min(n_batches, n)
    if n_batches < 2:
        return np.full(x.shape[1:], np.nan)
    size = n // n_batches
    batches = x[: size * n_batches].reshape((n_batches, size) + x.shape[1:]).mean(axis=1)
    return batches.std(axis=0, ddof=1) / np.sqrt(n_batches)


def chains_se(per_chain: Sequence[np.ndarray], n_batches: int = 32) -> np.ndarray:
    """SE of the pooled mean across chains, each chain contributing batch means."""
    batches = []
    for x in per_chain:
        k = min(n_batches, x.shape[0])
        size = x.shape[0] // k
        batches.append(x[: size * k].reshape((k, size) + x.shape[1:]).mean(axis=1))
    b = np.concatenate(batches)
    return b.std(axis=0, ddof=1) / np.sqrt(b.shape[0])


class ConditionalSummary(NamedTuple):
    """Posterior summary over free sites (listed in ``sites``)."""

    sites: np.ndarray
    mean: np.ndarray
    stderr: np.ndarray
    std: np.ndarray
    q05: np.ndarray
    q50: np.ndarray
    q95: np.ndarray


def conditional_mean(
    theta: CouplingSet,
    cfg: SamplerConfig,
    clamp=None,
    seed=0,
    chains: int = 1,
    initial=None,
    threads: int = 1,
) -> ConditionalSummary:
    """Posterior mean and 5/50/95% quantiles of the free sites given the clamp."""
    mask, _ = _as_clamp(theta.volume, clamp)
    runs = sample_chains(theta, cfg, chains, initial, clamp, seed, threads)
    free = np.flatnonzero(~mask)
    per_chain = [r[:, free] for r in runs]
    pooled = np.concatenate(per_chain)
    q05, q50, q95 = np.quantile(pooled, [0.05, 0.5, 0.95], axis=0)
    return ConditionalSummary(
        free,
        pooled.mean(axis=0),
        chains_se(per_chain),
        pooled.std(axis=0),
        q05,
        q50,
        q95,
    )
