"""Self-checks of the model, sampler and gradient against quadrature.

Used by ``phi4mrf validate``. Each check returns ``(name, passed, detail)``.
"""

from __future__ import annotations

import numpy as np

from .model import CouplingSet, action, action_delta, grad_action, n_pairs, pair_index
from .quadrature import QuadratureSpec, kl_divergence, quadrature_oracle
from .sampler import SamplerConfig, chains_se, sample_chains
from .trainer import data_moments, kl_gradient

Check = tuple[str, bool, str]


def random_couplings(volume: int, rng: np.random.Generator, w_scale: float = 0.4) -> CouplingSet:
    """Well-conditioned random couplings for oracle comparisons."""
    return CouplingSet(
        rng.uniform(-w_scale, w_scale, n_pairs(volume)),
        rng.uniform(-0.3, 1.0, volume),
        rng.uniform(0.2, 1.0, volume),
        rng.uniform(-0.5, 0.5, volume),
    )


def naive_action(theta: CouplingSet, phi) -> float:
    """Scalar double loop over the action's terms."""
    v = theta.volume
    s = 0.0
    wm = theta.w_matrix
    for i in range(v):
        for j in range(i + 1, v):
            s -= wm[i, j] * phi[i] * phi[j]
        s += theta.mu[i] * phi[i] ** 2 + theta.lam[i] * phi[i] ** 4 - theta.a[i] * phi[i]
    return s


def check_action(rng) -> Check:
    worst = 0.0
    for _ in range(50):
        v = int(rng.integers(1, 7))
        th = random_couplings(v, rng)
        phi = rng.normal(size=v)
        worst = max(worst, abs(action(th, phi) - naive_action(th, phi)) / (1 + abs(naive_action(th, phi))))
    return "action matches scalar re-implementation", worst < 1e-12, f"max rel err {worst:.2e}"


def check_locality(rng) -> Check:
    worst = 0.0
    for _ in range(100):
        v = int(rng.integers(1, 8))
        th = random_couplings(v, rng)
        phi = rng.normal(size=v)
        site = int(rng.integers(v))
        new = float(rng.normal())
        phi2 = phi.copy()
        phi2[site] = new
        full = action(th, phi2) - action(th, phi)
        worst = max(worst, abs(action_delta(th, phi, site, new) - full) / max(1.0, abs(full)))
    return "action_delta equals full difference", worst < 1e-12, f"max rel err {worst:.2e}"


def _perturb(theta: CouplingSet, family: str, k: int, step: float) -> CouplingSet:
    arr = getattr(theta, family).copy()
    arr[k] += step
    return theta.replace(**{family: arr})


def check_grad_action(rng) -> Check:
    worst = 0.0
    h = 1e-5
    for _ in range(100):
        v = int(rng.integers(1, 5))
        th = random_couplings(v, rng)
        phi = rng.normal(size=v)
        g = grad_action(th, phi)
        for family, analytic in zip(("w", "mu", "lam", "a"), g):
            for k in range(analytic.size):
                fd = (action(_perturb(th, family, k, h), phi) - action(_perturb(th, family, k, -h), phi)) / (2 * h)
                worst = max(worst, abs(fd - analytic[k]))
    return "grad_action matches finite differences", worst < 1e-6, f"max abs err {worst:.2e}"


def check_richardson() -> Check:
    th = CouplingSet([], [1.0], [1.0], [0.0])
    coarse = quadrature_oracle(th, QuadratureSpec(points=401)).moments.sq[0]
    fine = quadrature_oracle(th, QuadratureSpec(points=801)).moments.sq[0]
    rel = abs(coarse - fine) / fine
    return "quadrature h vs h/2 agree (V=1 <phi^2>)", rel < 1e-8, f"rel diff {rel:.2e}"


def mcmc_moments(theta: CouplingSet, cfg: SamplerConfig, chains: int, seed, threads: int = 1):
    runs = sample_chains(theta, cfg, chains, seed=seed, threads=threads)
    i, j = pair_index(theta.volume)

    def feats(x):
        sq = x * x
        return np.concatenate([x, x[:, i] * x[:, j], sq, sq * sq], axis=1)

    per_chain = [feats(r) for r in runs]
    return np.concatenate(per_chain).mean(axis=0), chains_se(per_chain)


def flat_moments(m) -> np.ndarray:
    return np.concatenate([m.phi, m.pair, m.sq, m.quart])


def check_sampler(volumes, n_sets: int, rng, cfg: SamplerConfig, chains: int = 4, z: float = 4.0, threads: int = 1) -> Check:
    worst = 0.0
    for v in volumes:
        for _ in range(n_sets):
            th = random_couplings(v, rng)
            exact = flat_moments(quadrature_oracle(th).moments)
            est, se = mcmc_moments(th, cfg, chains, int(rng.integers(2**31)), threads)
            worst = max(worst, float(np.max(np.abs(est - exact) / se)))
    return (
        f"sampler moments within {z:g} SE of quadrature (V={list(volumes)}, {n_sets} sets each)",
        worst < z,
        f"max |z| {worst:.2f}",
    )


def quadrature_kl_grad(theta: CouplingSet, data, step: float = 1e-4) -> np.ndarray:
    """Central differences of KL(q||p) computed entirely by quadrature, flattened (w, mu, lam, a)."""
    spec = QuadratureSpec(half_width=quadrature_oracle(theta).half_width, max_doublings=0)
    out = []
    for family in ("w", "mu", "lam", "a"):
        for k in range(getattr(theta, family).size):
            up = kl_divergence(_perturb(theta, family, k, step), data, spec)
            dn = kl_divergence(_perturb(theta, family, k, -step), data, spec)
            out.append((up - dn) / (2 * step))
    return np.array(out)


def check_kl_gradient(rng) -> Check:
    th = random_couplings(2, rng)
    data = rng.normal(0.2, 0.8, size=(50, 2))
    exact_model = quadrature_oracle(th).moments
    g = kl_gradient(th, data_moments(data), exact_model)
    analytic = np.concatenate(list(g))
    fd = quadrature_kl_grad(th, data)
    err = float(np.max(np.abs(analytic - fd)))
    return "kl_gradient matches quadrature finite differences (V=2)", err < 1e-5, f"max abs err {err:.2e}"


def run_checks(level: str = "quick", seed: int = 0, threads: int = 1) -> list[Check]:
    rng = np.random.default_rng(seed)
    checks = [check_action(rng), check_locality(rng), check_grad_action(rng), check_richardson(), check_kl_gradient(rng)]
    if level == "quick":
        cfg = SamplerConfig(sweeps_burn_in=500, sweeps_between_samples=2, n_samples=10000)
        checks.append(check_sampler((1, 2), 2, rng, cfg, threads=threads))
    elif level == "full":
        cfg = SamplerConfig(sweeps_burn_in=1000, sweeps_between_samples=2, n_samples=25000)
        checks.append(check_sampler((1, 2, 3), 10, rng, cfg, threads=threads))
    else:
        raise ValueError(f"unknown level {level!r}")
    return checks
