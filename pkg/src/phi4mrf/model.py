"""Disordered phi^4 action on a complete graph.

The action of a configuration ``phi`` (one value per site) is

    S = - sum_{i<j} w_ij phi_i phi_j + sum_i mu_i phi_i^2
        + sum_i lam_i phi_i^4 - sum_i a_i phi_i

and the model density is ``exp(-S) / Z``. Each unordered pair carries exactly
one weight; there is no self-coupling (the quadratic term belongs to ``mu``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

LAMBDA_MIN = 1e-4
FORMAT_VERSION = 1


class DimensionError(ValueError):
    """Raised when array shapes disagree with the coupling volume."""


def n_pairs(volume: int) -> int:
    return volume * (volume - 1) // 2


@lru_cache(maxsize=64)
def pair_index(volume: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major upper-triangle indices ``(i, j)`` with ``i < j``."""
    i, j = np.triu_indices(volume, k=1)
    i.setflags(write=False)
    j.setflags(write=False)
    return i, j


def _frozen(x, ndim: int, name: str) -> np.ndarray:
    arr = np.array(x, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CouplingSet:
    """All learnable couplings of a V-site model.

    Attributes:
        w: pair weights, length ``V(V-1)/2``, row-major upper triangle.
        mu: squared-mass couplings, length V.
        lam: quartic couplings, length V, each at least ``LAMBDA_MIN``.
        a: external fields (biases), length V.
        tickers: optional site labels.
        lambda_min: floor checked on ``lam``; only internal working copies in
            rescaled units lower it.
    """

    w: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    a: np.ndarray
    tickers: tuple[str, ...] = ()
    lambda_min: float = field(default=LAMBDA_MIN, repr=False)

    def __post_init__(self):
        mu = _frozen(self.mu, 1, "mu")
        volume = mu.shape[0]
        if volume < 1:
            raise DimensionError("volume must be positive")
        lam = _frozen(self.lam, 1, "lam")
        a = _frozen(self.a, 1, "a")
        w = _frozen(self.w, 1, "w")
        if lam.shape[0] != volume or a.shape[0] != volume:
            raise DimensionError("mu, lam and a must share one length")
        if w.shape[0] != n_pairs(volume):
            raise DimensionError(
                f"w must hold {n_pairs(volume)} pair weights for V={volume}, got {w.shape[0]}"
            )
        if not self.lambda_min > 0:
            raise ValueError("lambda_min must be positive")
        if np.any(lam < self.lambda_min):
            raise ValueError(f"quartic couplings must be >= {self.lambda_min}")
        tickers = tuple(str(t) for t in self.tickers)
        if tickers and len(tickers) != volume:
            raise DimensionError("tickers must label every site")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "tickers", tickers)

    @property
    def volume(self) -> int:
        return self.mu.shape[0]

    V = volume

    @cached_property
    def w_matrix(self) -> np.ndarray:
        """Symmetric weight matrix with zero diagonal."""
        m = np.zeros((self.volume, self.volume))
        iu = pair_index(self.volume)
        m[iu] = self.w
        m = m + m.T
        m.setflags(write=False)
        return m

    @classmethod
    def from_matrix(cls, w_matrix, mu, lam, a, tickers=(), lambda_min=LAMBDA_MIN) -> "CouplingSet":
        wm = np.asarray(w_matrix, dtype=np.float64)
        if wm.ndim != 2 or wm.shape[0] != wm.shape[1]:
            raise DimensionError("weight matrix must be square")
        if not np.allclose(wm, wm.T, rtol=0, atol=0):
            raise ValueError("weight matrix must be symmetric")
        return cls(wm[pair_index(wm.shape[0])], mu, lam, a, tickers, lambda_min)

    def replace(self, **changes) -> "CouplingSet":
        fields = dict(
            w=self.w, mu=self.mu, lam=self.lam, a=self.a, tickers=self.tickers, lambda_min=self.lambda_min
        )
        fields.update(changes)
        return CouplingSet(**fields)

    def permute(self, order: Sequence[int]) -> "CouplingSet":
        """Relabel sites so that new site ``k`` is old site ``order[k]``."""
        order = np.asarray(order)
        wm = self.w_matrix[np.ix_(order, order)]
        tickers = tuple(self.tickers[k] for k in order) if self.tickers else ()
        return CouplingSet.from_matrix(
            wm, self.mu[order], self.lam[order], self.a[order], tickers, self.lambda_min
        )

    def rescaled(self, scale, lambda_min: float | None = None) -> "CouplingSet":
        """Couplings for the variable ``phi * scale`` given couplings for ``phi``.

        If ``x = phi * s`` (per site), the action in ``x`` has the same form with
        ``w_ij / (s_i s_j)``, ``mu / s^2``, ``lam / s^4`` and ``a / s``. The
        Jacobian is constant, so the two densities describe the same law.
        """
        s = np.broadcast_to(np.asarray(scale, dtype=np.float64), (self.volume,))
        if np.any(s <= 0):
            raise ValueError("scale must be positive")
        i, j = pair_index(self.volume)
        return CouplingSet(
            self.w / (s[i] * s[j]),
            self.mu / s**2,
            self.lam / s**4,
            self.a / s,
            self.tickers,
            self.lambda_min if lambda_min is None else lambda_min,
        )

    def to_dict(self, metadata: dict | None = None) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "tickers": list(self.tickers),
            "V": self.volume,
            "w": self.w.tolist(),
            "mu": self.mu.tolist(),
            "lambda": self.lam.tolist(),
            "a": self.a.tolist(),
            "training_metadata": dict(metadata or {}),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CouplingSet":
        version = doc.get("format_version")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format_version {version!r}")
        theta = cls(doc["w"], doc["mu"], doc["lambda"], doc["a"], tuple(doc.get("tickers", ())))
        if theta.volume != doc["V"]:
            raise DimensionError("checkpoint V disagrees with array lengths")
        return theta


def save_checkpoint(theta: CouplingSet, path, metadata: dict | None = None, header: str | None = None) -> None:
    """Write ``theta`` as a JSON checkpoint.

    ``header`` becomes the first key of the document. Floats are written with
    Python's shortest round-trip repr, so loading gives back bit-identical arrays.
    """
    doc = {"header": header} if header is not None else {}
    doc.update(theta.to_dict(metadata))
    text = json.dumps(doc, indent=1)
    Path(path).write_text(text + "\n")


def load_checkpoint(path) -> tuple[CouplingSet, dict]:
    doc = json.loads(Path(path).read_text())
    return CouplingSet.from_dict(doc), doc.get("training_metadata", {})


def _check_phi(theta: CouplingSet, phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape[-1:] != (theta.volume,):
        raise DimensionError(f"field has shape {phi.shape}, expected trailing dim {theta.volume}")
    if not np.all(np.isfinite(phi)):
        raise ValueError("field contains non-finite entries")
    return phi


def action(theta: CouplingSet, phi) -> float | np.ndarray:
    """Action of one configuration, or of each row of a ``(n, V)`` batch."""
    phi = _check_phi(theta, phi)
    sq = phi * phi
    pair = 0.5 * np.einsum("...i,ij,...j->...", phi, theta.w_matrix, phi)
    s = -pair + sq @ theta.mu + (sq * sq) @ theta.lam - phi @ theta.a
    return float(s) if np.ndim(s) == 0 else s


def action_delta(theta: CouplingSet, phi, site: int, new_value: float) -> float:
    """Change in action when ``phi[site]`` is replaced by ``new_value``.

    Only terms containing the site are touched, so the cost is O(V).
    """
    phi = _check_phi(theta, phi)
    if phi.ndim != 1:
        raise DimensionError("action_delta takes a single configuration")
    if not 0 <= site < theta.volume:
        raise IndexError(f"site {site} out of range for V={theta.volume}")
    if not math.isfinite(new_value):
        raise ValueError("new_value must be finite")
    old = phi[site]
    d = new_value - old
    h = float(theta.w_matrix[site] @ phi)
    o2, n2 = old * old, new_value * new_value
    return -d * h + theta.mu[site] * (n2 - o2) + theta.lam[site] * (n2 * n2 - o2 * o2) - theta.a[site] * d


class CouplingGradient(NamedTuple):
    """Per-family derivatives, laid out like ``CouplingSet``."""

    w: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    a: np.ndarray

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(g))) if g.size else 0.0 for g in self)

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self)


def grad_action(theta: CouplingSet, phi) -> CouplingGradient:
    """Derivatives of the action with respect to every coupling at ``phi``."""
    phi = _check_phi(theta, phi)
    if phi.ndim != 1:
        raise DimensionError("grad_action takes a single configuration")
    i, j = pair_index(theta.volume)
    sq = phi * phi
    return CouplingGradient(-phi[i] * phi[j], sq, sq * sq, -phi)


class Moments(NamedTuple):
    """Expectations of the action's sufficient statistics."""

    phi: np.ndarray
    pair: np.ndarray
    sq: np.ndarray
    quart: np.ndarray


@dataclass
class MomentAccumulator:
    """Running sums of phi_i, phi_i phi_j (i<j), phi_i^2 and phi_i^4."""

    volume: int
    n: int = 0
    sum_phi: np.ndarray = field(default=None)
    sum_pair: np.ndarray = field(default=None)
    sum_sq: np.ndarray = field(default=None)
    sum_quart: np.ndarray = field(default=None)

    def __post_init__(self):
        v = self.volume
        if self.sum_phi is None:
            self.sum_phi = np.zeros(v)
            self.sum_pair = np.zeros(n_pairs(v))
            self.sum_sq = np.zeros(v)
            self.sum_quart = np.zeros(v)

    @classmethod
    def from_samples(cls, samples) -> "MomentAccumulator":
        x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        acc = cls(x.shape[1])
        acc.add(x)
        return acc

    def add(self, samples) -> "MomentAccumulator":
        x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
        if x.shape[1] != self.volume:
            raise DimensionError(f"samples have {x.shape[1]} sites, accumulator has {self.volume}")
        sq = x * x
        self.n += x.shape[0]
        self.sum_phi += x.sum(axis=0)
        self.sum_pair += (x.T @ x)[pair_index(self.volume)]
        self.sum_sq += sq.sum(axis=0)
        self.sum_quart += (sq * sq).sum(axis=0)
        return self

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if other.volume != self.volume:
            raise DimensionError("cannot merge accumulators of different volume")
        self.n += other.n
        self.sum_phi += other.sum_phi
        self.sum_pair += other.sum_pair
        self.sum_sq += other.sum_sq
        self.sum_quart += other.sum_quart
        return self

    def means(self) -> Moments:
        if self.n < 1:
            raise ValueError("no samples accumulated")
        n = self.n
        return Moments(self.sum_phi / n, self.sum_pair / n, self.sum_sq / n, self.sum_quart / n)
