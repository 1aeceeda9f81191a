"""Observed and complete log-likelihoods, complete-data MLEs and the
free-parameter layout shared by EM and the information matrix.

Conventions: ``0 * log 0 = 0``; a path with a transition of zero rate under a
regime has log-likelihood ``-inf`` there. The ``pi`` factor is kept out of the
per-regime terms and added once in :func:`observed_loglik`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .errors import DegenerateRegime
from .model import IntensityMatrix, MixtureModel, StateSpace
from .paths import CohortStats, PathStats


def _xlogy(x, y):
    """``x * log(y)`` with ``0 * log(anything) = 0`` and ``x > 0, y = 0 -> -inf``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = x * np.log(np.where(y > 0, y, 1.0))
    return np.where((x > 0) & (y <= 0), -np.inf, np.where(x == 0, 0.0, out))


def regime_logliks(cohort: CohortStats, model: MixtureModel) -> np.ndarray:
    """Matrix of per-path, per-regime log-likelihoods ``l[k, m]`` (no pi term)."""
    rates = model.rates  # (M, w, n)
    exits = rates.sum(axis=2)  # (M, w)
    K = cohort.K
    with np.errstate(divide="ignore"):
        log_rates = np.where(rates > 0, np.log(np.where(rates > 0, rates, 1.0)), 0.0)
        log_phi = np.where(model.phi > 0, np.log(np.where(model.phi > 0, model.phi, 1.0)), 0.0)
    N = cohort.N.reshape(K, -1)
    out = N @ log_rates.reshape(model.num_regimes, -1).T
    out -= cohort.T @ exits.T
    out += cohort.B @ log_phi
    impossible = N @ (rates <= 0).reshape(model.num_regimes, -1).T.astype(float) > 0
    impossible |= (cohort.B @ (model.phi <= 0).astype(float)) > 0
    out[impossible] = -np.inf
    return out


def regime_loglik(stats: PathStats, model: MixtureModel, m: int) -> float:
    """Log-likelihood of one path under regime ``m``, including log phi, excluding log pi."""
    q = model.regimes[m].offdiag
    i = int(np.argmax(stats.initial_indicator))
    val = _xlogy(1.0, model.phi[i, m]) + _xlogy(stats.transition_counts, q).sum()
    return float(val - (q.sum(axis=1) * stats.occupancy).sum())


def pi_term(cohort: CohortStats, pi) -> float:
    return float(_xlogy(cohort.B_total, pi).sum())


def observed_loglik(cohort: CohortStats, model: MixtureModel, per_regime: Optional[np.ndarray] = None) -> float:
    """Observed log-likelihood: sum over paths of log-sum-exp over regimes plus the pi term."""
    ll = regime_logliks(cohort, model) if per_regime is None else per_regime
    if cohort.K == 0:
        return 0.0
    per_path = logsumexp(ll, axis=1)
    return float(per_path.sum() + pi_term(cohort, model.pi))


@dataclass(frozen=True, eq=False)
class WeightedStats:
    """Weight aggregates: ``B`` (w, M), ``N`` (M, w, |S|), ``T`` (M, w)."""

    B: np.ndarray
    N: np.ndarray
    T: np.ndarray


def weighted_stats(cohort: CohortStats, weights: np.ndarray) -> WeightedStats:
    weights = np.asarray(weights, dtype=float)
    return WeightedStats(
        B=cohort.B.T @ weights,
        N=np.einsum("km,kij->mij", weights, cohort.N),
        T=weights.T @ cohort.T,
    )


def complete_loglik(cohort: CohortStats, model: MixtureModel, weights: np.ndarray) -> float:
    """Expected complete-data log-likelihood given regime weights (no pi term)."""
    ws = weighted_stats(cohort, weights)
    rates = model.rates
    val = _xlogy(ws.B, model.phi).sum()
    val += _xlogy(ws.N, rates).sum()
    val -= (rates.sum(axis=2) * ws.T).sum()
    return float(val)


def complete_mle(ws: WeightedStats, B: np.ndarray):
    """Closed-form maximizers ``phi = B_hat / B`` and ``q = N_hat / T_hat``.

    Returns ``(phi, rates, flags)`` with ``rates`` of shape (M, w, |S|) and
    ``flags`` listing rows set to zero for lack of occupancy and phi rows left
    uniform for states with no initial observations.
    """
    B = np.asarray(B, dtype=float)
    M, w, n = ws.N.shape
    flags = []
    phi = np.empty((w, M))
    for i in range(w):
        if B[i] > 0:
            phi[i, : M - 1] = ws.B[i, : M - 1] / B[i]
            phi[i, M - 1] = max(0.0, 1.0 - phi[i, : M - 1].sum())
        else:
            phi[i] = 1.0 / M
            flags.append(f"phi row {i}: no paths start here, left uniform")
    rates = np.zeros((M, w, n))
    for m in range(M):
        for i in range(w):
            out = ws.N[m, i].sum()
            if ws.T[m, i] > 0:
                rates[m, i] = ws.N[m, i] / ws.T[m, i]
            elif out > 0:
                raise DegenerateRegime(
                    f"regime {m}, state {i}: {out:g} weighted transitions but zero occupancy")
            else:
                flags.append(f"regime {m}, state {i}: zero weighted occupancy, rates set to 0")
    rates[:, np.arange(w), np.arange(w)] = 0.0
    return phi, rates, flags


# ---------------------------------------------------------------- parameters

@dataclass(frozen=True)
class ParamIndex:
    """Free-parameter layout: phi[i, m] for m < M-1, then q[i, j, m] per regime.

    Entries are ``("phi", i, None, m)`` or ``("q", i, j, m)`` with 0-based indices.
    """

    space: StateSpace
    num_regimes: int
    entries: tuple

    @classmethod
    def for_model(cls, model: MixtureModel) -> "ParamIndex":
        return cls.build(model.space, model.num_regimes, model.allowed())

    @classmethod
    def build(cls, space: StateSpace, M: int, allowed: Optional[np.ndarray] = None) -> "ParamIndex":
        w, n = space.num_transient, space.size
        if allowed is None:
            allowed = np.ones((w, n), dtype=bool)
            allowed[np.arange(w), np.arange(w)] = False
        entries = [("phi", i, None, m) for m in range(M - 1) for i in range(w)]
        entries += [("q", i, j, m) for m in range(M) for i in range(w) for j in range(n) if allowed[i, j]]
        return cls(space, M, tuple(entries))

    def __len__(self):
        return len(self.entries)

    @property
    def num_phi(self) -> int:
        return sum(1 for e in self.entries if e[0] == "phi")

    def name(self, k: int) -> str:
        kind, i, j, m = self.entries[k]
        lab = self.space.label
        if kind == "phi":
            return f"phi[{lab(i)},{m + 1}]"
        return f"q[{lab(i)},{lab(j)},{m + 1}]"

    def names(self) -> list:
        return [self.name(k) for k in range(len(self))]

    def values(self, model: MixtureModel) -> np.ndarray:
        rates = model.rates
        return np.array([model.phi[i, m] if kind == "phi" else rates[m, i, j]
                         for kind, i, j, m in self.entries])


def theta(model: MixtureModel) -> np.ndarray:
    """Free parameter vector used for the EM convergence norm."""
    return ParamIndex.for_model(model).values(model)


# ------------------------------------------------------- constrained mixture

@dataclass(frozen=True, eq=False)
class ConstrainedParams:
    """Constrained mixture ``Q_m = Gamma_m Q`` with ``Gamma_M = I``.

    ``gamma`` has shape (M-1, w); ``base`` is the regime-M intensity matrix.
    """

    gamma: np.ndarray
    base: IntensityMatrix
    phi: np.ndarray

    def __post_init__(self):
        g = np.array(self.gamma, dtype=float, ndmin=2)
        if np.any(g < 0):
            raise ValueError("gamma entries must be nonnegative")
        object.__setattr__(self, "gamma", g)
        object.__setattr__(self, "phi", np.asarray(self.phi, dtype=float))

    @property
    def num_regimes(self) -> int:
        return self.gamma.shape[0] + 1

    def full_gamma(self) -> np.ndarray:
        """Shape (M, w), last row ones."""
        return np.vstack([self.gamma, np.ones(self.gamma.shape[1])])

    def expand(self, pi) -> MixtureModel:
        space = self.base.space
        base = self.base.offdiag
        rates = self.full_gamma()[:, :, None] * base[None]
        return MixtureModel.from_arrays(space, pi, self.phi, rates)


def constrained_observed_loglik(cohort: CohortStats, params: ConstrainedParams, pi) -> float:
    return observed_loglik(cohort, params.expand(pi))
