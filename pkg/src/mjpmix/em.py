"""EM estimation for general and constrained mixtures of Markov jump processes."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .errors import AllRegimesImpossible, DegenerateRegime, InnerNotConverged, NotConverged
from .likelihood import (
    ConstrainedParams,
    complete_loglik,
    complete_mle,
    observed_loglik,
    regime_logliks,
    theta,
    weighted_stats,
)
from .model import IntensityMatrix, MixtureModel, canonical_permutation, permute_regimes
from .paths import CohortStats

PosteriorWeights = np.ndarray


@dataclass(frozen=True)
class EmConfig:
    tol: float = 1e-4
    max_iter: int = 10000
    seed: int = 0
    rate_floor: float = 1e-10
    restarts: int = 1
    inner_tol: float = 1e-10
    max_inner: int = 200
    constrained_method: str = "closed_form"

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iter < 1 or self.restarts < 1:
            raise ValueError("max_iter and restarts must be at least 1")
        if self.rate_floor < 0:
            raise ValueError("rate floor must be nonnegative")
        if self.constrained_method not in ("closed_form", "fixed_point"):
            raise ValueError(f"unknown constrained method {self.constrained_method!r}")


@dataclass
class FitResult:
    """Outcome of an EM run.

    ``weights`` are the E-step weights from which ``model`` was computed by the
    M-step, so the fixed-point identities hold exactly for the pair.
    """

    model: MixtureModel
    weights: PosteriorWeights
    loglik_trace: list
    iterations: int
    converged: bool
    config: EmConfig
    loglik: float
    constrained: Optional[ConstrainedParams] = None
    permutation: tuple = ()
    flags: list = field(default_factory=list)
    restart: int = 0
    last_step: float = np.inf


# ---------------------------------------------------------------- E and M steps

def e_step(cohort: CohortStats, model: MixtureModel, per_regime: Optional[np.ndarray] = None) -> PosteriorWeights:
    ll = regime_logliks(cohort, model) if per_regime is None else per_regime
    norm = logsumexp(ll, axis=1, keepdims=True) if cohort.K else np.zeros((0, 1))
    bad = np.flatnonzero(~np.isfinite(norm[:, 0]))
    if bad.size:
        ids = [cohort.ids[k] for k in bad]
        raise AllRegimesImpossible(f"paths {ids[:10]} are impossible under every regime", ids)
    w = np.exp(ll - norm)
    return w / w.sum(axis=1, keepdims=True)


def _small_rate_flags(rates, floor):
    M, w, _ = rates.shape
    return [f"regime {m}, q[{i},{j}] = {rates[m, i, j]:.3g} below floor {floor:g}"
            for m, i, j in np.argwhere((rates > 0) & (rates < floor))]


def m_step(cohort: CohortStats, weights: PosteriorWeights, pi=None, structural_zeros=None):
    """General M-step. Returns ``(model, flags)``."""
    ws = weighted_stats(cohort, weights)
    phi, rates, flags = complete_mle(ws, cohort.B_total)
    pi = pi_hat(cohort) if pi is None else pi
    return MixtureModel.from_arrays(cohort.space, pi, phi, rates, structural_zeros), flags


def pi_hat(cohort: CohortStats) -> np.ndarray:
    return cohort.B_total / cohort.K


def _regime_ratio(n_i, T_i, M, i):
    """Per-state closed form of the constrained M-step.

    ``n_i[m]`` are weighted exits and ``T_i[m]`` weighted occupancies of state i.
    Returns ``(gamma (M,), base exit rate s, flags)``; the last regime is the base.
    """
    flags = []
    gamma = np.ones(M)
    if n_i.sum() == 0:
        for m in range(M - 1):
            flags.append(f"gamma[{m},{i}]: no exits from state {i}, set to 1")
        return gamma, 0.0, flags
    if T_i[M - 1] > 0:
        if n_i[M - 1] == 0:
            raise DegenerateRegime(f"state {i}: the base regime never exits but others do; gamma unbounded")
        s = n_i[M - 1] / T_i[M - 1]
    else:
        mask = T_i[: M - 1] > 0
        s = n_i[: M - 1][mask].sum() / T_i[: M - 1][mask].sum()
        flags.append(f"state {i}: base regime has no occupancy, base rate taken from the other regimes")
    for m in range(M - 1):
        if T_i[m] > 0:
            gamma[m] = (n_i[m] / T_i[m]) / s
        else:
            flags.append(f"gamma[{m},{i}]: no occupancy in regime {m}, set to 1")
    return gamma, s, flags


def m_step_constrained(cohort: CohortStats, weights: PosteriorWeights, pi=None,
                       method: str = "closed_form", tol: float = 1e-10, max_inner: int = 200,
                       start: Optional[ConstrainedParams] = None):
    """M-step under ``Q_m = Gamma_m Q``. Returns ``(model, params, info)``.

    ``method="closed_form"`` solves the stationarity equations per state
    directly; ``"fixed_point"`` alternates the gamma and q updates and records the
    complete log-likelihood after each sweep in ``info["inner_trace"]``.
    """
    ws = weighted_stats(cohort, weights)
    space = cohort.space
    M, w, n = ws.N.shape
    if M < 2:
        raise ValueError("a constrained mixture needs at least two regimes")
    pi = pi_hat(cohort) if pi is None else pi
    phi, _, flags = complete_mle(ws, cohort.B_total)
    exits = ws.N.sum(axis=2)  # (M, w)
    pooled = ws.N.sum(axis=0)  # (w, n)
    gamma = np.ones((M, w))
    base = np.zeros((w, n))
    info = {"flags": flags}
    if method == "closed_form":
        for i in range(w):
            g, s, f = _regime_ratio(exits[:, i], ws.T[:, i], M, i)
            flags.extend(f)
            gamma[:, i] = g
            denom = (g * ws.T[:, i]).sum()
            if denom > 0:
                base[i] = pooled[i] / denom
    else:
        if start is not None:
            gamma[: M - 1] = start.gamma
            base = start.base.offdiag.copy()
        else:
            base = _pooled_rates(pooled, ws.T.sum(axis=0))
        base[np.arange(w), np.arange(w)] = 0.0
        trace = []
        for it in range(max_inner):
            s = base.sum(axis=1)
            new_gamma = gamma.copy()
            for m in range(M - 1):
                with np.errstate(divide="ignore", invalid="ignore"):
                    upd = exits[m] / (s * ws.T[m])
                new_gamma[m] = np.where(np.isfinite(upd), upd, 1.0)
            denom = (new_gamma * ws.T).sum(axis=0)
            with np.errstate(divide="ignore", invalid="ignore"):
                new_base = np.where(denom[:, None] > 0, pooled / denom[:, None], 0.0)
            change = max(np.max(np.abs(new_gamma - gamma)), np.max(np.abs(new_base - base)))
            gamma, base = new_gamma, new_base
            model = ConstrainedParams(gamma[: M - 1], IntensityMatrix.from_rates(space, base), phi).expand(pi)
            trace.append(complete_loglik(cohort, model, weights))
            if change < tol:
                break
        else:
            last = ConstrainedParams(gamma[: M - 1], IntensityMatrix.from_rates(space, base), phi)
            raise InnerNotConverged(f"constrained M-step did not converge in {max_inner} sweeps", last)
        info["inner_trace"] = trace
        info["inner_iterations"] = it + 1
    params = ConstrainedParams(gamma[: M - 1], IntensityMatrix.from_rates(space, base), phi)
    return params.expand(pi), params, info


def _pooled_rates(N, T):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(T[:, None] > 0, N / T[:, None], 0.0)


# ---------------------------------------------------------------- initialization

def _split_order(cohort: CohortStats, key: str) -> np.ndarray:
    """Seeded shuffle keyed on path ids, so the split ignores input order."""
    digests = [hashlib.blake2b(f"{key}:{pid}".encode(), digest_size=16).digest() for pid in cohort.ids]
    return np.array(sorted(range(cohort.K), key=lambda k: (digests[k], k)), dtype=int)


def init_split(cohort: CohortStats, M: int, seed, restart: int = 0) -> list:
    """Index arrays of the M initialization subsets: M-1 of size floor(K/M), then the rest."""
    key = f"{seed}" if restart == 0 else f"{seed}/{restart}"
    order = _split_order(cohort, key)
    size = cohort.K // M
    return [order[m * size:(m + 1) * size] for m in range(M - 1)] + [order[(M - 1) * size:]]


def init_weights(cohort: CohortStats, M: int, seed, restart: int = 0) -> np.ndarray:
    """Hard 0/1 weights of the initialization split."""
    w = np.zeros((cohort.K, M))
    for m, idx in enumerate(init_split(cohort, M, seed, restart)):
        w[idx, m] = 1.0
    return w


def init_params(cohort: CohortStats, M: int, seed=0, restart: int = 0) -> MixtureModel:
    """Starting model: phi = 1/M and per-subset Markov MLEs.

    Rows with no occupancy in a subset fall back to the pooled MLE.
    """
    if cohort.K < M:
        raise ValueError(f"need at least M={M} paths, got {cohort.K}")
    space = cohort.space
    w = space.num_transient
    pooled = _pooled_rates(cohort.N_total, cohort.T_total)
    rates = np.empty((M,) + pooled.shape)
    for m, idx in enumerate(init_split(cohort, M, seed, restart)):
        N = cohort.N[idx].sum(axis=0)
        T = cohort.T[idx].sum(axis=0)
        rates[m] = np.where(T[:, None] > 0, _pooled_rates(N, T), pooled)
    rates[:, np.arange(w), np.arange(w)] = 0.0
    phi = np.full((w, M), 1.0 / M)
    return MixtureModel.from_arrays(space, pi_hat(cohort), phi, rates)


# ---------------------------------------------------------------- drivers

def _constrained_theta(params: ConstrainedParams) -> np.ndarray:
    return np.concatenate([params.phi[:, :-1].ravel(order="F"), params.gamma.ravel(), params.base.offdiag.ravel()])


def _run(cohort, M, config, restart, init_model, constrained):
    pi = pi_hat(cohort)
    flags = []
    params = None
    if init_model is not None:
        model = init_model.replace(pi=pi)
    elif constrained:
        model, params, info = m_step_constrained(
            cohort, init_weights(cohort, M, config.seed, restart), pi, config.constrained_method,
            config.inner_tol, config.max_inner)
    else:
        model = init_params(cohort, M, config.seed, restart)
    cur = _constrained_theta(params) if params is not None else theta(model)
    per_regime = regime_logliks(cohort, model)
    trace = [observed_loglik(cohort, model, per_regime)]
    converged, step = False, np.inf
    it = 0
    weights = None
    for it in range(1, config.max_iter + 1):
        weights = e_step(cohort, model, per_regime)
        if constrained:
            model, params, info = m_step_constrained(
                cohort, weights, pi, config.constrained_method, config.inner_tol, config.max_inner, params)
            new = _constrained_theta(params)
            step_flags = info["flags"]
        else:
            model, step_flags = m_step(cohort, weights, pi, None)
            new = theta(model)
        step = float(np.linalg.norm(new - cur)) if cur.shape == new.shape else np.inf
        cur = new
        per_regime = regime_logliks(cohort, model)
        trace.append(observed_loglik(cohort, model, per_regime))
        if step < config.tol:
            converged = True
            flags.extend(step_flags)
            break
    flags.extend(_small_rate_flags(model.rates, config.rate_floor))
    perm = tuple(range(M))
    if not constrained:
        model, perm = _canonical(model)
        weights = weights[:, list(perm)]
    return FitResult(model=model, weights=weights, loglik_trace=trace, iterations=it, converged=converged,
                     config=config, loglik=trace[-1], constrained=params, permutation=perm, flags=flags,
                     restart=restart, last_step=step)


def _canonical(model):
    perm = canonical_permutation(model.phi)
    return permute_regimes(model, perm), perm


def _fit(cohort, M, config, init_model, constrained):
    if cohort.K < M:
        raise ValueError(f"need at least M={M} paths, got {cohort.K}")
    runs = []
    n_starts = 1 if init_model is not None else config.restarts
    for r in range(n_starts):
        runs.append(_run(cohort, M, config, r, init_model, constrained))
    done = [r for r in runs if r.converged]
    best = max(done or runs, key=lambda r: r.loglik)
    if not done:
        raise NotConverged(f"EM did not converge in {config.max_iter} iterations "
                           f"(last step {best.last_step:.3g})", best)
    return best


def fit(cohort: CohortStats, M: int, config: EmConfig = EmConfig(),
        init_model: Optional[MixtureModel] = None) -> FitResult:
    """Fit a general M-regime mixture; returns the best converged restart, canonicalized."""
    return _fit(cohort, M, config, init_model, constrained=False)


def fit_constrained(cohort: CohortStats, M: int = 2, config: EmConfig = EmConfig(),
                    init_model: Optional[MixtureModel] = None) -> FitResult:
    """Fit the constrained mixture ``Q_m = Gamma_m Q`` (regime order kept: the last is the base)."""
    if M < 2:
        raise ValueError("a constrained mixture needs at least two regimes")
    return _fit(cohort, M, config, init_model, constrained=True)
