"""Model selection, absorption analysis, KS normality and the Monte-Carlo study."""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.special import gammainc, gammaincc, ndtr

from .em import EmConfig, FitResult, fit, fit_constrained
from .errors import MjpmixError, NestingViolation, NotConverged, SingularSystem
from .inference import covariance_from_info, louis_info
from .likelihood import ParamIndex
from .model import IntensityMatrix, MixtureModel, permute_regimes
from .paths import CohortStats, cohort_stats
from .simulate import SimConfig, simulate_cohort


# ---------------------------------------------------------------- AIC

def num_destinations(space, structural_zeros=None) -> int:
    """Free off-diagonal intensity cells of one regime."""
    w, n = space.num_transient, space.size
    d = w * (n - 1)
    if structural_zeros is not None:
        sz = np.asarray(structural_zeros, dtype=bool).copy()
        sz[np.arange(w), np.arange(w)] = False
        d -= int(sz.sum())
    return d


def param_count(M: int, w: int, num_destinations: int) -> int:
    """``M * D + (M - 1) * w + (w - 1)``: rates, free phi and free pi."""
    if M < 1:
        raise ValueError("M must be at least 1")
    return M * num_destinations + (M - 1) * w + (w - 1)


def aic(num_params: int, loglik: float) -> float:
    return 2.0 * num_params - 2.0 * loglik


@dataclass
class AicRow:
    M: int
    loglik: float
    num_params: int
    aic: float
    converged: bool = True
    best: bool = False
    fit: Optional[FitResult] = field(default=None, repr=False)


def derive_seed(*keys) -> int:
    """64-bit seed derived from integer keys (order-independent of evaluation)."""
    a, b = np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint32)
    return (int(a) << 32) | int(b)


def aic_scan(cohort: CohortStats, M_max: int, config: EmConfig = EmConfig(), structural_zeros=None) -> list:
    if M_max < 1:
        raise ValueError("M_max must be at least 1")
    w = cohort.space.num_transient
    D = num_destinations(cohort.space, structural_zeros)
    rows = []
    for M in range(1, M_max + 1):
        cfg = replace(config, seed=derive_seed(config.seed, M))
        try:
            res, ok = fit(cohort, M, cfg), True
        except NotConverged as exc:
            res, ok = exc.result, False
        p = param_count(M, w, D)
        rows.append(AicRow(M, res.loglik, p, aic(p, res.loglik), ok, False, res))
    best = min(range(len(rows)), key=lambda k: rows[k].aic)
    rows[best].best = True
    return rows


# ---------------------------------------------------------------- LRT

def chi2_sf(x: float, df: int) -> float:
    """Upper tail of the chi-square distribution, ``Q(df/2, x/2)``."""
    if x <= 0:
        return 1.0
    return float(gammaincc(df / 2.0, x / 2.0))


def chi2_cdf(x: float, df: int) -> float:
    if x <= 0:
        return 0.0
    return float(gammainc(df / 2.0, x / 2.0))


@dataclass
class LrtResult:
    stat: float
    df: int
    p_value: float
    loglik_general: float
    loglik_constrained: float
    general: Optional[FitResult] = field(default=None, repr=False)
    constrained: Optional[FitResult] = field(default=None, repr=False)


def lrt_df(space, M: int = 2, structural_zeros=None) -> int:
    """Free parameters of the general minus the constrained mixture (pi cancels)."""
    D = num_destinations(space, structural_zeros)
    w = space.num_transient
    general = M * D + (M - 1) * w
    constrained = D + 2 * (M - 1) * w
    return general - constrained


def lrt(cohort: CohortStats, config: EmConfig = EmConfig(), M: int = 2, nesting_tol: float = 1e-6) -> LrtResult:
    """Likelihood-ratio test of ``Q_m = Gamma_m Q_M`` against unrestricted regimes.

    The general fit is the better of a default start and a start at the
    constrained solution, which makes the statistic nonnegative up to EM noise.
    """
    c = fit_constrained(cohort, M, config)
    g = fit(cohort, M, config)
    warm = fit(cohort, M, config, init_model=c.model)
    if warm.loglik > g.loglik:
        g = warm
    stat = 2.0 * (g.loglik - c.loglik)
    if stat < -nesting_tol:
        retry = fit(cohort, M, replace(config, restarts=max(5, 2 * config.restarts), tol=config.tol / 10),
                    init_model=None)
        if retry.loglik > g.loglik:
            g = retry
        stat = 2.0 * (g.loglik - c.loglik)
        if stat < -nesting_tol:
            raise NestingViolation(f"general fit loglik {g.loglik:.6f} below constrained {c.loglik:.6f}")
    df = lrt_df(cohort.space, M)
    return LrtResult(stat, df, chi2_sf(max(stat, 0.0), df), g.loglik, c.loglik, g, c)


# ---------------------------------------------------------------- absorption

@dataclass(frozen=True, eq=False)
class AbsorptionMatrix:
    """``F[i, j]``: probability that transient state i is absorbed in the j-th absorbing state."""

    F: np.ndarray
    unreachable: tuple = ()


def _reaches_absorbing(P: np.ndarray, w: int) -> np.ndarray:
    n = P.shape[1]
    reach = np.zeros(n, dtype=bool)
    reach[w:] = True
    changed = True
    while changed:
        new = reach.copy()
        new[:w] |= (P[:, reach] > 0).any(axis=1)
        changed = bool((new != reach).any())
        reach = new
    return reach[:w]


def absorption_probs(Q: IntensityMatrix) -> AbsorptionMatrix:
    """Solve ``(I - P_EE) F = P_E,Delta`` on the embedded jump chain.

    States that cannot reach an absorbing state get zero rows and are listed in
    ``unreachable``.
    """
    space = Q.space
    w, d = space.num_transient, space.num_absorbing
    if d == 0:
        raise SingularSystem("no absorbing states", list(range(w)))
    exits = Q.exit_rates
    P = np.zeros((w, space.size))
    pos = exits > 0
    P[pos] = Q.offdiag[pos] / exits[pos, None]
    reach = _reaches_absorbing(P, w)
    F = np.zeros((w, d))
    R = np.flatnonzero(reach)
    if R.size:
        A = np.eye(R.size) - P[np.ix_(R, R)]
        try:
            F[R] = np.linalg.solve(A, P[R, w:])
        except np.linalg.LinAlgError:
            raise SingularSystem("absorption system is singular", [space.label(i) for i in R]) from None
    return AbsorptionMatrix(F, tuple(int(i) for i in np.flatnonzero(~reach)))


@dataclass
class AbsorptionFrequencies:
    counts: np.ndarray  # (M, |Delta|) expected absorptions per regime and destination
    initial_uncensored: np.ndarray  # (M, w) the C_{m,U} vectors
    F: list

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=0)


def absorption_frequencies(model: MixtureModel, cohort: CohortStats) -> AbsorptionFrequencies:
    """Expected absorptions per regime: ``((B - censored_by_initial) D_m) F_m``."""
    B = cohort.B_total
    cens = cohort.B[cohort.censored].sum(axis=0) if cohort.K else np.zeros_like(B)
    C = (B - cens)[None, :] * model.phi.T
    Fs = [absorption_probs(q).F for q in model.regimes]
    counts = np.stack([C[m] @ Fs[m] for m in range(model.num_regimes)])
    return AbsorptionFrequencies(counts, C, Fs)


# ---------------------------------------------------------------- KS

def kolmogorov_sf(t: float, terms: int = 100) -> float:
    """``P(sup|B| > t)`` for the Brownian bridge.

    Uses the alternating series for moderate and large t and the dual theta
    series for small t, where the alternating series converges too slowly.
    """
    if t <= 0:
        return 1.0
    if t < 0.3:
        s = sum(math.exp(-((2 * j - 1) ** 2) * math.pi ** 2 / (8 * t * t)) for j in range(1, terms + 1))
        return max(0.0, min(1.0, 1.0 - math.sqrt(2 * math.pi) / t * s))
    s = sum((-1) ** (j - 1) * math.exp(-2 * j * j * t * t) for j in range(1, terms + 1))
    return max(0.0, min(1.0, 2.0 * s))


def ks_normality(samples: Sequence[float]):
    """One-sample KS statistic against N(0, 1) and its asymptotic p-value."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if n == 0:
        raise ValueError("need at least one sample")
    cdf = ndtr(x)
    i = np.arange(1, n + 1)
    D = float(max(np.max(i / n - cdf), np.max(cdf - (i - 1) / n)))
    return D, kolmogorov_sf(math.sqrt(n) * D)


# ---------------------------------------------------------------- MC study

def match_regimes(fitted: MixtureModel, truth: MixtureModel) -> tuple:
    """Permutation of fitted regimes minimizing total absolute error in phi and q."""
    best, best_err = None, np.inf
    for perm in itertools.permutations(range(truth.num_regimes)):
        p = list(perm)
        err = np.abs(fitted.phi[:, p] - truth.phi).sum() + np.abs(fitted.rates[p] - truth.rates).sum()
        if err < best_err:
            best, best_err = tuple(perm), err
    return best


def relabel_fit(res: FitResult, perm) -> FitResult:
    perm = list(perm)
    return replace(res, model=permute_regimes(res.model, perm), weights=res.weights[:, perm])


def _replicate(args):
    truth, K, r, seed, horizon, config, with_se, phi_form = args
    rseed = derive_seed(seed, K, r)
    sim = SimConfig(count=K, seed=rseed, horizon=None if math.isinf(horizon) else horizon,
                    until_absorption=math.isinf(horizon))
    index = ParamIndex.for_model(truth)
    out = {"K": K, "r": r, "seed": rseed, "ok": False}
    try:
        paths, _ = simulate_cohort(truth, sim)
        cohort = cohort_stats(paths, truth.space)
        res = fit(cohort, truth.num_regimes, replace(config, seed=rseed))
        res = relabel_fit(res, match_regimes(res.model, truth))
        out["estimate"] = index.values(res.model)
        out["iterations"] = res.iterations
        se = np.full(len(index), np.nan)
        if with_se:
            rep = covariance_from_info(louis_info(cohort, res, phi_form=phi_form))
            pos = {name: a for a, name in enumerate(index.names())}
            for name, s in zip(rep.names, rep.se):
                se[pos[name]] = s
        out["se"] = se
        out["ok"] = True
    except (MjpmixError, np.linalg.LinAlgError, ValueError) as exc:
        out["error"] = f"{exc.__class__.__name__}: {exc}"
    return out


@dataclass
class McStudyReport:
    names: list
    truth: np.ndarray
    Ks: list
    replications: int
    seed: int
    per_K: dict
    estimates: dict = field(repr=False, default_factory=dict)
    fisher_se: dict = field(repr=False, default_factory=dict)
    failures: dict = field(default_factory=dict)

    def valid(self, K) -> bool:
        return len(self.failures.get(K, [])) <= 0.05 * self.replications


def summarize(estimates: np.ndarray, truth: np.ndarray, fisher_se: Optional[np.ndarray] = None) -> dict:
    err = estimates - truth
    bias = err.mean(axis=0)
    rmse = np.sqrt((err ** 2).mean(axis=0))
    mc_se = np.sqrt(np.maximum(rmse ** 2 - bias ** 2, 0.0))
    ks = []
    for a in range(err.shape[1]):
        if mc_se[a] > 0:
            ks.append(ks_normality(err[:, a] / mc_se[a])[1])
        else:
            ks.append(float("nan"))
    out = {"bias": bias, "rmse": rmse, "mean": estimates.mean(axis=0), "mc_se": mc_se, "ks_p": np.array(ks)}
    if fisher_se is not None:
        with np.errstate(invalid="ignore"):
            out["fisher_se"] = np.nanmean(fisher_se, axis=0) if np.any(np.isfinite(fisher_se)) \
                else np.full(err.shape[1], np.nan)
    return out


def mc_study(truth: MixtureModel, Ks: Sequence[int], N: int, config: EmConfig = EmConfig(), seed: int = 0,
             horizon: float = 30.0, with_se: bool = True, workers: int = 1, phi_form: str = "lagrangian") -> McStudyReport:
    """Replicate simulate -> fit -> (Louis SE) ``N`` times per ``K``."""
    if N < 2:
        raise ValueError("need at least two replications")
    index = ParamIndex.for_model(truth)
    theta0 = index.values(truth)
    tasks = [(truth, K, r, seed, horizon, config, with_se, phi_form) for K in Ks for r in range(N)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate, tasks))
    else:
        results = [_replicate(t) for t in tasks]
    report = McStudyReport(index.names(), theta0, list(Ks), N, seed, {})
    for K in Ks:
        rows = [r for r in results if r["K"] == K]
        good = [r for r in rows if r["ok"]]
        report.failures[K] = [(r["r"], r["error"]) for r in rows if not r["ok"]]
        if not good:
            continue
        est = np.stack([r["estimate"] for r in good])
        se = np.stack([r["se"] for r in good])
        report.estimates[K] = est
        report.fisher_se[K] = se
        report.per_K[K] = summarize(est, theta0, se if with_se else None)
    return report


# ---------------------------------------------------------------- text tables

def format_table(headers: Sequence[str], rows: Sequence[Sequence], floatfmt: str = ".5f") -> str:
    cells = [[format(c, floatfmt) if isinstance(c, float) else str(c) for c in row] for row in rows]
    widths = [max(len(h), *(len(r[k]) for r in cells)) if cells else len(h) for k, h in enumerate(headers)]
    line = "  ".join(h.rjust(wd) for h, wd in zip(headers, widths))
    body = ["  ".join(c.rjust(wd) for c, wd in zip(r, widths)) for r in cells]
    return "\n".join([line, "-" * len(line)] + body)


def format_mc_report(report: McStudyReport) -> str:
    parts = []
    for K in report.Ks:
        s = report.per_K.get(K)
        if s is None:
            parts.append(f"K = {K}: no successful replications")
            continue
        rows = []
        for a, name in enumerate(report.names):
            fse = s.get("fisher_se", np.full(len(report.names), np.nan))[a]
            rows.append([name, float(report.truth[a]), float(s["bias"][a] * 100), float(s["rmse"][a] * 100),
                         float(s["mean"][a]), float(s["mc_se"][a] * 100), float(fse * 100), float(s["ks_p"][a])])
        parts.append(f"K = {K}, N = {report.replications - len(report.failures[K])} (bias, RMSE and SE x 1e-2)")
        parts.append(format_table(["parameter", "true", "bias", "RMSE", "mean", "MC SE", "Fisher SE", "KS p"],
                                  rows, ".4f"))
    return "\n\n".join(parts)


def format_aic(rows: Sequence[AicRow]) -> str:
    return format_table(["M", "loglik", "params", "AIC", "converged", "best"],
                        [[r.M, float(r.loglik), r.num_params, float(r.aic), r.converged, "*" if r.best else ""]
                         for r in rows], ".3f")
