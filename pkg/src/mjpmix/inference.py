"""Observed information (Louis), covariance of the MLEs, asymptotic covariance
and the matrix-exponential kernels behind them."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .em import FitResult
from .errors import MatexpOverflow, NonAbsorbingModel, NotAtMLE, SingularInformation
from .likelihood import ParamIndex, weighted_stats
from .model import IntensityMatrix, MixtureModel
from .paths import CohortStats

EXCLUDE_BELOW = 1e-8
MLE_RESIDUAL_TOL = 1e-6
COND_WARN = 1e12


def _entries(Q) -> np.ndarray:
    return Q.entries if isinstance(Q, IntensityMatrix) else np.asarray(Q, dtype=float)


def matexp(Q, t: float = 1.0) -> np.ndarray:
    """``exp(Q t)`` by scaling and squaring with Pade approximants."""
    A = _entries(Q) * float(t)
    if not np.all(np.isfinite(A)):
        raise MatexpOverflow("matrix exponential argument has non-finite entries")
    with np.errstate(over="raise", invalid="raise"):
        try:
            out = scipy.linalg.expm(A)
        except FloatingPointError as exc:
            raise MatexpOverflow(f"matrix exponential overflowed: {exc}") from None
    if not np.all(np.isfinite(out)):
        raise MatexpOverflow("matrix exponential overflowed")
    return out


def _transient_block_inverse(Q: np.ndarray, w: int) -> np.ndarray:
    QE = Q[:w, :w]
    eig = np.linalg.eigvals(QE)
    if np.any(eig.real >= 0):
        raise NonAbsorbingModel("transient block has an eigenvalue with nonnegative real part; "
                                "absorption is not certain")
    return -np.linalg.solve(QE, np.eye(w))


def matexp_integral(Q, T: float, num_transient: Optional[int] = None) -> np.ndarray:
    """``int_0^T exp(Q u) du``.

    Finite ``T`` returns the full matrix, from the top-right block of the
    exponential of ``[[Q, I], [0, 0]] T``. ``T = inf`` returns only the
    transient block ``-Q_EE^{-1}`` (absorbing columns diverge).
    """
    A = _entries(Q)
    n = A.shape[0]
    if math.isinf(T):
        w = num_transient if num_transient is not None else (
            Q.space.num_transient if isinstance(Q, IntensityMatrix) else n)
        return _transient_block_inverse(A, w)
    if T < 0:
        raise ValueError("integration horizon must be nonnegative")
    aug = np.zeros((2 * n, 2 * n))
    aug[:n, :n] = A
    aug[:n, n:] = np.eye(n)
    return matexp(aug, T)[:n, n:]


def expected_occupancy(model: MixtureModel, n: int, i: int, horizon: float) -> float:
    """``pi^T D_n (int_0^T exp(Q_n u) du) e_i``: expected regime-n time in state i per path."""
    w = model.space.num_transient
    v = model.pi * model.phi[:, n]
    integral = matexp_integral(model.regimes[n], horizon, w)
    return float(v @ integral[:w, i])


# ---------------------------------------------------------------- information

@dataclass(frozen=True, eq=False)
class InfoMatrix:
    """Observed information over the kept free parameters.

    ``index`` is the full free-parameter layout; ``kept`` are positions in it
    that survive exclusion, and ``matrix`` is indexed by ``kept``.
    """

    matrix: np.ndarray
    index: ParamIndex
    kept: tuple
    excluded: tuple
    estimates: np.ndarray

    @property
    def names(self) -> list:
        return [self.index.name(k) for k in self.kept]

    @property
    def num_phi(self) -> int:
        return sum(1 for k in self.kept if self.index.entries[k][0] == "phi")


def mle_residuals(cohort: CohortStats, fit: FitResult) -> dict:
    """Fixed-point residuals of ``(fit.model, fit.weights)``: phi, q and A-hat."""
    model, weights = fit.model, fit.weights
    ws = weighted_stats(cohort, weights)
    B = cohort.B_total
    rates = model.rates
    with np.errstate(divide="ignore", invalid="ignore"):
        phi_res = np.where(B[:, None] > 0, model.phi - ws.B / np.where(B > 0, B, 1.0)[:, None], 0.0)
        q_res = np.where(ws.T[:, :, None] > 0, rates - ws.N / ws.T[:, :, None], 0.0)
    a_hat = ws.N - rates * ws.T[:, :, None]
    w = model.space.num_transient
    a_hat[:, np.arange(w), np.arange(w)] = 0.0
    return {"phi": phi_res, "q": q_res, "A": a_hat}


def louis_info(cohort: CohortStats, fit: FitResult, exclude_below: float = EXCLUDE_BELOW,
               phi_form: str = "lagrangian", check_mle: bool = True) -> InfoMatrix:
    """Observed information by Louis' formula, per path
    ``E[-H_k | X_k] - Cov(S_k | X_k)`` summed over paths.

    ``phi_form="lagrangian"`` gives each phi_{i,m} (m < M) the score
    ``B_i Phi_m / phi_{i,m}`` (the Lagrangian form, whose blocks are the
    closed-form elements used in the literature); ``"exact"`` uses the score of
    the free parametrization ``B_i (Phi_m / phi_{i,m} - Phi_M / phi_{i,M})``,
    which is the Hessian of the observed log-likelihood.
    """
    if phi_form not in ("lagrangian", "exact"):
        raise ValueError(f"unknown phi_form {phi_form!r}")
    model, W = fit.model, np.asarray(fit.weights, dtype=float)
    if check_mle:
        res = mle_residuals(cohort, fit)
        worst = max(float(np.max(np.abs(res["A"]), initial=0.0)), float(np.max(np.abs(res["phi"]), initial=0.0)))
        if worst > MLE_RESIDUAL_TOL:
            raise NotAtMLE(f"fixed-point residual {worst:.3g} exceeds {MLE_RESIDUAL_TOL:g}")
    index = ParamIndex.for_model(model)
    est = index.values(model)
    M = model.num_regimes
    K = cohort.K
    rates = model.rates
    phi = model.phi

    kept = [k for k in range(len(index)) if abs(est[k]) >= exclude_below]
    excluded = [k for k in range(len(index)) if abs(est[k]) < exclude_below]
    P = len(kept)
    # coefficient tensor: score_k = sum_m Phi_{k,m} C[k, m, :]
    C = np.zeros((K, M, P))
    Hdiag = np.zeros((K, M, P))  # E-part: complete -H is diagonal except phi-phi under "exact"
    extra_phi = []  # (a, b, per-path coefficient of Phi_M) for exact phi-phi couplings
    for a, k in enumerate(kept):
        kind, i, j, m = index.entries[k]
        if kind == "phi":
            b = cohort.B[:, i]
            C[:, m, a] = b / phi[i, m]
            Hdiag[:, m, a] = b / phi[i, m] ** 2
            if phi_form == "exact":
                C[:, M - 1, a] = -b / phi[i, M - 1]
                extra_phi.append((a, i))
        else:
            q = rates[m, i, j]
            A = cohort.N[:, i, j] - q * cohort.T[:, i]
            C[:, m, a] = A / q
            Hdiag[:, m, a] = cohort.N[:, i, j] / q ** 2
    expected_h = np.diag(np.einsum("km,kma->a", W, Hdiag))
    if phi_form == "exact":
        # d2/dphi_{i,m} dphi_{i,n} of Phi_M log(1 - sum phi) contributes to every pair sharing i
        for a, i in extra_phi:
            for b, i2 in extra_phi:
                if i == i2:
                    expected_h[a, b] += float(W[:, M - 1] @ cohort.B[:, i]) / phi[i, M - 1] ** 2
    # per-path conditional covariance of the categorical regime indicator
    mean = np.einsum("km,kma->ka", W, C)
    second = np.einsum("km,kma,kmb->ab", W, C, C)
    cov = second - mean.T @ mean
    info = expected_h - cov
    info = 0.5 * (info + info.T)
    # drop parameters that carry no information (e.g. phi rows of unobserved states)
    nz = [a for a in range(P) if info[a, a] != 0.0 or np.any(info[a] != 0.0)]
    if len(nz) < P:
        excluded = sorted(excluded + [kept[a] for a in range(P) if a not in nz])
        kept = [kept[a] for a in nz]
        info = info[np.ix_(nz, nz)]
    return InfoMatrix(info, index, tuple(kept), tuple(excluded), est)


@dataclass
class CovarianceReport:
    names: list
    estimates: np.ndarray
    cov: np.ndarray
    se: np.ndarray
    excluded: list
    condition_number: float
    num_phi: int
    flags: list = field(default_factory=list)

    @property
    def var_phi(self):
        return self.cov[: self.num_phi, : self.num_phi]

    @property
    def var_q(self):
        return self.cov[self.num_phi:, self.num_phi:]

    @property
    def cov_phi_q(self):
        return self.cov[: self.num_phi, self.num_phi:]

    def se_by_name(self) -> dict:
        out = {n: float(s) for n, s in zip(self.names, self.se)}
        out.update({n: None for n in self.excluded})
        return out


def _solve(A, B):
    return scipy.linalg.solve(A, B, assume_a="sym")


def _singular_params(I, names):
    vals, vecs = np.linalg.eigh(I)
    v = vecs[:, np.argmin(np.abs(vals))]
    return [names[a] for a in np.flatnonzero(np.abs(v) > 0.1 * np.abs(v).max())]


def covariance_from_info(info: InfoMatrix) -> CovarianceReport:
    """Invert the information by the block (Schur complement) formulas, with a
    full-matrix inverse computed independently as a consistency check."""
    I = info.matrix
    names = info.names
    P = I.shape[0]
    p = info.num_phi
    flags = []
    if P == 0:
        return CovarianceReport(names, np.zeros(0), np.zeros((0, 0)), np.zeros(0),
                                [info.index.name(k) for k in info.excluded], 1.0, 0)
    cond = float(np.linalg.cond(I))
    if not np.isfinite(cond) or cond > 1.0 / np.finfo(float).eps:
        raise SingularInformation(f"information matrix is singular (condition number {cond:.3g})",
                                  _singular_params(I, names))
    if cond > COND_WARN:
        msg = f"information matrix is ill-conditioned (condition number {cond:.3g})"
        warnings.warn(msg, RuntimeWarning)
        flags.append(msg)
    try:
        Ipp, Ipq, Iqq = I[:p, :p], I[:p, p:], I[p:, p:]
        if p == 0:
            cov = _solve(Iqq, np.eye(P))
        elif p == P:
            cov = _solve(Ipp, np.eye(P))
        else:
            Ipp_inv_Ipq = _solve(Ipp, Ipq)
            schur = Iqq - Ipq.T @ Ipp_inv_Ipq
            var_q = _solve(schur, np.eye(P - p))
            cov_pq = -Ipp_inv_Ipq @ var_q
            var_p = _solve(Ipp, np.eye(p)) + cov_pq @ np.linalg.solve(var_q, cov_pq.T)
            cov = np.block([[var_p, cov_pq], [cov_pq.T, var_q]])
        full = _solve(I, np.eye(P))
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
        raise SingularInformation("information matrix could not be inverted",
                                  _singular_params(I, names)) from None
    scale = np.max(np.abs(full))
    if np.max(np.abs(cov - full)) > 1e-8 * scale * max(1.0, cond / 1e6):
        flags.append("blockwise and full inverses disagree beyond 1e-8 relative")
    cov = 0.5 * (cov + cov.T)
    d = np.diag(cov)
    neg = [names[a] for a in np.flatnonzero(d < 0)]
    if neg:
        flags.append(f"negative variance for {neg}")
    se = np.sqrt(np.where(d >= 0, d, np.nan))
    est = info.estimates[list(info.kept)]
    return CovarianceReport(names, est, cov, se, [info.index.name(k) for k in info.excluded],
                            cond, p, flags)


# ---------------------------------------------------------------- asymptotics

@dataclass(frozen=True, eq=False)
class AsymptoticCov:
    """Limit covariance of ``sqrt(K) (theta_hat - theta)`` over all phi[i, m]
    (every regime) followed by the allowed q[i, j, m]."""

    names: list
    entries: tuple
    matrix: np.ndarray
    horizon: float

    def index_of(self, name: str) -> int:
        return self.names.index(name)


def asymptotic_cov(model: MixtureModel, horizon: float) -> AsymptoticCov:
    space = model.space
    w, M = space.num_transient, model.num_regimes
    allowed = model.allowed()
    lab = space.label
    entries = [("phi", i, None, m) for m in range(M) for i in range(w)]
    entries += [("q", i, j, m) for m in range(M) for i in range(w) for j in range(space.size) if allowed[i, j]]
    names = [f"phi[{lab(i)},{m + 1}]" if kind == "phi" else f"q[{lab(i)},{lab(j)},{m + 1}]"
             for kind, i, j, m in entries]
    P = len(entries)
    S = np.zeros((P, P))
    occ = {}
    for a, (ka, ia, ja, ma) in enumerate(entries):
        for b, (kb, ib, jb, mb) in enumerate(entries):
            if ka == "phi" and kb == "phi":
                if ia == ib:
                    with np.errstate(divide="ignore"):
                        S[a, b] = model.phi[ia, mb] * ((ma == mb) - model.phi[ia, ma]) / model.pi[ia]
            elif ka == "q" and kb == "q" and a == b:
                key = (ma, ia)
                if key not in occ:
                    occ[key] = expected_occupancy(model, ma, ia, horizon)
                rate = model.regimes[ma].entries[ia, ja]
                with np.errstate(divide="ignore", invalid="ignore"):
                    S[a, b] = rate / occ[key]
    return AsymptoticCov(names, tuple(entries), S, horizon)
