import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mjpmix.errors import DegenerateRegime
from mjpmix.likelihood import (
    ConstrainedParams,
    ParamIndex,
    WeightedStats,
    complete_loglik,
    complete_mle,
    constrained_observed_loglik,
    observed_loglik,
    pi_term,
    regime_loglik,
    regime_logliks,
    weighted_stats,
)
from mjpmix.model import IntensityMatrix, MixtureModel, StateSpace, permute_regimes
from mjpmix.paths import CohortStats, PathStats, cohort_stats
from mjpmix.simulate import SimConfig, simulate_cohort

from conftest import random_model, reference_truth

S21 = StateSpace(2, 1)


def _stats(B, N, T):
    return PathStats(np.array(B, float), np.array(N, float), np.array(T, float))


def _model(rates, phi, space=S21, pi=None):
    rates = np.asarray(rates, float)
    pi = np.full(space.num_transient, 1 / space.num_transient) if pi is None else pi
    return MixtureModel.from_arrays(space, pi, phi, rates)


def _sim(model, K=60, seed=1, horizon=5.0):
    paths, labels = simulate_cohort(model, SimConfig(count=K, seed=seed, horizon=horizon))
    return cohort_stats(paths, model.space), labels


def test_regime_loglik_single_censored_sojourn():
    m = _model([[[0, 0.6, 0.4], [0.5, 0, 0.5]]] * 2, [[0.5, 0.5], [0.5, 0.5]])
    s = _stats([1, 0], np.zeros((2, 3)), [2, 0])
    assert regime_loglik(s, m, 0) == pytest.approx(math.log(0.5) - 2)


def test_regime_loglik_one_transition():
    m = _model([[[0, 0.3, 0.2], [0.5, 0, 0.5]]], [[1.0], [1.0]])
    N = np.zeros((2, 3))
    N[0, 2] = 1
    s = _stats([1, 0], N, [4, 0])
    assert regime_loglik(s, m, 0) == pytest.approx(math.log(0.2) - 0.2 * 4 - 0.3 * 4)


def test_regime_loglik_support_violation():
    m = _model([[[0, 0.0, 0.2], [0.5, 0, 0.5]]], [[1.0], [1.0]])
    N = np.zeros((2, 3))
    N[0, 1] = 1
    assert regime_loglik(_stats([1, 0], N, [1, 1]), m, 0) == -math.inf
    cohort = CohortStats(S21, [[1, 0]], [N], [[1, 1]])
    assert regime_logliks(cohort, m)[0, 0] == -math.inf


def test_vectorized_matches_per_path(truth):
    cohort, _ = _sim(truth, K=50, horizon=30)
    L = regime_logliks(cohort, truth)
    for k, s in enumerate(cohort.per_path):
        for m in range(2):
            assert L[k, m] == pytest.approx(regime_loglik(s, truth, m), rel=1e-12)


def test_single_regime_is_markov_loglik():
    rng = np.random.default_rng(0)
    m = random_model(rng, M=1, w=3, d=1)
    cohort, _ = _sim(m, K=80)
    q = m.rates[0]
    N, T, B = cohort.N_total, cohort.T_total, cohort.B_total
    expected = (N[q > 0] * np.log(q[q > 0])).sum() - (q.sum(axis=1) * T).sum() + (B * np.log(m.pi)).sum()
    assert observed_loglik(cohort, m) == pytest.approx(expected, rel=1e-12)


def test_additivity_over_paths(truth):
    cohort, _ = _sim(truth, K=40, horizon=30)
    assert observed_loglik(cohort.concat(cohort), truth) == pytest.approx(2 * observed_loglik(cohort, truth), rel=1e-13)


def test_complete_loglik_hard_weights(truth):
    cohort, labels = _sim(truth, K=40, horizon=30)
    W = np.eye(2)[labels]
    L = regime_logliks(cohort, truth)
    assert complete_loglik(cohort, truth, W) == pytest.approx(L[np.arange(cohort.K), labels].sum(), rel=1e-12)


def test_complete_loglik_single_regime(truth):
    m = MixtureModel(truth.space, truth.pi, np.ones((3, 1)), truth.regimes[:1])
    cohort, _ = _sim(m, K=30, horizon=30)
    val = complete_loglik(cohort, m, np.ones((cohort.K, 1)))
    assert val == pytest.approx(observed_loglik(cohort, m) - pi_term(cohort, m.pi), rel=1e-12)


def test_complete_loglik_half_weights(truth):
    cohort, _ = _sim(truth, K=1, horizon=30)
    L = regime_logliks(cohort, truth)[0]
    i = cohort.initial_states[0]
    log_phi = np.log(truth.phi[i])
    q_terms = L - log_phi
    expected = 0.5 * (q_terms[0] + q_terms[1]) + 0.5 * math.log(truth.phi[i, 0] * truth.phi[i, 1])
    assert complete_loglik(cohort, truth, np.array([[0.5, 0.5]])) == pytest.approx(expected, rel=1e-12)


def test_complete_mle_examples():
    N = np.zeros((2, 1, 2))
    N[0, 0, 1] = 5
    ws = WeightedStats(B=np.array([[230.75, 136.25]]), N=N, T=np.array([[10.0], [3.0]]))
    phi, rates, flags = complete_mle(ws, np.array([367.0]))
    assert rates[0, 0, 1] == 0.5
    assert phi[0, 0] == pytest.approx(0.6287, abs=5e-5)
    assert phi.sum(axis=1).tolist() == [1.0]


def test_complete_mle_degenerate_regime():
    truth = reference_truth()
    cohort, _ = _sim(truth, K=30, horizon=30)
    W = np.column_stack([np.ones(cohort.K), np.zeros(cohort.K)])
    phi, rates, flags = complete_mle(weighted_stats(cohort, W), cohort.B_total)
    assert np.all(phi[:, 1] == 0) and np.all(rates[1] == 0)
    assert any("regime 1" in f for f in flags)
    ws = WeightedStats(B=np.array([[1.0]]), N=np.array([[[0, 2.0]]]), T=np.array([[0.0]]))
    with pytest.raises(DegenerateRegime):
        complete_mle(ws, np.array([1.0]))


def test_param_index_layout(truth):
    idx = ParamIndex.for_model(truth)
    names = idx.names()
    assert names[:3] == ["phi[1,1]", "phi[2,1]", "phi[3,1]"]
    assert names[3:9] == ["q[1,2,1]", "q[1,3,1]", "q[2,1,1]", "q[2,3,1]", "q[3,1,1]", "q[3,2,1]"]
    assert len(idx) == 15
    assert idx.values(truth)[3] == pytest.approx(0.2)


def _direct_constrained_loglik(cohort, gamma, base, phi, pi):
    """Product form: sum_k log sum_m phi * prod (gamma q)^N exp(-gamma q T) with the pi factor."""
    w = cohort.space.num_transient
    full = np.vstack([gamma, np.ones(w)])
    total = 0.0
    for k in range(cohort.K):
        i = int(np.argmax(cohort.B[k]))
        lik = 0.0
        for m in range(full.shape[0]):
            term = phi[i, m]
            for r in range(w):
                for j in range(cohort.space.size):
                    if r != j:
                        term *= (full[m, r] * base[r, j]) ** cohort.N[k, r, j]
                term *= math.exp(-full[m, r] * base[r].sum() * cohort.T[k, r])
            lik += term
        total += math.log(lik) + math.log(pi[i])
    return total


def test_constrained_loglik_matches_product_form():
    rng = np.random.default_rng(4)
    base = IntensityMatrix.from_rates(S21, [[0, 0.3, 0.2], [0.4, 0, 0.1]])
    params = ConstrainedParams(np.array([[0.5, 2.0]]), base, np.array([[0.3, 0.7], [0.6, 0.4]]))
    pi = np.array([0.4, 0.6])
    model = params.expand(pi)
    cohort, _ = _sim(model, K=30, horizon=4.0)
    direct = _direct_constrained_loglik(cohort, params.gamma, base.offdiag, params.phi, pi)
    assert constrained_observed_loglik(cohort, params, pi) == pytest.approx(direct, rel=1e-10)


def test_constrained_identity_gamma_is_single_regime():
    base = IntensityMatrix.from_rates(S21, [[0, 0.3, 0.2], [0.4, 0, 0.1]])
    pi = np.array([0.5, 0.5])
    single = MixtureModel(S21, pi, np.ones((2, 1)), (base,))
    cohort, _ = _sim(single, K=40)
    for phi in ([[0.2, 0.8], [0.9, 0.1]], [[0.5, 0.5], [0.5, 0.5]]):
        params = ConstrainedParams(np.ones((1, 2)), base, np.array(phi))
        assert constrained_observed_loglik(cohort, params, pi) == pytest.approx(observed_loglik(cohort, single), rel=1e-12)


def test_constrained_zero_gamma_is_mover_stayer():
    base = IntensityMatrix.from_rates(S21, [[0, 0.3, 0.2], [0.4, 0, 0.1]])
    params = ConstrainedParams(np.zeros((1, 2)), base, np.array([[0.3, 0.7], [0.6, 0.4]]))
    model = params.expand(np.array([0.5, 0.5]))
    cohort, _ = _sim(model, K=50)
    L = regime_logliks(cohort, model)
    moved = cohort.N.sum(axis=(1, 2)) > 0
    assert np.all(L[moved, 0] == -math.inf)
    assert np.all(np.isfinite(L[~moved, 0]))


# ---------------------------------------------------------------- properties

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 3))
def test_permutation_invariance(seed, M):
    rng = np.random.default_rng(seed)
    m = random_model(rng, M=M, w=2, d=1)
    cohort, _ = _sim(m, K=30, seed=seed)
    perm = rng.permutation(M)
    assert observed_loglik(cohort, permute_regimes(m, perm)) == pytest.approx(observed_loglik(cohort, m), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_logsumexp_agrees_with_naive_sum(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, M=3, w=2, d=1)
    cohort, _ = _sim(m, K=30, seed=seed, horizon=2.0)
    naive = np.log(np.exp(regime_logliks(cohort, m)).sum(axis=1)).sum() + pi_term(cohort, m.pi)
    assert observed_loglik(cohort, m) == pytest.approx(naive, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_complete_mle_is_maximizer(seed):
    rng = np.random.default_rng(seed)
    m = random_model(rng, M=2, w=2, d=1)
    cohort, _ = _sim(m, K=40, seed=seed)
    W = rng.dirichlet([1, 1], size=cohort.K)
    phi, rates, _ = complete_mle(weighted_stats(cohort, W), cohort.B_total)
    best = MixtureModel.from_arrays(m.space, m.pi, phi, rates)
    top = complete_loglik(cohort, best, W)
    h = 1e-4
    for mm in range(2):
        for i in range(2):
            for j in range(3):
                if i == j:
                    continue
                for sgn in (-1, 1):
                    r = rates.copy()
                    r[mm, i, j] = max(r[mm, i, j] + sgn * h, 0.0)
                    cand = MixtureModel.from_arrays(m.space, m.pi, phi, r)
                    assert complete_loglik(cohort, cand, W) <= top + 1e-12
    for i in range(2):
        for sgn in (-1, 1):
            p = phi.copy()
            p[i, 0] = min(max(p[i, 0] + sgn * h, 0.0), 1.0)
            p[i, 1] = 1.0 - p[i, 0]
            cand = MixtureModel.from_arrays(m.space, m.pi, p, rates)
            assert complete_loglik(cohort, cand, W) <= top + 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
def test_time_rescaling(seed, c):
    rng = np.random.default_rng(seed)
    m = random_model(rng, M=2, w=2, d=1)
    cohort, _ = _sim(m, K=40, seed=seed)
    W = rng.dirichlet([1, 1], size=cohort.K)
    scaled = CohortStats(cohort.space, cohort.B, cohort.N, cohort.T / c)
    _, r1, _ = complete_mle(weighted_stats(cohort, W), cohort.B_total)
    _, r2, _ = complete_mle(weighted_stats(scaled, W), scaled.B_total)
    np.testing.assert_allclose(r2, c * r1, rtol=1e-12)
    # the N log q terms shift by log(c) * sum N; the rate-times-time terms are unchanged
    m2 = MixtureModel.from_arrays(m.space, m.pi, m.phi, c * m.rates)
    shift = math.log(c) * cohort.N.sum()
    assert complete_loglik(scaled, m2, W) == pytest.approx(complete_loglik(cohort, m, W) + shift, rel=1e-10, abs=1e-8)
