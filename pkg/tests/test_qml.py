import numpy as np
import pytest
from numpy.testing import assert_allclose

from conftest import random_dataset, random_spd
from sandreg.covariance import ar1, exchangeable, independence, weight_matrix
from sandreg.data import ClusterDataset
from sandreg.errors import ConvergenceError
from sandreg.families import binomial, gaussian
from sandreg.qml import (
    estimating_equation,
    fisher_scoring,
    solve_wls,
    solve_wls_weighted,
)
from sandreg.simulate import gen_binomial_copula


def naive_score(dataset, family, structure, gamma, beta):
    """Independent re-implementation: per-cluster dense products."""
    from sandreg.families import mean_jacobian, mean_vector

    total = np.zeros(dataset.p)
    for cluster in dataset.clusters:
        D = mean_jacobian(cluster, family, beta)
        W = weight_matrix(cluster, family, beta, structure, gamma)
        R = cluster.y - mean_vector(cluster, family, beta)
        total += D.T @ W @ R
    return total


# ---------------------------------------------------------------------------
# estimating_equation
# ---------------------------------------------------------------------------


def test_score_is_zero_at_wls_solution(rng):
    ds = random_dataset(rng, I=15, p=2)
    st = exchangeable(max_group_size=ds.max_group_size)
    sol = solve_wls(ds, st, [0.4])
    score = estimating_equation(ds, gaussian(), st, [0.4], sol.beta)
    scale = 1.0 + float(np.max(np.abs(sol.beta)))
    assert np.max(np.abs(score)) <= 1e-10 * scale


def test_score_reduces_to_ols_score(rng):
    ds = random_dataset(rng, I=8, p=3)
    beta = rng.standard_normal(3)
    got = estimating_equation(ds, gaussian(), independence(), [], beta)
    X = np.vstack([c.x for c in ds.clusters])
    Y = np.concatenate([c.y for c in ds.clusters])
    assert_allclose(got, X.T @ (Y - X @ beta), rtol=1e-13)


def test_score_matches_naive_reimplementation(rng):
    ds = random_dataset(rng, I=12, p=2)
    st = ar1(scale_mode="free")
    gamma = [0.45, 1.7]
    beta = rng.standard_normal(2)
    got = estimating_equation(ds, gaussian(), st, gamma, beta)
    want = naive_score(ds, gaussian(), st, gamma, beta)
    assert_allclose(got, want, rtol=1e-12, atol=1e-12)

    dsb = gen_binomial_copula("equicorr", 10, rng)
    stb = exchangeable(max_group_size=20)
    beta = np.array([0.3])
    got = estimating_equation(dsb, binomial(), stb, [0.25], beta)
    want = naive_score(dsb, binomial(), stb, [0.25], beta)
    assert_allclose(got, want, rtol=1e-12, atol=1e-12)


# ---------------------------------------------------------------------------
# solve_wls
# ---------------------------------------------------------------------------


def test_single_cluster_identity_weights_is_ols(rng):
    x = rng.standard_normal((10, 3))
    y = x @ np.array([1.0, -2.0, 0.5]) + rng.standard_normal(10)
    ds = ClusterDataset.from_arrays([y], [x])
    sol = solve_wls(ds, independence(), [])
    want, *_ = np.linalg.lstsq(x, y, rcond=None)
    assert_allclose(sol.beta, want, rtol=1e-12)
    assert sol.converged and sol.iterations <= 2


def test_scalar_weighted_least_squares(rng):
    # p = 1, n_i = 1: beta = sum w x y / sum w x^2
    x = rng.standard_normal(12)
    y = 2.0 * x + rng.standard_normal(12)
    w = rng.uniform(0.5, 2.0, size=12)
    ds = ClusterDataset.from_arrays([[yi] for yi in y], [[[xi]] for xi in x])
    sol = solve_wls_weighted(ds, [np.array([[wi]]) for wi in w])
    assert_allclose(sol.beta, [np.sum(w * x * y) / np.sum(w * x * x)], rtol=1e-12)


def test_wls_matches_fisher_scoring_from_random_start(rng):
    ds = random_dataset(rng, I=20, p=2)
    st = exchangeable(max_group_size=ds.max_group_size)
    a = solve_wls(ds, st, [0.3])
    b = fisher_scoring(ds, gaussian(), st, [0.3], beta_init=rng.standard_normal(2) * 3)
    assert_allclose(a.beta, b.beta, rtol=1e-8)


def test_wls_reports_condition_number(rng):
    ds = random_dataset(rng, I=10, p=2)
    sol = solve_wls(ds, independence(), [])
    assert sol.cond >= 1.0


def test_solve_wls_weighted_matches_normal_equations(rng):
    ds = random_dataset(rng, I=9, p=3)
    weights = [random_spd(rng, c.n) for c in ds.clusters]
    sol = solve_wls_weighted(ds, weights)
    M = np.zeros((3, 3))
    b = np.zeros(3)
    for c, W in zip(ds.clusters, weights):
        M += c.x.T @ W @ c.x
        b += c.x.T @ W @ c.y
    assert_allclose(sol.beta, np.linalg.solve(M, b), rtol=1e-11)


# ---------------------------------------------------------------------------
# fisher_scoring
# ---------------------------------------------------------------------------


def test_gaussian_one_update_reproduces_wls(rng):
    ds = random_dataset(rng, I=10, p=2)
    st = ar1()
    direct = solve_wls(ds, st, [0.5])
    scored = fisher_scoring(ds, gaussian(), st, [0.5])
    assert_allclose(scored.beta, direct.beta, rtol=1e-14)
    assert scored.iterations <= 2


def textbook_irls(X, y, max_iter=50):
    """Plain logistic IRLS, the classical normal-equation form."""
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        eta = X @ beta
        mu = 1 / (1 + np.exp(-eta))
        w = mu * (1 - mu)
        z = eta + (y - mu) / w
        beta_new = np.linalg.solve(X.T @ (w[:, None] * X), X.T @ (w * z))
        if np.max(np.abs(beta_new - beta)) < 1e-12:
            return beta_new
        beta = beta_new
    return beta


def test_binomial_independence_matches_textbook_irls(rng):
    ds = gen_binomial_copula("equicorr", 40, rng)
    sol = fisher_scoring(ds, binomial(), independence(), [])
    X = np.vstack([c.x for c in ds.clusters])
    y = np.concatenate([c.y for c in ds.clusters])
    assert_allclose(sol.beta, textbook_irls(X, y), rtol=1e-8)
    assert sol.score_norm <= 1e-8 * (1 + np.max(np.abs(sol.beta)))


def test_binomial_exchangeable_self_consistency(rng):
    ds = gen_binomial_copula("equicorr", 60, rng)
    st = exchangeable(max_group_size=20)
    sol = fisher_scoring(ds, binomial(), st, [0.4])
    score = estimating_equation(ds, binomial(), st, [0.4], sol.beta)
    assert np.max(np.abs(score)) <= 1e-8 * (1 + np.max(np.abs(sol.beta)))
    for _ in range(5):
        start = sol.beta + 0.5 * rng.standard_normal(1)
        again = fisher_scoring(ds, binomial(), st, [0.4], beta_init=start)
        assert_allclose(again.beta, sol.beta, atol=1e-6)


def test_weighted_residual_orthogonality_everywhere(rng):
    for structure, gamma in [(independence(), []), (ar1(), [0.3]), (exchangeable(max_group_size=6), [0.2])]:
        ds = random_dataset(rng, I=14, p=2)
        sol = fisher_scoring(ds, gaussian(), structure, gamma)
        assert np.max(np.abs(sol.score_pieces().sum(axis=0))) <= 1e-8 * (
            1 + np.max(np.abs(sol.beta))
        )


def test_beta_invariant_to_weight_rescaling(rng):
    ds = random_dataset(rng, I=12, p=2)
    st = exchangeable(scale_mode="free", max_group_size=ds.max_group_size)
    a = fisher_scoring(ds, gaussian(), st, [0.35, 1.0])
    b = fisher_scoring(ds, gaussian(), st, [0.35, 7.3])
    assert_allclose(a.beta, b.beta, rtol=1e-10)


def test_independence_reduces_to_pooled_fit(rng):
    ds = random_dataset(rng, I=10, p=2)
    pooled = np.linalg.lstsq(
        np.vstack([c.x for c in ds.clusters]),
        np.concatenate([c.y for c in ds.clusters]),
        rcond=None,
    )[0]
    sol = fisher_scoring(ds, gaussian(), independence(), [])
    assert_allclose(sol.beta, pooled, rtol=1e-10)


def test_separation_flag(rng):
    # perfectly separated logistic data drives |X beta| past the threshold
    x = np.concatenate([rng.uniform(1.0, 2.0, 25), rng.uniform(-2.0, -1.0, 25)])
    y = (x > 0).astype(float)
    ds = ClusterDataset.from_arrays([[yi] for yi in y], [[[xi]] for xi in x])
    try:
        sol = fisher_scoring(ds, binomial(), independence(), [], max_iter=200)
        assert sol.separation_flag
    except ConvergenceError:
        pass  # also acceptable: the MLE diverges


def test_nonconvergence_carries_last_iterate(rng):
    ds = gen_binomial_copula("equicorr", 30, rng)
    with pytest.raises(ConvergenceError) as err:
        fisher_scoring(ds, binomial(), independence(), [], beta_init=np.array([25.0]), max_iter=1)
    assert err.value.last_beta is not None
    assert err.value.score_norm > 0


def test_cluster_parts_consistency(rng):
    ds = random_dataset(rng, I=6, p=2)
    st = ar1()
    sol = fisher_scoring(ds, gaussian(), st, [0.4])
    D, W, Winv, R, s = sol.cluster_parts(3)
    assert_allclose(W @ Winv, np.eye(ds.clusters[3].n), atol=1e-10)
    assert_allclose(s, D.T @ W @ R, rtol=1e-12)
    want_W = weight_matrix(ds.clusters[3], gaussian(), sol.beta, st, [0.4])
    assert_allclose(W, want_W, rtol=1e-11, atol=1e-13)
