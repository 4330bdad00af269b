import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.signal import lfilter

from conftest import random_spd
from sandreg.covariance import (
    CovarianceStructure,
    ar1,
    arma,
    arma_autocovariance,
    build_correlation,
    cluster_matrix,
    exchangeable,
    independence,
    neutral_gamma,
    pack_params,
    random_effects,
    random_effects_cov,
    random_effects_design,
    two_piece,
    two_piece_variance,
    unpack_params,
    weight_matrix,
)
from sandreg.data import ClusterData, ClusterDataset
from sandreg.errors import StructureError
from sandreg.families import binomial, gaussian, variance_diag


# ---------------------------------------------------------------------------
# build_correlation
# ---------------------------------------------------------------------------


def test_ar1_zero_rho_is_identity():
    assert_allclose(build_correlation(ar1(), [0.0], 3), np.eye(3))


def test_ar1_half_rho():
    want = np.array([[1.0, 0.5, 0.25], [0.5, 1.0, 0.5], [0.25, 0.5, 1.0]])
    assert_allclose(build_correlation(ar1(), [0.5], 3), want, rtol=1e-15)


def test_exchangeable_half_rho():
    got = build_correlation(exchangeable(), [0.5], 3)
    assert_allclose(got - np.diag(np.diag(got)), 0.5 * (np.ones((3, 3)) - np.eye(3)))
    assert_allclose(np.diag(got), np.ones(3))


def test_exchangeable_out_of_range_names_parameter():
    with pytest.raises(StructureError) as err:
        build_correlation(exchangeable(), [-0.4], 5)
    assert err.value.parameter == "rho"


def test_free_scale_multiplies():
    got = build_correlation(ar1(scale_mode="free"), [0.3, 2.5], 4)
    assert_allclose(got, 2.5 * build_correlation(ar1(), [0.3], 4), rtol=1e-15)


@pytest.mark.parametrize(
    "structure,gamma",
    [
        (independence(), []),
        (exchangeable(max_group_size=50), [0.6]),
        (exchangeable(scale_mode="free", max_group_size=50), [-0.015, 1.7]),
        (ar1(), [0.85]),
        (ar1(scale_mode="free"), [-0.6, 0.4]),
        (arma(2, 2), [0.4, 0.5, -0.9, 0.4]),
        (arma(1, 1, scale_mode="free"), [0.7, 0.2, 3.0]),
    ],
    ids=lambda s: s.label() if hasattr(s, "label") else str(s),
)
def test_symmetry_and_positive_definiteness(structure, gamma):
    for n in (1, 2, 7, 50):
        mat = build_correlation(structure, gamma, n, validate=True)
        assert_allclose(mat, mat.T, atol=1e-14)
        np.linalg.cholesky(mat)  # must succeed


# ---------------------------------------------------------------------------
# arma_autocovariance
# ---------------------------------------------------------------------------


def test_ar1_autocovariance_closed_form():
    phi, s2 = 0.5, 1.0
    got = arma_autocovariance([phi], [], s2, max_lag=6)
    want = s2 * phi ** np.arange(7) / (1 - phi**2)
    assert_allclose(got, want, rtol=1e-10)
    assert_allclose(got[0], 4.0 / 3.0, rtol=1e-12)
    assert_allclose(got[1], 2.0 / 3.0, rtol=1e-12)


def test_ma1_autocovariance_convolution():
    got = arma_autocovariance([], [0.4], 1.0, max_lag=4)
    # direct convolution of the moving-average weights (1, 0.4)
    assert_allclose(got[0], 1.0 + 0.4**2, rtol=1e-14)
    assert_allclose(got[1], 0.4, rtol=1e-14)
    assert_allclose(got[2:], 0.0, atol=1e-14)


def test_arma22_against_long_simulation(rng):
    phi, theta = [0.4, 0.5], [-0.9, 0.4]
    got = arma_autocovariance(phi, theta, 1.0, max_lag=5)
    n = 10**6
    eps = rng.standard_normal(n + 5000)
    x = lfilter([1.0, *theta], [1.0, -phi[0], -phi[1]], eps)[5000:]
    emp = np.array([x[k:] @ x[: x.size - k] / x.size for k in range(6)])
    assert np.max(np.abs(emp / emp[0] - got / got[0])) < 2e-2
    assert abs(emp[0] - got[0]) / got[0] < 2e-2


def test_yule_walker_recursion_beyond_ma_order():
    phi, theta = [0.3, -0.2, 0.25], [0.5, -0.1]
    g = arma_autocovariance(phi, theta, 1.3, max_lag=12)
    for k in range(3, 13):  # k > q
        recursed = sum(p * g[k - j - 1] for j, p in enumerate(phi))
        assert abs(g[k] - recursed) < 1e-10


def test_nonstationary_rejected_before_solving():
    with pytest.raises(StructureError):
        arma_autocovariance([1.05], [], 1.0, max_lag=3)
    with pytest.raises(StructureError):
        arma_autocovariance([0.7, 0.5], [0.2], 1.0, max_lag=3)


# ---------------------------------------------------------------------------
# random effects and two-piece builders
# ---------------------------------------------------------------------------


def test_random_effects_intercept_only_compound_symmetry(rng):
    st = random_effects()
    cluster = ClusterData(np.zeros(4), rng.standard_normal((4, 2)))
    v, s2 = 0.7, 0.3
    got = random_effects_cov(st, [np.sqrt(v), np.sqrt(s2)], cluster)
    want = v * np.ones((4, 4)) + s2 * np.eye(4)
    assert_allclose(got, want, rtol=1e-14)


def test_random_effects_zero_variance_collapses_to_noise(rng):
    st = random_effects()
    cluster = ClusterData(np.zeros(3), rng.standard_normal((3, 1)))
    got = random_effects_cov(st, [0.0, 2.0], cluster)
    assert_allclose(got, 4.0 * np.eye(3), rtol=1e-14)


def test_random_effects_triple_product_oracle(rng):
    st = random_effects(columns=(0, 1), intercept=False)
    cluster = ClusterData(np.zeros(5), rng.standard_normal((5, 3)))
    L = np.array([[1.2, 0.0], [-0.4, 0.8]])
    sigma = 0.9
    gamma = [1.2, -0.4, 0.8, sigma]
    got = random_effects_cov(st, gamma, cluster)
    Z = cluster.x[:, :2]
    want = Z @ (L @ L.T) @ Z.T + sigma**2 * np.eye(5)
    assert_allclose(got, want, rtol=0, atol=1e-12)


def test_random_effects_design_polynomial(rng):
    st = random_effects(columns=(1,), intercept=True, poly=2)
    cluster = ClusterData(np.zeros(3), rng.standard_normal((3, 2)))
    Z = random_effects_design(st, cluster)
    assert Z.shape == (3, 3)
    assert_allclose(Z[:, 0], 1.0)
    assert_allclose(Z[:, 2], cluster.x[:, 1] ** 2)


def test_random_effects_selector_out_of_range(rng):
    st = random_effects(columns=(5,))
    cluster = ClusterData(np.zeros(3), rng.standard_normal((3, 2)))
    with pytest.raises(StructureError):
        random_effects_cov(st, [1.0, 1.0, 1.0, 1.0], cluster)


def test_two_piece_splits_on_sign():
    cluster = ClusterData(np.zeros(4), [[1.0], [-2.0], [0.0], [-0.5]])
    got = two_piece_variance(two_piece(), [2.0, 3.0], cluster)
    assert_allclose(np.diag(got), [2.0, 3.0, 2.0, 3.0])


# ---------------------------------------------------------------------------
# weight_matrix
# ---------------------------------------------------------------------------


def test_weight_independence_constant_is_identity(rng):
    cluster = ClusterData(np.zeros(3), rng.standard_normal((3, 2)))
    got = weight_matrix(cluster, gaussian(), np.zeros(2), independence(), [])
    assert_allclose(got, np.eye(3), atol=1e-14)


def test_weight_identity_link_is_inverse_correlation(rng):
    cluster = ClusterData(np.zeros(4), rng.standard_normal((4, 2)))
    P = build_correlation(ar1(), [0.6], 4)
    got = weight_matrix(cluster, gaussian(), np.zeros(2), ar1(), [0.6])
    assert_allclose(got, np.linalg.inv(P), rtol=1e-12, atol=1e-13)


def test_weight_multiply_back_binomial(rng):
    st = exchangeable(max_group_size=5)
    for _ in range(5):
        cluster = ClusterData(np.zeros(5), rng.standard_normal((5, 2)))
        beta = 0.5 * rng.standard_normal(2)
        W = weight_matrix(cluster, binomial(), beta, st, [0.3])
        v = variance_diag(cluster, binomial(), beta)
        sigma = np.sqrt(np.outer(v, v)) * build_correlation(st, [0.3], 5)
        assert_allclose(W @ sigma, np.eye(5), atol=1e-10)


def test_weight_equals_direct_inverse(rng):
    st = ar1(scale_mode="free")
    for _ in range(5):
        n = int(rng.integers(2, 7))
        cluster = ClusterData(np.zeros(n), rng.standard_normal((n, 2)))
        beta = 0.3 * rng.standard_normal(2)
        gamma = [float(rng.uniform(-0.7, 0.7)), float(rng.uniform(0.5, 2.0))]
        W = weight_matrix(cluster, binomial(), beta, st, gamma)
        v = variance_diag(cluster, binomial(), beta)
        sigma = np.sqrt(np.outer(v, v)) * build_correlation(st, gamma, n)
        assert_allclose(W, np.linalg.inv(sigma), rtol=1e-10, atol=1e-12)


def test_cluster_matrix_dispatch(rng):
    cluster = ClusterData(np.zeros(3), rng.standard_normal((3, 1)))
    assert cluster_matrix(ar1(), [0.2], cluster).shape == (3, 3)
    assert cluster_matrix(two_piece(), [1.0, 2.0], cluster).shape == (3, 3)
    with pytest.raises(StructureError):
        build_correlation(two_piece(), [1.0, 2.0], 3)


# ---------------------------------------------------------------------------
# pack / unpack
# ---------------------------------------------------------------------------


def test_ar1_zero_maps_to_zero():
    assert_allclose(pack_params(ar1(), [0.0]), [0.0], atol=1e-12)
    assert_allclose(unpack_params(ar1(), [0.0]), [0.0], atol=1e-12)


def test_unit_scale_maps_to_zero_log():
    st = independence(scale_mode="free")
    assert_allclose(pack_params(st, [1.0]), [0.0], atol=1e-15)
    assert_allclose(unpack_params(st, [0.0]), [1.0], rtol=1e-15)


PACKABLE = [
    exchangeable(max_group_size=6),
    exchangeable(scale_mode="free", max_group_size=4),
    ar1(),
    ar1(scale_mode="free"),
    arma(2, 2),
    arma(1, 2, scale_mode="free"),
    random_effects(columns=(0,), poly=2),
    two_piece(),
    independence(scale_mode="free"),
]


@pytest.mark.parametrize("structure", PACKABLE, ids=lambda s: s.label() + str(s.gamma_dim()))
def test_pack_unpack_round_trip(structure, rng):
    q = structure.gamma_dim()
    for _ in range(1000 // len(PACKABLE) + 1):
        theta = rng.uniform(-4.0, 4.0, size=q)
        back = pack_params(structure, unpack_params(structure, theta))
        assert np.max(np.abs(back - theta)) <= 1e-10


@pytest.mark.parametrize("structure", PACKABLE, ids=lambda s: s.label() + str(s.gamma_dim()))
def test_unpack_total_on_reals(structure, rng):
    q = structure.gamma_dim()
    for theta in (np.full(q, -50.0), np.full(q, 50.0), rng.uniform(-30, 30, q)):
        gamma = unpack_params(structure, theta)
        assert np.all(np.isfinite(gamma))
        pack_params(structure, gamma)  # admissible


def test_exchangeable_bounds_use_max_group_size():
    st = exchangeable(max_group_size=5)
    lo = -1.0 / 4 + 1e-6
    for theta in (-60.0, -3.0, 0.0, 3.0, 60.0):
        rho = unpack_params(st, [theta])[0]
        assert lo <= rho <= 1 - 1e-6
    assert unpack_params(st, [-60.0])[0] == pytest.approx(lo, abs=1e-12)
    with pytest.raises(StructureError):
        pack_params(exchangeable(), [0.2])  # unbound structure


def test_arma_pack_enforces_stationarity_and_invertibility():
    st = arma(2, 2)
    # admissible coefficients round trip
    gamma = np.array([0.4, 0.5, -0.9, 0.4])
    assert_allclose(unpack_params(st, pack_params(st, gamma)), gamma, atol=1e-12)
    with pytest.raises(StructureError):
        pack_params(st, [1.2, 0.3, 0.0, 0.0])  # explosive AR block
    # every theta maps to a stationary AR block
    rng = np.random.default_rng(5)
    for _ in range(50):
        gamma = unpack_params(st, rng.uniform(-6, 6, 4))
        arma_autocovariance(gamma[:2], gamma[2:], 1.0, max_lag=3)


def test_structure_bind_sets_group_size():
    ds = ClusterDataset.from_arrays([np.zeros(2), np.zeros(5)], [np.ones((2, 1)), np.ones((5, 1))])
    st = exchangeable().bind(ds)
    assert st.max_group_size == 5


def test_neutral_gamma():
    assert_allclose(neutral_gamma(ar1(scale_mode="free")), [0.0, 1.0], atol=1e-12)
    assert neutral_gamma(independence()).size == 0


def test_structure_validation():
    with pytest.raises(StructureError):
        CovarianceStructure("arma", ar_order=0, ma_order=0)
    with pytest.raises(StructureError):
        CovarianceStructure("nonsense")
    with pytest.raises(StructureError):
        CovarianceStructure("two_piece", scale_mode="free")
