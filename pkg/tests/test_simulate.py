import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.integrate import quad

from sandreg.covariance import exchangeable, independence
from sandreg.errors import DataError, SandregError
from sandreg.objectives import DispersionObjective, OptimizerSettings
from sandreg.simulate import (
    DgpSpec,
    MethodSpec,
    arma22_latent_correlation,
    gen_binomial_copula,
    gen_linear_multilevel,
    gen_longitudinal_intro,
    intro_correlation,
    paired_difference,
    replication_rng,
    run_mse_experiment,
    sample_mvn,
    std_normal_cdf,
)

# the serially dependent binomial DGP prints this correlation profile; it is
# reproduced by the *induced binary* correlations at every lag except lag 1,
# where the measured correlation is ~0.005 (see the matching MC test below)
PRINTED_RHO = np.array(
    [1.00, -0.07, 0.41, 0.12, 0.25, 0.16, 0.19, 0.16, 0.16, 0.14,
     0.14, 0.13, 0.12, 0.12, 0.11, 0.11, 0.10, 0.10, 0.09, 0.09]
)


# ---------------------------------------------------------------------------
# randomness primitives
# ---------------------------------------------------------------------------


def test_replication_rng_deterministic_and_distinct():
    a = replication_rng(7, 3).standard_normal(4)
    b = replication_rng(7, 3).standard_normal(4)
    c = replication_rng(7, 4).standard_normal(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_std_normal_cdf_values():
    assert std_normal_cdf(0.0) == 0.5
    # oracle: quadrature of the density
    want = 0.5 + quad(lambda t: np.exp(-t * t / 2) / np.sqrt(2 * np.pi), 0, 1.959964)[0]
    assert abs(std_normal_cdf(1.959964) - want) < 1e-12
    assert abs(std_normal_cdf(1.959964) - 0.975) < 1e-6


def test_sample_mvn_matches_target_covariance():
    rng = replication_rng(1, 0)
    cov = np.array([[2.0, 0.6, -0.3], [0.6, 1.0, 0.2], [-0.3, 0.2, 0.5]])
    draws = sample_mvn(np.array([1.0, -1.0, 0.0]), cov, rng, size=10**6)
    assert np.max(np.abs(draws.mean(axis=0) - [1.0, -1.0, 0.0])) < 1e-2
    assert np.max(np.abs(np.cov(draws.T) - cov)) < 1e-2


def test_sample_mvn_psd_fallback_and_rejection():
    rng = replication_rng(1, 1)
    psd = np.ones((3, 3))  # rank one, Cholesky fails, eigen path succeeds
    draws = sample_mvn(np.zeros(3), psd, rng, size=2000)
    spread = draws - draws[:, [0]]
    assert np.max(np.abs(spread)) < 1e-10
    with pytest.raises(DataError):
        sample_mvn(np.zeros(2), np.array([[1.0, 2.0], [2.0, 1.0]]), rng)


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------


def test_linear_multilevel_lam0_exact_moments():
    rng = replication_rng(2, 0)
    ds = gen_linear_multilevel(0.0, 100_000, rng)
    resid = np.stack([c.y - c.x[:, 0] for c in ds.clusters])
    emp = resid.T @ resid / resid.shape[0]
    assert np.max(np.abs(np.diag(emp) - 1.0)) < 0.02
    off = emp - np.diag(np.diag(emp))
    assert np.max(np.abs(off[off != 0] - 0.5)) < 0.02


def test_linear_multilevel_lam3_variance_profile():
    # pooled residual variance matches E[(1 + 3 exp(-2 X^2))^2] by quadrature
    rng = replication_rng(2, 1)
    ds = gen_linear_multilevel(3.0, 100_000, rng)
    resid = np.concatenate([c.y - c.x[:, 0] for c in ds.clusters])
    want = quad(
        lambda x: (1 + 3 * np.exp(-2 * x * x)) ** 2
        * np.exp(-x * x / 2) / np.sqrt(2 * np.pi),
        -9,
        9,
    )[0]
    assert abs(np.var(resid) / want - 1.0) < 0.03
    # spot value of the heteroscedastic profile at x = 0
    assert (1 + 3 * np.exp(0.0)) ** 2 == 16.0


def test_binomial_copula_marginals_are_logistic():
    rng = replication_rng(3, 0)
    ds = gen_binomial_copula("equicorr", 50_000, rng)
    X = np.concatenate([c.x[:, 0] for c in ds.clusters])
    Y = np.concatenate([c.y for c in ds.clusters])
    for lo, hi in [(-2.0, -1.0), (-0.5, 0.5), (1.0, 2.0)]:
        sel = (X >= lo) & (X < hi)
        want = np.mean(1 / (1 + np.exp(-X[sel])))
        assert abs(Y[sel].mean() - want) < 0.01


def test_binomial_equicorr_binary_correlation():
    rng = replication_rng(3, 1)
    ds = gen_binomial_copula("equicorr", 100_000, rng)
    Y = np.stack([c.y for c in ds.clusters])
    r = np.corrcoef(Y[:, 0], Y[:, 1])[0, 1]
    assert abs(r - 0.4) < 0.03


def test_binomial_arma22_latent_correlation_matches_engine():
    rng = replication_rng(3, 2)
    C = arma22_latent_correlation()
    # the engine-built Toeplitz against a long simulated ARMA(2,2) series
    from scipy.signal import lfilter

    eps = rng.standard_normal(10**6 + 5000)
    z = lfilter([1.0, -0.9, 0.4], [1.0, -0.4, -0.5], eps)[5000:]
    emp = np.array([z[k:] @ z[: z.size - k] / z.size for k in range(6)])
    assert np.max(np.abs(emp / emp[0] - C[0, :6])) < 2e-2


def test_binomial_arma22_binary_correlations_loose_profile():
    rng = replication_rng(3, 3)
    ds = gen_binomial_copula("arma22", 150_000, rng)
    Y = np.stack([c.y for c in ds.clusters])
    got = np.array(
        [1.0]
        + [np.corrcoef(Y[:, :-k].ravel(), Y[:, k:].ravel())[0, 1] for k in range(1, 20)]
    )
    # the printed profile tracks the binary correlations to 0.05 at lags >= 2;
    # at lag 1 the induced correlation is near zero rather than -0.07
    assert np.max(np.abs(got[2:] - PRINTED_RHO[2:])) < 0.05
    assert abs(got[1]) < 0.05


def test_longitudinal_intro_correlation_profile():
    omega = intro_correlation()
    assert_allclose(np.diag(omega), np.ones(50))
    want_lag1 = np.exp(-0.5) + 0.25 * np.cos(1.0) * np.exp(-0.05)
    assert abs(want_lag1 - 0.7350) < 1e-4
    assert_allclose(omega[0, 1], want_lag1, rtol=1e-12)
    off = omega[~np.eye(50, dtype=bool)]
    assert off.min() >= 0.24 and off.max() <= 0.74
    np.linalg.cholesky(omega)  # positive definite


def test_longitudinal_intro_generator_shapes():
    ds = gen_longitudinal_intro(5, replication_rng(4, 0))
    assert ds.n_clusters == 5 and ds.group_sizes == (50,) * 5 and ds.p == 1


def test_dgp_spec_validation():
    with pytest.raises(SandregError):
        DgpSpec("nonsense", I=10)
    with pytest.raises(SandregError):
        DgpSpec("linear_multilevel", I=0)


# ---------------------------------------------------------------------------
# the experiment runner
# ---------------------------------------------------------------------------


def test_unweighted_only_gives_unit_ratios():
    report = run_mse_experiment(
        DgpSpec("linear_multilevel", I=20),
        [MethodSpec("unweighted", DispersionObjective("none"), independence())],
        replications=5,
        root_seed=10,
    )
    for row in report.rows:
        assert row.mse_ratio == 1.0 and row.mc_se_ratio == 0.0


def _two_methods():
    return [
        MethodSpec(
            "eqml", DispersionObjective("eqml"), exchangeable(scale_mode="free")
        ),
        MethodSpec(
            "sandwich",
            DispersionObjective("sandwich", target=np.ones(1)),
            exchangeable(scale_mode="free"),
        ),
    ]


def test_report_reproducible_across_worker_counts():
    spec = DgpSpec("linear_multilevel", I=30, lam=0.0)
    a = run_mse_experiment(spec, _two_methods(), replications=6, root_seed=5, workers=1)
    b = run_mse_experiment(spec, _two_methods(), replications=6, root_seed=5, workers=2)
    key = (spec.label(), spec.I)
    for lab in ("eqml", "sandwich", "unweighted"):
        assert np.array_equal(a.squared_errors[key][lab], b.squared_errors[key][lab])
    assert a.digests == b.digests
    assert a.to_table() == b.to_table()


def test_multiple_cluster_counts_kept_apart():
    dgps = [DgpSpec("linear_multilevel", I=10, lam=0.0), DgpSpec("linear_multilevel", I=20, lam=0.0)]
    report = run_mse_experiment(dgps, _two_methods(), replications=3, root_seed=8)
    sizes = sorted({r.I for r in report.rows})
    assert sizes == [10, 20]
    assert report.row("linear_multilevel(lam=0)", "eqml", I=10).I == 10
    assert report.row("linear_multilevel(lam=0)", "eqml", I=20).I == 20


def test_paired_design_and_table_format():
    spec = DgpSpec("linear_multilevel", I=25, lam=0.0)
    report = run_mse_experiment(spec, _two_methods(), replications=4, root_seed=6)
    assert len(report.digests[(spec.label(), spec.I)]) == 4
    table = report.to_table()
    assert table.startswith("dgp\tmethod\tI\treps\tmse_ratio\tmc_se")
    assert len(table.strip().split("\n")) == 1 + 3
    mean, se = paired_difference(report, spec.label(), 25, "sandwich", "eqml")
    assert np.isfinite(mean) and np.isfinite(se)


def test_weighting_helps_when_well_specified():
    spec = DgpSpec("linear_multilevel", I=200, lam=0.0)
    report = run_mse_experiment(
        spec,
        [MethodSpec("eqml", DispersionObjective("eqml"), exchangeable(scale_mode="free"))],
        replications=40,
        root_seed=7,
        workers=2,
    )
    row = report.row(spec.label(), "eqml")
    assert row.mse_ratio + 2 * row.mc_se_ratio < 1.0


def test_failure_rate_guard():
    with pytest.raises(SandregError):
        run_mse_experiment(
            DgpSpec("linear_multilevel", I=20), _two_methods(), replications=1, root_seed=1
        )
