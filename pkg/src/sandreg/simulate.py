"""Seeded data generators and a paired Monte-Carlo experiment runner.

Reproducibility discipline: every replication draws from its own generator,
derived as ``SeedSequence(root_seed, spawn_key=(replication,))``.  Streams
are therefore independent of scheduling, and the same root seed yields
bit-identical reports whatever the worker count.

Generators
----------
``gen_linear_multilevel(lam, I, rng)``
    Clusters of 4 Gaussian observations, single covariate ~ N(0, I_4),
    conditional covariance ``rho(j,k) sigma(x_j) sigma(x_k)`` with
    ``sigma(x) = 1 + lam exp(-2 x^2)`` and off-diagonal rho = 0.5.
    ``lam = 0`` is exactly the intercept-only random-effects model
    (variance 1, covariance 0.5); ``lam > 0`` makes any such working model
    heteroscedasticity-misspecified.
``gen_binomial_copula(latent, I, rng)``
    Clusters of 20 Bernoulli responses with logistic marginal means and
    within-cluster dependence induced by a Gaussian copula whose latent
    correlation is either equicorrelated (0.6 shared + 0.4 idiosyncratic)
    or the autocorrelation of an ARMA(2,2) with AR (0.4, 0.5) and
    MA (-0.9, 0.4).
``gen_longitudinal_intro(I, rng)``
    Clusters of 50 Gaussian observations with a slowly decaying,
    oscillating correlation (unit variances; off-diagonals
    ``exp(-|j-k|^{1/4}/2) + cos(|j-k|) exp(-|j-k|/20)/4``).

All generators use beta = 1 on a single covariate.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import covariance as cov
from .data import ClusterDataset
from .errors import ConvergenceError, DataError, SandregError
from .families import binomial, gaussian
from .objectives import OptimizerSettings, minimize_dispersion

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Randomness and low-level sampling
# ---------------------------------------------------------------------------


def replication_rng(root_seed, replication):
    """Independent generator for one replication of a seeded experiment."""
    return np.random.default_rng(
        np.random.SeedSequence(root_seed, spawn_key=(int(replication),))
    )


def std_normal_cdf(x):
    """Standard normal CDF (complementary-error-function based)."""
    return ndtr(x)


def sample_mvn(mean, covariance, rng, size=None):
    """Multivariate normal draws via a Cholesky factor.

    Falls back to an eigenvalue factorization for positive *semi*definite
    covariances (tiny negative eigenvalues are clipped); genuinely
    indefinite inputs are rejected.
    """
    mean = np.asarray(mean, dtype=float)
    covariance = np.asarray(covariance, dtype=float)
    n = mean.size
    try:
        L = np.linalg.cholesky(covariance)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(covariance)
        if w.min() < -1e-8 * max(w.max(), 1.0):
            raise DataError(f"covariance is not PSD (min eigenvalue {w.min():.3e})")
        L = V * np.sqrt(np.clip(w, 0.0, None))
    shape = (n,) if size is None else (size, n)
    z = rng.standard_normal(shape)
    return mean + z @ L.T


# ---------------------------------------------------------------------------
# Data generating processes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DgpSpec:
    """A generator choice plus its parameters and cluster count."""

    kind: str  # linear_multilevel | binomial_equicorr | binomial_arma22 | longitudinal_intro
    I: int
    lam: float = 0.0
    beta_true: float = 1.0

    def __post_init__(self):
        kinds = ("linear_multilevel", "binomial_equicorr", "binomial_arma22", "longitudinal_intro")
        if self.kind not in kinds:
            raise SandregError(f"unknown DGP kind {self.kind!r}")
        if self.I < 1:
            raise SandregError("cluster count must be at least 1")
        if self.lam < 0:
            raise SandregError("lam must be nonnegative")

    def label(self):
        if self.kind == "linear_multilevel":
            return f"linear_multilevel(lam={self.lam:g})"
        return self.kind


def gen_linear_multilevel(lam, I, rng, beta=1.0):
    if lam < 0:
        raise SandregError("lam must be nonnegative")
    n = 4
    rho = np.full((n, n), 0.5)
    np.fill_diagonal(rho, 1.0)
    X = rng.standard_normal((I, n))
    sig = 1.0 + lam * np.exp(-2.0 * X**2)
    covs = rho[None, :, :] * sig[:, :, None] * sig[:, None, :]
    L = np.linalg.cholesky(covs)
    Y = beta * X + np.einsum("ijk,ik->ij", L, rng.standard_normal((I, n)))
    return ClusterDataset.from_arrays(Y, X[:, :, None])


_EQUICORR_LATENT = 0.6 * np.ones((20, 20)) + 0.4 * np.eye(20)
_X_COV_BINOM = 0.5 * np.ones((20, 20)) + 0.5 * np.eye(20)


def arma22_latent_correlation(n=20):
    """Latent Toeplitz correlation for the serially dependent binomial DGP."""
    acov = cov.arma_autocovariance([0.4, 0.5], [-0.9, 0.4], 1.0, max_lag=n - 1)
    acf = acov / acov[0]
    return acf[np.abs(np.subtract.outer(np.arange(n), np.arange(n)))]


def gen_binomial_copula(latent, I, rng, beta=1.0):
    if latent == "equicorr":
        C = _EQUICORR_LATENT
    elif latent == "arma22":
        C = arma22_latent_correlation()
    else:
        raise SandregError(f"unknown latent correlation {latent!r}")
    n = 20
    Lc = np.linalg.cholesky(C)
    Lx = np.linalg.cholesky(_X_COV_BINOM)
    X = rng.standard_normal((I, n)) @ Lx.T
    Z = rng.standard_normal((I, n)) @ Lc.T
    U = ndtr(Z)
    prob = 1.0 / (1.0 + np.exp(-beta * X))
    Y = (U >= 1.0 - prob).astype(float)
    return ClusterDataset.from_arrays(Y, X[:, :, None])


def intro_correlation(n=50):
    lag = np.abs(np.subtract.outer(np.arange(n), np.arange(n))).astype(float)
    omega = np.exp(-0.5 * lag**0.25) + 0.25 * np.cos(lag) * np.exp(-lag / 20.0)
    np.fill_diagonal(omega, 1.0)
    return omega


_INTRO_CHOL = None


def gen_longitudinal_intro(I, rng, beta=1.0):
    global _INTRO_CHOL
    n = 50
    if _INTRO_CHOL is None:
        omega = intro_correlation(n)
        _INTRO_CHOL = np.linalg.cholesky(omega)  # PD verified here, once
    Lx = np.linalg.cholesky(0.9 * np.ones((n, n)) + 0.1 * np.eye(n))
    X = rng.standard_normal((I, n)) @ Lx.T
    Y = beta * X + rng.standard_normal((I, n)) @ _INTRO_CHOL.T
    return ClusterDataset.from_arrays(Y, X[:, :, None])


def gen_dataset(spec, rng):
    if spec.kind == "linear_multilevel":
        return gen_linear_multilevel(spec.lam, spec.I, rng, beta=spec.beta_true)
    if spec.kind == "binomial_equicorr":
        return gen_binomial_copula("equicorr", spec.I, rng, beta=spec.beta_true)
    if spec.kind == "binomial_arma22":
        return gen_binomial_copula("arma22", spec.I, rng, beta=spec.beta_true)
    return gen_longitudinal_intro(spec.I, rng, beta=spec.beta_true)


def family_for(spec):
    return binomial() if spec.kind.startswith("binomial") else gaussian()


# ---------------------------------------------------------------------------
# Paired Monte-Carlo experiment
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class MethodSpec:
    """A labelled (objective, structure) pair entering the comparison."""

    label: str
    objective: object  # DispersionObjective
    structure: object  # CovarianceStructure


@dataclass(eq=False)
class MseRow:
    dgp: str
    method: str
    I: int
    reps: int
    mse: float
    mse_ratio: float
    mc_se_ratio: float


@dataclass(eq=False)
class MseReport:
    """Relative mean squared errors with paired Monte-Carlo uncertainty.

    ``rows`` hold one entry per (dgp, I, method); ``paired`` maps
    ``(dgp_label, I, method_a, method_b)`` to ``(mean difference of squared
    errors, MC standard error of that mean)``.  ``squared_errors`` keeps the
    per-replication squared errors (NaN for failed fits) keyed by
    ``(dgp_label, I)`` for downstream analysis, and ``digests`` the
    per-replication dataset fingerprints under the same keys.
    """

    rows: list
    paired: dict
    squared_errors: dict
    digests: dict
    failure_rate: float
    root_seed: int

    def row(self, dgp_label, method, I=None):
        for r in self.rows:
            if r.dgp == dgp_label and r.method == method and I in (None, r.I):
                return r
        raise KeyError((dgp_label, method, I))

    def to_table(self):
        lines = ["dgp\tmethod\tI\treps\tmse_ratio\tmc_se"]
        for r in self.rows:
            lines.append(
                f"{r.dgp}\t{r.method}\t{r.I}\t{r.reps}"
                f"\t{r.mse_ratio:.17g}\t{r.mc_se_ratio:.17g}"
            )
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_table())


UNWEIGHTED_LABEL = "unweighted"


def _unweighted_method():
    from .objectives import DispersionObjective

    return MethodSpec(UNWEIGHTED_LABEL, DispersionObjective("none"), cov.independence())


def _run_one_replication(args):
    spec, methods, root_seed, rep, settings = args
    rng = replication_rng(root_seed, rep)
    dataset = gen_dataset(spec, rng)
    digest = dataset.digest()
    family = family_for(spec)
    out = {}
    for m in methods:
        try:
            fit = minimize_dispersion(
                dataset, family, m.structure, m.objective, settings=settings
            )
            err = float(fit.beta_hat[0]) - spec.beta_true
            out[m.label] = err * err
        except SandregError as exc:
            logger.warning("rep %d method %s failed: %s", rep, m.label, exc)
            out[m.label] = np.nan
    return rep, digest, out


def run_mse_experiment(
    dgps,
    methods,
    replications,
    root_seed,
    settings=None,
    workers=1,
    max_failure_rate=0.05,
):
    """Paired relative-MSE comparison of dispersion methods.

    Every method is fitted to the identical dataset within a replication
    (paired design, asserted via dataset digests).  Ratios are taken to the
    unweighted estimator, which is appended automatically when absent, so
    its own ratio row is 1 by construction.  Per-method failures are
    excluded pairwise; the run aborts if the overall failure rate exceeds
    ``max_failure_rate``.
    """
    if replications < 2:
        raise SandregError("need at least 2 replications")
    if isinstance(dgps, DgpSpec):
        dgps = [dgps]
    methods = list(methods)
    if not any(m.label == UNWEIGHTED_LABEL for m in methods):
        methods.append(_unweighted_method())
    labels = [m.label for m in methods]
    if len(set(labels)) != len(labels):
        raise SandregError("method labels must be unique")
    settings = settings or OptimizerSettings(restarts=2)

    sq = {}
    digests = {}
    n_fail = 0
    n_total = 0
    for spec in dgps:
        jobs = [(spec, methods, root_seed, rep, settings) for rep in range(replications)]
        if workers and workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(_run_one_replication, jobs, chunksize=4))
        else:
            results = [_run_one_replication(j) for j in jobs]
        results.sort(key=lambda r: r[0])  # deterministic reduction order
        errs = {lab: np.full(replications, np.nan) for lab in labels}
        digs = []
        for rep, digest, out in results:
            digs.append(digest)
            for lab in labels:
                errs[lab][rep] = out[lab]
                n_total += 1
                if not np.isfinite(out[lab]):
                    n_fail += 1
        sq[(spec.label(), spec.I)] = (spec, errs)
        digests[(spec.label(), spec.I)] = tuple(digs)

    failure_rate = n_fail / max(n_total, 1)
    if failure_rate > max_failure_rate:
        raise ConvergenceError(
            f"failure rate {failure_rate:.1%} exceeds {max_failure_rate:.0%}"
        )

    rows = []
    paired = {}
    for (dgp_label, _), (spec, errs) in sq.items():
        base = errs[UNWEIGHTED_LABEL]
        for lab in labels:
            e = errs[lab]
            keep = np.isfinite(e) & np.isfinite(base)
            reps = int(keep.sum())
            mse = float(np.mean(e[keep]))
            base_mse = float(np.mean(base[keep]))
            ratio = mse / base_mse
            # delta-method MC standard error for a ratio of paired means
            infl = (e[keep] - ratio * base[keep]) / base_mse
            se = float(np.std(infl, ddof=1) / np.sqrt(reps)) if reps > 1 else np.nan
            rows.append(MseRow(dgp_label, lab, spec.I, reps, mse, ratio, se))
        for a in labels:
            for b in labels:
                if a >= b:
                    continue
                keep = np.isfinite(errs[a]) & np.isfinite(errs[b])
                d = errs[a][keep] - errs[b][keep]
                paired[(dgp_label, spec.I, a, b)] = (
                    float(np.mean(d)),
                    float(np.std(d, ddof=1) / np.sqrt(keep.sum())),
                )
    return MseReport(
        rows=rows,
        paired=paired,
        squared_errors={k: v[1] for k, v in sq.items()},
        digests=digests,
        failure_rate=failure_rate,
        root_seed=root_seed,
    )


def paired_difference(report, dgp_label, I, method_a, method_b):
    """(mean, MC-SE) of squared-error differences method_a - method_b."""
    key = (dgp_label, I, method_a, method_b)
    if key in report.paired:
        return report.paired[key]
    mean, se = report.paired[(dgp_label, I, method_b, method_a)]
    return -mean, se
