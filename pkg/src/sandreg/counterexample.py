"""Quadrature study of a heteroscedastic law where pseudo-likelihood and
cross-product dispersion fits are badly suboptimal.

The law on (Y, X) is parametrized by ``(tau, sigma2, c_tilde, delta)``:

* X has the symmetric mixture density

      p(x) = lam1 / (1 + x^4) * 1{|x| <= delta}
           + lam2 * normal_pdf(x; 0, nu2),

  with ``lam2 = max(1/2, 1 - tau^2/2)`` and ``lam1, nu2`` chosen so the
  density integrates to one and E[X^2] = tau^2 for every delta;
* Y | X is Gaussian with mean X beta and variance
  ``sigma2(x) = c1 + c2 x^2 1{x >= 0}`` where ``c1 = 2 sigma2 / (2 + c_tilde tau^2)``
  and ``c2 = c_tilde c1``, so E[Var(Y | X)] = sigma2.

The working variance class is two-piece constant: ``nu_gamma(x) = gamma1``
on x >= 0 and ``gamma2`` on x < 0.  The asymptotic variance of the weighted
least squares slope under weights ``1/nu_gamma`` is

    V(gamma) = E[X^2 / nu_gamma(X)]^{-2} E[sigma2(X) X^2 / nu_gamma(X)^2].

Both the Gaussian pseudo-likelihood (EQML) and the cross-product (GEE)
dispersion fits converge to ``gamma = (c1 + c2 tau^2, c1)`` (the
within-piece mean of sigma2(x)), while the two-piece optimum reweights the
quartic-tailed right half far more aggressively.  The ratio of the two
V values grows without bound in ``delta``, roughly linearly in the
truncated fourth-moment ratio B(delta): working variances arbitrarily
close (in KL) to homoscedastic can make the pseudo-likelihood fit
arbitrarily inefficient *within its own estimator class*.

Everything here is 1-d adaptive quadrature (Gauss-Kronrod with explicit
splits at the density's kinks 0 and +-delta); nothing is simulated except
in :func:`empirical_cross_check`, which bridges to the estimation stack.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.integrate import quad

from . import covariance as cov
from .data import ClusterDataset
from .errors import DataError, IntegrationError, SandregError
from .families import gaussian
from .objectives import DispersionObjective, OptimizerSettings, minimize_dispersion

_GOLD = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class QuadratureSettings:
    """Adaptive quadrature controls."""

    atol: float = 1e-9
    rtol: float = 1e-8
    limit: int = 2000  # max subdivisions
    gauss_span: float = 40.0  # Gaussian component truncated at span * nu

    def __post_init__(self):
        if self.atol <= 0 or self.rtol <= 0 or self.limit < 10 or self.gauss_span <= 0:
            raise SandregError("quadrature settings must be positive")


_DEFAULT_QUAD = QuadratureSettings()


def integrate(f, a, b, settings=None, breakpoints=()):
    """Adaptive Gauss-Kronrod integral of ``f`` on [a, b] with error estimate.

    ``breakpoints`` flags known kinks strictly inside (a, b); the interval
    is split there so the panel rule never straddles a non-smooth point.
    Raises :class:`IntegrationError` (carrying the best value) when the
    error estimate exceeds the requested tolerance.
    """
    settings = settings or _DEFAULT_QUAD
    pts = sorted(p for p in breakpoints if a < p < b)
    finite = np.isfinite(a) and np.isfinite(b)
    out = quad(
        f,
        a,
        b,
        points=pts if (pts and finite) else None,
        epsabs=settings.atol,
        epsrel=settings.rtol,
        limit=settings.limit,
        full_output=1,
    )
    value, err = out[0], out[1]
    if err > settings.atol + settings.rtol * abs(value):
        raise IntegrationError(
            f"quadrature error estimate {err:.3e} exceeds tolerance",
            best_value=value,
            error_estimate=err,
        )
    return value, err


@dataclass(frozen=True)
class CounterexampleSpec:
    """Parameters (tau, sigma2, c_tilde, delta) of the law described above."""

    tau: float = 1.0
    sigma2: float = 1.0
    c_tilde: float = 0.5
    delta: float = 10.0

    def __post_init__(self):
        if self.tau <= 0 or self.sigma2 <= 0:
            raise SandregError("tau and sigma2 must be positive")
        if not 0 < self.c_tilde <= 1:
            raise SandregError("c_tilde must lie in (0, 1]")
        if self.delta <= 0:
            raise SandregError("delta must be positive")

    @property
    def lambda2(self):
        return max(0.5, 1.0 - self.tau**2 / 2.0)

    @property
    def c1(self):
        return 2.0 * self.sigma2 / (2.0 + self.c_tilde * self.tau**2)

    @property
    def c2(self):
        return self.c_tilde * self.c1


@lru_cache(maxsize=512)
def _base_integrals(delta, settings):
    """(J0, J2, J4): integrals of x^k / (1 + x^4) over [0, delta]."""
    J0, _ = integrate(lambda x: 1.0 / (1.0 + x**4), 0.0, delta, settings)
    J2, _ = integrate(lambda x: x * x / (1.0 + x**4), 0.0, delta, settings)
    J4 = delta - J0  # x^4/(1+x^4) = 1 - 1/(1+x^4)
    return J0, J2, J4


def mixture_constants(spec, settings=None):
    """(lam1, nu2, rho) completing the density for the given spec."""
    settings = settings or _DEFAULT_QUAD
    J0, J2, _ = _base_integrals(spec.delta, settings)
    lam2 = spec.lambda2
    lam1 = (1.0 - lam2) / (2.0 * J0)
    rho = J2 / J0
    nu2 = spec.tau**2 / lam2 - (1.0 - lam2) * rho / lam2
    if nu2 <= 0:
        raise SandregError("Gaussian component variance came out non-positive")
    return lam1, nu2, rho


def quartic_moment_ratio(delta, settings=None):
    """B(delta): truncated fourth-to-zeroth moment ratio of 1/(1+x^4)."""
    J0, _, J4 = _base_integrals(delta, settings or _DEFAULT_QUAD)
    return J4 / J0


def density_pdelta(x, spec, settings=None):
    """Covariate density p(x); vectorized over x."""
    lam1, nu2, _ = mixture_constants(spec, settings)
    x = np.asarray(x, dtype=float)
    quartic = np.where(np.abs(x) <= spec.delta, lam1 / (1.0 + x**4), 0.0)
    gauss = spec.lambda2 / np.sqrt(2.0 * np.pi * nu2) * np.exp(-(x**2) / (2.0 * nu2))
    return quartic + gauss


def conditional_variance(x, spec):
    """sigma2(x) = c1 + c2 x^2 on x >= 0, c1 on x < 0; vectorized."""
    x = np.asarray(x, dtype=float)
    return spec.c1 + spec.c2 * x * x * (x >= 0)


def expectation(f, spec, settings=None, half=None):
    """E[f(X)] under the covariate density, with splits at the kinks.

    ``half`` restricts to the positive ("pos") or negative ("neg") axis.
    """
    settings = settings or _DEFAULT_QUAD
    lam1, nu2, _ = mixture_constants(spec, settings)
    hi = max(settings.gauss_span * np.sqrt(nu2), spec.delta + 1.0)
    lo, up = -hi, hi
    if half == "pos":
        lo = 0.0
    elif half == "neg":
        up = 0.0

    def integrand(x):
        quartic = lam1 / (1.0 + x**4) if abs(x) <= spec.delta else 0.0
        gauss = spec.lambda2 / np.sqrt(2.0 * np.pi * nu2) * np.exp(-(x * x) / (2.0 * nu2))
        return f(x) * (quartic + gauss)

    value, _ = integrate(
        integrand, lo, up, settings, breakpoints=(-spec.delta, 0.0, spec.delta)
    )
    return value


@lru_cache(maxsize=512)
def _piece_moments(spec, settings):
    """(a1, a2, s1, s2): E[X^2 1{piece}] and E[X^2 sigma2(X) 1{piece}]."""
    a1 = expectation(lambda x: x * x, spec, settings, half="pos")
    a2 = expectation(lambda x: x * x, spec, settings, half="neg")
    s1 = expectation(
        lambda x: x * x * (spec.c1 + spec.c2 * x * x), spec, settings, half="pos"
    )
    s2 = spec.c1 * a2
    return a1, a2, s1, s2


def population_sandwich_V(gamma, spec, settings=None):
    """Asymptotic slope variance under two-piece weights or a weight function.

    ``gamma`` is either the pair (gamma1, gamma2) of piece variances or a
    callable ``nu(x)`` (for instance the pointwise-optimal
    ``conditional_variance``).  All expectations run through the quadrature
    engine with splits at the density's kinks.
    """
    settings = settings or _DEFAULT_QUAD
    if callable(gamma):
        nu = gamma
        e1 = expectation(lambda x: x * x / nu(x), spec, settings)
        e2 = expectation(
            lambda x: (spec.c1 + spec.c2 * x * x * (x >= 0)) * x * x / nu(x) ** 2,
            spec,
            settings,
        )
        return e2 / e1**2
    g1, g2 = float(gamma[0]), float(gamma[1])
    if g1 <= 0 or g2 <= 0:
        raise SandregError("two-piece weights must be positive")
    a1, a2, s1, s2 = _piece_moments(spec, settings or _DEFAULT_QUAD)
    e1 = a1 / g1 + a2 / g2
    e2 = s1 / g1**2 + s2 / g2**2
    return e2 / e1**2


def population_minimizers(spec, settings=None):
    """((gamma1, gamma2), v_opt): pseudo-likelihood/cross-product limit and
    the unrestricted Cauchy-Schwarz optimum E[X^2 / sigma2(X)]^{-1}.

    Both EQML and GEE converge to the within-piece conditional means of
    sigma2(x): gamma1 = c1 + c2 tau^2, gamma2 = c1.
    """
    settings = settings or _DEFAULT_QUAD
    gamma = (spec.c1 + spec.c2 * spec.tau**2, spec.c1)
    e_inv = expectation(
        lambda x: x * x / (spec.c1 + spec.c2 * x * x * (x >= 0)), spec, settings
    )
    return gamma, 1.0 / e_inv


def _golden_min(f, lo, hi, tol=1e-6, max_iter=200):
    """Golden-section minimum of a unimodal scalar function on [lo, hi]."""
    a, b = float(lo), float(hi)
    x1 = b - _GOLD * (b - a)
    x2 = a + _GOLD * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(max_iter):
        if b - a <= tol:
            break
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - _GOLD * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + _GOLD * (b - a)
            f2 = f(x2)
    return (a + b) / 2.0


def two_piece_infimum(spec, settings=None, sweeps=2, tol=1e-6):
    """Infimum of V over the two-piece class, by per-piece golden section.

    Coordinates are optimized one piece at a time on a log scale (the
    objective is scale invariant, so two alternation sweeps suffice), and
    the result is cross-checked against the closed-form within-piece
    optimum gamma_j* ~ E[X^2 sigma2(X) 1{piece j}] / E[X^2 1{piece j}].
    """
    settings = settings or _DEFAULT_QUAD
    a1, a2, s1, s2 = _piece_moments(spec, settings)
    g = np.array([spec.c1 + spec.c2 * spec.tau**2, spec.c1])
    for _ in range(sweeps):
        for j in (0, 1):
            def f(t, j=j):
                gg = g.copy()
                gg[j] = np.exp(t)
                return population_sandwich_V(gg, spec, settings)

            g[j] = np.exp(_golden_min(f, -10.0, 14.0, tol=tol))
    v_num = population_sandwich_V(g, spec, settings)
    closed = 1.0 / (a1**2 / s1 + a2**2 / s2)  # Cauchy-Schwarz within pieces
    if abs(v_num - closed) > 1e-5 * closed:
        raise SandregError(
            f"two-piece minimization ({v_num:.8g}) disagrees with the "
            f"closed-form optimum ({closed:.8g})"
        )
    return closed, (s1 / a1, s2 / a2)


def divergence_lower_bound(spec, settings=None):
    """The closed-form curve c1 c2 (1 - lam2) B(delta) / (2 tau^2 (c1 + 2 c2 tau^2)).

    Grows linearly in the truncated fourth-moment ratio; used as a
    reference line in reports and sweeps.
    """
    B = quartic_moment_ratio(spec.delta, settings)
    lam2 = spec.lambda2
    return (
        spec.c1 * spec.c2 * (1.0 - lam2) * B
        / (2.0 * spec.tau**2 * (spec.c1 + 2.0 * spec.c2 * spec.tau**2))
    )


def divergence_ratio(spec, settings=None):
    """V at the EQML/GEE limit over the true two-piece infimum."""
    settings = settings or _DEFAULT_QUAD
    gamma_eqml, _ = population_minimizers(spec, settings)
    v_eqml = population_sandwich_V(gamma_eqml, spec, settings)
    v_inf, _ = two_piece_infimum(spec, settings)
    return v_eqml / v_inf


def find_delta_for_eta(tau, sigma2, c_tilde, eta, settings=None, max_delta=1e6):
    """Smallest-ish delta (3 significant figures) whose ratio reaches eta.

    Doubles delta from 1 until the divergence ratio reaches ``eta``, then
    bisects; the returned endpoint satisfies ratio >= eta.
    """
    if eta < 1:
        raise SandregError("eta must be at least 1")
    settings = settings or _DEFAULT_QUAD

    def ratio(d):
        return divergence_ratio(
            CounterexampleSpec(tau=tau, sigma2=sigma2, c_tilde=c_tilde, delta=d), settings
        )

    lo, hi = None, 1.0
    while ratio(hi) < eta:
        lo = hi
        hi *= 2.0
        if hi > max_delta:
            raise SandregError(f"no delta below {max_delta:g} reaches eta={eta}")
    if lo is None:
        return hi
    while (hi - lo) > 5e-4 * hi:
        mid = 0.5 * (lo + hi)
        if ratio(mid) >= eta:
            hi = mid
        else:
            lo = mid
    return hi


def kl_gap_to_homoscedastic(spec, settings=None):
    """KL divergence of the nearest homoscedastic law from this one.

    Computes I(c, delta) = 1/2 E[ (log(1 + c X^2) + 1/(1 + c X^2) - 1) 1{X >= 0} ]
    at c = c2/c1 = c_tilde exactly; a reported diagnostic, not an input to
    any downstream computation.
    """
    c = spec.c_tilde

    def f(x):
        u = 1.0 + c * x * x
        return 0.5 * (np.log(u) + 1.0 / u - 1.0)

    return expectation(f, spec, settings, half="pos")


# ---------------------------------------------------------------------------
# Sampling bridge to the estimation stack
# ---------------------------------------------------------------------------


def sample_covariate(spec, size, rng, table_size=100_000, settings=None):
    """Draws from the covariate density: Gaussian/quartic mixture with the
    truncated-quartic piece inverted through a monotone CDF table."""
    lam1, nu2, _ = mixture_constants(spec, settings)
    grid = np.linspace(0.0, spec.delta, table_size)
    pdf = 1.0 / (1.0 + grid**4)
    cdf = np.concatenate(([0.0], np.cumsum((pdf[1:] + pdf[:-1]) / 2.0 * np.diff(grid))))
    cdf /= cdf[-1]
    pick_gauss = rng.random(size) < spec.lambda2
    out = np.empty(size)
    n_gauss = int(pick_gauss.sum())
    out[pick_gauss] = rng.standard_normal(n_gauss) * np.sqrt(nu2)
    n_quartic = size - n_gauss
    u = rng.random(n_quartic)
    mags = np.interp(u, cdf, grid)
    signs = np.where(rng.random(n_quartic) < 0.5, -1.0, 1.0)
    out[~pick_gauss] = signs * mags
    return out


def sample_dataset(spec, I, rng, beta=1.0, settings=None):
    """I ungrouped observations (clusters of size one) from the law."""
    x = sample_covariate(spec, I, rng, settings=settings)
    sd = np.sqrt(conditional_variance(x, spec))
    y = beta * x + sd * rng.standard_normal(I)
    return ClusterDataset.from_arrays(y[:, None], x[:, None, None])


def empirical_cross_check(
    spec,
    I,
    rng,
    replications=50,
    objectives=("eqml", "gee", "sandwich"),
    beta=1.0,
    settings=None,
    optimizer=None,
):
    """Monte-Carlo bridge: fit the two-piece structure on sampled data.

    For each replication the requested objectives are fitted on the same
    draw; reports per-objective empirical variance (and mean) of the slope
    and the average fitted dispersion pair.
    """
    if I < 3:
        raise DataError("need at least 3 observations")
    structure = cov.two_piece(split_column=0)
    optimizer = optimizer or OptimizerSettings(restarts=2)
    family = gaussian()
    betas = {k: [] for k in objectives}
    gammas = {k: [] for k in objectives}
    for _ in range(replications):
        dataset = sample_dataset(spec, I, rng, beta=beta, settings=settings)
        for kind in objectives:
            objective = DispersionObjective(
                kind,
                target=np.ones(1) if kind in ("sandwich", "sandwich_large_sample") else None,
            )
            fit = minimize_dispersion(dataset, family, structure, objective, settings=optimizer)
            betas[kind].append(float(fit.beta_hat[0]))
            gammas[kind].append(fit.gamma_hat)
    report = {}
    for kind in objectives:
        b = np.asarray(betas[kind])
        g = np.asarray(gammas[kind])
        report[kind] = {
            "beta_mean": float(b.mean()),
            "beta_var": float(b.var(ddof=1)) if b.size > 1 else np.nan,
            "gamma_mean": g.mean(axis=0),
        }
    return report
