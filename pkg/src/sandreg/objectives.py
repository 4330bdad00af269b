"""Dispersion objectives and the derivative-free dispersion fit.

Four ways of choosing the working-covariance parameter ``gamma``:

``sandwich``
    Minimize the finite-sample leave-one-cluster-out variance estimate of
    the target contrast (the fixed effects are re-fit at every gamma, warm
    started from the previous evaluation).
``sandwich_large_sample``
    Same, with the plug-in M^{-1} S M^{-1} estimate.
``eqml``
    Gaussian pseudo-likelihood sum_i [log det Sigma_i + r_i^T Sigma_i^{-1} r_i],
    residuals taken at a pilot beta; the driver alternates gamma
    minimization with beta refits until gamma stops moving, so at
    convergence the residuals are those of beta(gamma_hat).
``gee``
    Least squares of Pearson residual cross-products on the working model:
    sum_i || A_i^{-1/2} r_i r_i^T A_i^{-1/2} - phi P_i(gamma) ||_F^2.  With
    a free scale, phi is profiled out in closed form at every evaluation
    (the objective is then flat in gamma's own scale coordinate, and the
    profiled value is written into the reported gamma_hat).
``none``
    No weighting: independence working correlation, pooled GLM fit.

Minimization runs Nelder-Mead in the unconstrained coordinates of
:func:`sandreg.covariance.pack_params` with multiple starts (theta = 0 plus
seeded Gaussian perturbations), so every candidate gamma is admissible by
construction and the best final value wins.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import covariance as cov
from .errors import (
    ConvergenceError,
    DegenerateMeanError,
    LeverageError,
    RankDeficiencyError,
    SandregError,
    StructureError,
)
from .qml import build_weights, fisher_scoring, group_by_size
from .sandwich_loss import large_sample_from_solution, sandwich_loss_from_solution

_OBJECTIVE_KINDS = ("sandwich", "sandwich_large_sample", "eqml", "gee", "none")

# numerical failures at inadmissible corners of the search space are soft:
# the simplex sees an infinite value and retreats
_SOFT_ERRORS = (
    StructureError,
    LeverageError,
    RankDeficiencyError,
    DegenerateMeanError,
    ConvergenceError,
)


def _softened(fun):
    def wrapped(theta):
        try:
            return fun(theta)
        except _SOFT_ERRORS:
            return np.inf

    return wrapped


@dataclass(frozen=True, eq=False)
class DispersionObjective:
    """Objective kind plus, for the sandwich kinds, the target contrast."""

    kind: str
    target: np.ndarray = None

    def __post_init__(self):
        if self.kind not in _OBJECTIVE_KINDS:
            raise SandregError(f"unknown objective kind {self.kind!r}")
        is_sandwich = self.kind in ("sandwich", "sandwich_large_sample")
        if is_sandwich:
            if self.target is None:
                raise SandregError(f"objective {self.kind!r} needs a target contrast")
            c = np.atleast_1d(np.asarray(self.target, dtype=float))
            if not np.any(c != 0):
                raise SandregError("target contrast must be nonzero")
            object.__setattr__(self, "target", c)
        elif self.target is not None:
            raise SandregError(f"objective {self.kind!r} takes no target contrast")


@dataclass(frozen=True)
class OptimizerSettings:
    """Multistart Nelder-Mead controls (all in unconstrained coordinates)."""

    restarts: int = 5
    init_scale: float = 0.5
    tol: float = 1e-6
    max_evals: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.restarts < 1 or self.init_scale <= 0 or self.tol <= 0 or self.max_evals < 1:
            raise SandregError("optimizer settings must be positive")


@dataclass(eq=False)
class SandregFit:
    """A completed dispersion fit: gamma_hat and beta_hat = beta(gamma_hat)."""

    beta_hat: np.ndarray
    gamma_hat: np.ndarray
    theta_hat: np.ndarray
    value: float
    trace: list  # (start index, start theta, final value) per start
    converged: bool
    n_evals: int
    objective: DispersionObjective
    structure: object
    settings: OptimizerSettings
    solution: object  # QmlSolution at gamma_hat
    label: str = None


# ---------------------------------------------------------------------------
# EQML / GEE objective values
# ---------------------------------------------------------------------------


def _pearson_parts(dataset, family, structure, gamma, beta):
    """Per-group residual pieces shared by the EQML and GEE objectives."""
    groups = group_by_size(dataset)
    weights = build_weights(structure, gamma, dataset)
    beta = np.asarray(beta, dtype=float)
    out = []
    for g, w in zip(groups, weights):
        mu = family.inverse(g.X @ beta)
        v = family.variance(mu)
        a = 1.0 / np.sqrt(v)
        aR = a * (g.Y - mu)
        out.append((g, w, v, aR))
    return out


def eqml_terms(dataset, family, structure, gamma, beta_pilot):
    """Per-cluster Gaussian pseudo-likelihood terms, dataset cluster order."""
    out = np.empty(dataset.n_clusters)
    for g, w, v, aR in _pearson_parts(dataset, family, structure, gamma, beta_pilot):
        quad = (aR * np.matmul(w.Pinv, aR[..., None])[..., 0]).sum(axis=1)
        logdet = w.logdet + np.log(v).sum(axis=1)
        out[g.idx] = logdet + quad
    return out


def eqml_objective(dataset, family, structure, gamma, beta_pilot):
    """Gaussian pseudo-likelihood: sum_i [log det Sigma_i + r_i^T Sigma_i^{-1} r_i].

    Residuals are taken at the supplied pilot coefficients; see
    :func:`minimize_dispersion` for the alternation that makes the pilot
    equal beta(gamma) at the optimum.
    """
    return float(eqml_terms(dataset, family, structure, gamma, beta_pilot).sum())


def _gee_pieces(dataset, family, structure, gamma, beta_pilot):
    """Per-cluster inner products <C,C>, <C,P0>, <P0,P0> with C the Pearson
    cross-product matrix and P0 the unscaled working matrix."""
    core = gamma
    if structure.has_free_scale:
        core = np.atleast_1d(np.asarray(gamma, dtype=float))[:-1]
        core = np.concatenate((core, [1.0]))  # unit scale; phi handled outside
    cc = np.empty(dataset.n_clusters)
    cp = np.empty(dataset.n_clusters)
    pp = np.empty(dataset.n_clusters)
    for g, w, v, aR in _pearson_parts(dataset, family, structure, core, beta_pilot):
        sq = (aR**2).sum(axis=1)
        cc[g.idx] = sq**2
        cp[g.idx] = (aR * np.matmul(w.P, aR[..., None])[..., 0]).sum(axis=1)
        pp[g.idx] = float((w.P**2).sum()) if w.shared else (w.P**2).sum(axis=(1, 2))
    return cc, cp, pp


def gee_profile_scale(dataset, family, structure, gamma, beta_pilot):
    """Closed-form least-squares scale phi_hat for the GEE objective."""
    _, cp, pp = _gee_pieces(dataset, family, structure, gamma, beta_pilot)
    return float(cp.sum() / pp.sum())


def gee_terms(dataset, family, structure, gamma, beta_pilot):
    """Per-cluster Frobenius terms || C_i - phi P0_i ||_F^2.

    phi is the profiled scale when the structure carries a free scale,
    otherwise 1.
    """
    cc, cp, pp = _gee_pieces(dataset, family, structure, gamma, beta_pilot)
    phi = float(cp.sum() / pp.sum()) if structure.has_free_scale else 1.0
    return cc - 2.0 * phi * cp + phi * phi * pp


def gee_objective(dataset, family, structure, gamma, beta_pilot):
    """Pearson cross-product least squares against the working model."""
    return float(gee_terms(dataset, family, structure, gamma, beta_pilot).sum())


def eqml_estimating_residual(dataset, family, structure, gamma, beta_pilot, h=1e-6):
    """Diagnostic: the EQML estimating-equation residual per gamma coordinate.

    Central finite differences of the pseudo-likelihood; near zero at an
    interior EQML optimum.
    """
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    out = np.empty(gamma.size)
    for k in range(gamma.size):
        step = h * (1.0 + abs(gamma[k]))
        hi = gamma.copy()
        lo = gamma.copy()
        hi[k] += step
        lo[k] -= step
        out[k] = (
            eqml_objective(dataset, family, structure, hi, beta_pilot)
            - eqml_objective(dataset, family, structure, lo, beta_pilot)
        ) / (2.0 * step)
    return out


def gaussian_aic(dataset, family, structure, gamma, beta):
    """Gaussian AIC diagnostic: -2 log-likelihood + 2 (p + q)."""
    value = eqml_objective(dataset, family, structure, gamma, beta)
    n = dataset.n_total
    return value + n * np.log(2.0 * np.pi) + 2.0 * (dataset.p + structure.gamma_dim())


# ---------------------------------------------------------------------------
# Minimization
# ---------------------------------------------------------------------------


class _EvalCounter:
    def __init__(self):
        self.count = 0


def _profiled_sandwich_value(dataset, family, structure, objective, warm):
    large = objective.kind == "sandwich_large_sample"
    c = objective.target

    def value_at(theta, counter):
        gamma = cov.unpack_params(structure, theta)
        sol = fisher_scoring(dataset, family, structure, gamma, beta_init=warm["beta"])
        warm["beta"] = sol.beta
        counter.count += 1
        loss = (
            large_sample_from_solution(sol, c)
            if large
            else sandwich_loss_from_solution(sol, c)
        )
        return loss.value

    return value_at


def _nm_options(q, settings):
    return {
        "fatol": settings.tol,
        "xatol": settings.tol,
        "maxfev": settings.max_evals,
        "maxiter": 10 * settings.max_evals,
    }


def _run_nelder_mead(f, theta0, settings):
    q = theta0.size
    simplex = np.vstack([theta0] + [theta0 + settings.init_scale * e for e in np.eye(q)])
    opts = _nm_options(q, settings)
    opts["initial_simplex"] = simplex
    res = minimize(f, theta0, method="Nelder-Mead", options=opts)
    return res


def _starts(q, settings, extra=()):
    rng = np.random.default_rng(settings.seed)
    starts = [np.zeros(q)]
    for _ in range(settings.restarts - 1):
        starts.append(rng.normal(scale=settings.init_scale, size=q))
    for theta in extra:
        starts.append(np.asarray(theta, dtype=float))
    return starts


def minimize_dispersion(
    dataset,
    family,
    structure,
    objective,
    settings=None,
    beta_init=None,
    extra_starts=(),
    label=None,
):
    """Choose the dispersion by minimizing the requested objective.

    Runs multistart Nelder-Mead over the unconstrained parametrization
    (dimension capped at 10; beyond that a derivative-free simplex is a
    poor tool).  Sandwich objectives profile beta at every evaluation;
    EQML/GEE alternate gamma minimization and beta refits until the fitted
    gamma moves by at most 1e-6 (at most 10 rounds).  ``extra_starts`` adds
    warm starts in unconstrained coordinates.

    Returns a :class:`SandregFit`.  Raises :class:`ConvergenceError`, with
    best-effort diagnostics, when every start errors or when none meets the
    simplex tolerance within ``settings.max_evals`` evaluations.
    """
    settings = settings or OptimizerSettings()
    structure = structure.bind(dataset)
    if objective.kind == "none":
        structure = cov.independence()
    q = structure.gamma_dim()
    if q > 10:
        raise StructureError(
            f"dispersion dimension {q} exceeds the derivative-free cap of 10"
        )
    is_sandwich = objective.kind in ("sandwich", "sandwich_large_sample")
    if is_sandwich and dataset.n_clusters < dataset.p + 1:
        raise SandregError(
            f"sandwich objectives need at least p + 1 = {dataset.p + 1} clusters"
        )
    # variance-targeted losses are exactly invariant to the working scale, so
    # a free-scale coordinate is pinned (at theta = 0) rather than searched
    reduce_scale = is_sandwich and structure.has_free_scale
    q_active = q - 1 if reduce_scale else q

    def _expand(theta_active):
        theta_active = np.atleast_1d(np.asarray(theta_active, dtype=float))
        return np.concatenate((theta_active, [0.0])) if reduce_scale else theta_active

    if objective.kind == "none" or q_active == 0:
        gamma = cov.neutral_gamma(structure)
        sol = fisher_scoring(dataset, family, structure, gamma, beta_init=beta_init)
        if objective.kind == "sandwich":
            value = sandwich_loss_from_solution(sol, objective.target).value
        elif objective.kind == "sandwich_large_sample":
            value = large_sample_from_solution(sol, objective.target).value
        elif objective.kind == "eqml":
            value = eqml_objective(dataset, family, structure, gamma, sol.beta)
        elif objective.kind == "gee":
            value = gee_objective(dataset, family, structure, gamma, sol.beta)
        else:
            value = np.nan
        return SandregFit(
            beta_hat=sol.beta,
            gamma_hat=gamma,
            theta_hat=np.zeros(q),
            value=float(value),
            trace=[(0, np.zeros(q), value)],
            converged=True,
            n_evals=1,
            objective=objective,
            structure=structure,
            settings=settings,
            solution=sol,
            label=label,
        )

    counter = _EvalCounter()
    pilot = fisher_scoring(dataset, family, cov.independence(), np.zeros(0), beta_init=beta_init)
    warm = {"beta": pilot.beta}

    best = {"value": np.inf, "theta": None}
    trace = []
    any_success = False
    failures = []

    extras = [np.asarray(t, dtype=float)[:q_active] for t in extra_starts]
    for start_idx, theta0 in enumerate(_starts(q_active, settings, extras)):
        try:
            if is_sandwich:
                value_at = _profiled_sandwich_value(dataset, family, structure, objective, warm)
                res = _run_nelder_mead(
                    _softened(lambda t: value_at(_expand(t), counter)), theta0, settings
                )
                theta_fin, val_fin, success = _expand(res.x), float(res.fun), bool(res.success)
            else:
                theta_fin, val_fin, success = _alternate_eqml_gee(
                    dataset, family, structure, objective, theta0, warm["beta"], settings, counter
                )
            if not np.isfinite(val_fin):
                raise ConvergenceError("no admissible point found from this start")
        except SandregError as exc:
            failures.append((start_idx, str(exc)))
            trace.append((start_idx, theta0, np.inf))
            continue
        any_success = any_success or success
        trace.append((start_idx, theta0, val_fin))
        if val_fin < best["value"]:
            best = {"value": val_fin, "theta": theta_fin}

    if best["theta"] is None:
        raise ConvergenceError(
            "every optimizer start failed: " + "; ".join(m for _, m in failures)
        )
    if not any_success:
        raise ConvergenceError(
            f"no optimizer start converged within {settings.max_evals} evaluations; "
            f"best value {best['value']:.6g} at "
            f"gamma={cov.unpack_params(structure, best['theta']).tolist()} "
            "(raise max_evals or add restarts)",
            last_beta=warm["beta"],
        )

    gamma_hat = cov.unpack_params(structure, best["theta"])
    theta_hat = np.asarray(best["theta"], dtype=float)
    if objective.kind == "gee" and structure.has_free_scale:
        # write the profiled scale into the reported dispersion
        sol_tmp = fisher_scoring(dataset, family, structure, gamma_hat, beta_init=warm["beta"])
        phi = gee_profile_scale(dataset, family, structure, gamma_hat, sol_tmp.beta)
        gamma_hat = np.concatenate((gamma_hat[:-1], [phi]))
        theta_hat = cov.pack_params(structure, gamma_hat)
    sol = fisher_scoring(dataset, family, structure, gamma_hat, beta_init=warm["beta"])
    return SandregFit(
        beta_hat=sol.beta,
        gamma_hat=gamma_hat,
        theta_hat=theta_hat,
        value=best["value"],
        trace=trace,
        converged=any_success,
        n_evals=counter.count,
        objective=objective,
        structure=structure,
        settings=settings,
        solution=sol,
        label=label,
    )


def _alternate_eqml_gee(dataset, family, structure, objective, theta0, beta_pilot, settings, counter):
    """Block alternation: minimize over gamma at the pilot, refit beta, repeat."""
    term_fn = eqml_objective if objective.kind == "eqml" else gee_objective
    theta = np.asarray(theta0, dtype=float)
    pilot = beta_pilot
    gamma_prev = cov.unpack_params(structure, theta)
    success = False
    val = np.inf
    for _ in range(10):
        def f(t, pilot=pilot):
            counter.count += 1
            return term_fn(dataset, family, structure, cov.unpack_params(structure, t), pilot)

        res = _run_nelder_mead(_softened(f), theta, settings)
        theta, val, success = res.x, float(res.fun), bool(res.success)
        gamma = cov.unpack_params(structure, theta)
        pilot = fisher_scoring(dataset, family, structure, gamma, beta_init=pilot).beta
        if np.max(np.abs(gamma - gamma_prev)) <= 1e-6:
            gamma_prev = gamma
            break
        gamma_prev = gamma
    # report the value at the final pilot for comparability across starts
    val = term_fn(dataset, family, structure, gamma_prev, pilot)
    return theta, val, success
