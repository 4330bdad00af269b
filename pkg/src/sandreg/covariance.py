"""Working covariance structures and the dispersion reparametrization.

A :class:`CovarianceStructure` describes the parametric map from a
dispersion vector ``gamma`` to a per-cluster pseudo-correlation matrix
``P_i(gamma)``.  The full working covariance is
``Sigma_i = A_i^{1/2} P_i A_i^{1/2}`` with ``A_i`` the GLM variance-function
diagonal, and the estimating-equation weight is its inverse,
``W_i = A_i^{-1/2} P_i^{-1} A_i^{-1/2}``.

Supported kinds and their ``gamma`` layouts
-------------------------------------------
independence    ()                  or (phi,)           with free scale
exchangeable    (rho,)              or (rho, phi)
ar1             (rho,)              or (rho, phi)
arma            (ar_1..ar_p, ma_1..ma_q)  or (..., phi)
random_effects  (chol(V_u) row-wise lower triangle..., sigma)
two_piece       (g1, g2)            diagonal variance g1 where the split
                                    covariate is >= 0, g2 where < 0

``random_effects`` builds ``P_i = Z_i V_u Z_i^T + sigma^2 I`` from a design
``Z_i`` assembled out of cluster covariate columns (optionally with an
intercept column and polynomial powers), so ``P`` is a genuine covariance
rather than a unit-diagonal correlation.  ``two_piece`` likewise models
variances directly; both are "pseudo-correlations" in the sense that they
simply occupy P's slot in the weight matrix.

The unconstrained reparametrization
-----------------------------------
Optimizers work on ``theta`` in R^q via :func:`pack_params` /
:func:`unpack_params`:

* correlations map through a scaled tanh onto their admissible interval
  (exchangeable uses the dataset-wide maximum group size for its lower
  bound, so a single gamma is valid for every cluster);
* positive scalars (phi, sigma, two-piece variances) map through log;
* Cholesky diagonals map through log, off-diagonals are unconstrained;
* ARMA blocks map coordinate-wise through tanh to partial autocorrelations
  and then through the Levinson-Durbin recursion, which enforces
  stationarity of the AR block and invertibility of the MA block for every
  theta in R^q.  ``unpack_params`` therefore never fails.
"""

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve, toeplitz

from .errors import StructureError
from .families import variance_diag

_EPS_CORR = 1e-6  # open-interval margin for correlation parameters
_EXP_CLIP = 300.0  # |log scale| cap: keeps unpack total on R^q without overflow


def _exp_safe(t):
    return np.exp(np.clip(t, -_EXP_CLIP, _EXP_CLIP))

_SERIAL_KINDS = ("independence", "exchangeable", "ar1", "arma")
_KINDS = _SERIAL_KINDS + ("random_effects", "two_piece")


@dataclass(frozen=True, eq=False)
class CovarianceStructure:
    """Declarative description of one working-covariance family."""

    kind: str
    scale_mode: str = "unit"  # "unit" or "free"; serial kinds only
    ar_order: int = 0
    ma_order: int = 0
    re_columns: tuple = ()
    re_intercept: bool = True
    re_poly: int = 1
    split_column: int = 0
    max_group_size: int = None  # exchangeable lower bound; bound via bind()

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise StructureError(f"unknown covariance kind {self.kind!r}")
        if self.scale_mode not in ("unit", "free"):
            raise StructureError("scale_mode must be 'unit' or 'free'")
        if self.kind == "arma":
            if self.ar_order < 0 or self.ma_order < 0 or self.ar_order + self.ma_order < 1:
                raise StructureError("arma needs ar_order >= 0, ma_order >= 0, p + q >= 1")
        if self.kind == "random_effects":
            if self.scale_mode != "unit":
                raise StructureError("random_effects carries its own scale sigma")
            if not self.re_columns and not self.re_intercept:
                raise StructureError("random_effects needs an intercept or columns for Z")
        if self.kind == "two_piece" and self.scale_mode != "unit":
            raise StructureError("two_piece parameters are variances already")

    # -- descriptive helpers ------------------------------------------------

    @property
    def has_free_scale(self):
        return self.kind in _SERIAL_KINDS and self.scale_mode == "free"

    @property
    def re_dim(self):
        """Number of random-effect design columns d."""
        return int(self.re_intercept) + len(self.re_columns) * self.re_poly

    def gamma_dim(self):
        base = {
            "independence": 0,
            "exchangeable": 1,
            "ar1": 1,
            "arma": self.ar_order + self.ma_order,
            "random_effects": self.re_dim * (self.re_dim + 1) // 2 + 1,
            "two_piece": 2,
        }[self.kind]
        return base + (1 if self.has_free_scale else 0)

    @property
    def data_dependent(self):
        """True when P_i depends on cluster covariates, not only on n_i."""
        return self.kind in ("random_effects", "two_piece")

    def bind(self, dataset):
        """Attach the dataset-wide maximum group size (exchangeable bound)."""
        if self.kind == "exchangeable" and self.max_group_size != dataset.max_group_size:
            return replace(self, max_group_size=dataset.max_group_size)
        return self

    def label(self):
        bits = [self.kind]
        if self.kind == "arma":
            bits[0] = f"arma({self.ar_order},{self.ma_order})"
        if self.has_free_scale:
            bits.append("free-scale")
        return " ".join(bits)


# convenience constructors ---------------------------------------------------


def independence(scale_mode="unit"):
    return CovarianceStructure("independence", scale_mode=scale_mode)


def exchangeable(scale_mode="unit", max_group_size=None):
    return CovarianceStructure(
        "exchangeable", scale_mode=scale_mode, max_group_size=max_group_size
    )


def ar1(scale_mode="unit"):
    return CovarianceStructure("ar1", scale_mode=scale_mode)


def arma(ar_order, ma_order, scale_mode="unit"):
    return CovarianceStructure("arma", scale_mode=scale_mode, ar_order=ar_order, ma_order=ma_order)


def random_effects(columns=(), intercept=True, poly=1):
    return CovarianceStructure(
        "random_effects",
        re_columns=tuple(int(c) for c in columns),
        re_intercept=intercept,
        re_poly=int(poly),
    )


def two_piece(split_column=0):
    return CovarianceStructure("two_piece", split_column=int(split_column))


# ---------------------------------------------------------------------------
# ARMA autocovariances
# ---------------------------------------------------------------------------


def _check_stationary(phi, what="AR"):
    phi = np.asarray(phi, dtype=float)
    if phi.size == 0:
        return
    # roots of 1 - phi_1 z - ... - phi_p z^p must lie outside the unit circle
    roots = np.roots(np.concatenate((-phi[::-1], [1.0])))
    if roots.size and np.min(np.abs(roots)) <= 1.0 + 1e-12:
        raise StructureError(
            f"{what} coefficients {phi.tolist()} are not stationary/invertible",
            parameter=what,
        )


def arma_autocovariance(phi, theta, sigma2=1.0, max_lag=0):
    """Exact autocovariances gamma_0..gamma_max_lag of a stationary ARMA(p, q).

    Solves the linear system coupling gamma_0..gamma_max(p, q) to the
    innovation cross-covariances (via the moving-average weights psi), then
    extends by the autoregressive recursion.  Non-stationary AR coefficients
    are rejected before any solving; the MA side needs no restriction for
    the autocovariance to exist.
    """
    phi = np.atleast_1d(np.asarray(phi, dtype=float)) if np.size(phi) else np.zeros(0)
    theta = np.atleast_1d(np.asarray(theta, dtype=float)) if np.size(theta) else np.zeros(0)
    if sigma2 <= 0:
        raise StructureError("innovation variance must be positive", parameter="sigma2")
    _check_stationary(phi, what="AR")
    p, q = phi.size, theta.size
    th = np.concatenate(([1.0], theta))

    psi = np.zeros(q + 1)
    psi[0] = 1.0
    for j in range(1, q + 1):
        psi[j] = th[j] + sum(phi[k - 1] * psi[j - k] for k in range(1, min(j, p) + 1))

    m = max(p, q) + 1
    A = np.zeros((m, m))
    b = np.zeros(m)
    for k in range(m):
        A[k, k] += 1.0
        for j in range(1, p + 1):
            A[k, abs(k - j)] -= phi[j - 1]
        b[k] = sigma2 * sum(th[j] * psi[j - k] for j in range(k, q + 1))
    head = np.linalg.solve(A, b)

    out = np.empty(max_lag + 1)
    take = min(m, max_lag + 1)
    out[:take] = head[:take]
    for k in range(m, max_lag + 1):
        out[k] = sum(phi[j - 1] * out[k - j] for j in range(1, p + 1))
    if out[0] <= 0:
        raise StructureError("ARMA solve produced a non-positive variance")
    return out


# ---------------------------------------------------------------------------
# Correlation / covariance builders
# ---------------------------------------------------------------------------


def _split_scale(structure, gamma):
    """Separate the structural part of gamma from the optional free scale."""
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    if gamma.size != structure.gamma_dim():
        raise StructureError(
            f"{structure.label()} expects {structure.gamma_dim()} dispersion "
            f"parameters, got {gamma.size}"
        )
    if structure.has_free_scale:
        return gamma[:-1], float(gamma[-1])
    return gamma, 1.0


def build_correlation(structure, gamma, n, validate=False):
    """Pseudo-correlation matrix P(gamma) for a group of size ``n``.

    Serial kinds only (independence, exchangeable, ar1, arma); the
    data-dependent kinds need cluster covariates, see
    :func:`random_effects_cov` and :func:`two_piece_variance`.

    With ``validate=True`` the result is checked for symmetry and positive
    definiteness (smallest eigenvalue above 1e-10); intended for test and
    debug paths.
    """
    if structure.data_dependent:
        raise StructureError(
            f"{structure.kind} requires cluster covariates; use the cluster-level builder"
        )
    core, phi = _split_scale(structure, gamma)
    if structure.kind == "independence":
        mat = np.eye(n)
    elif structure.kind == "exchangeable":
        rho = float(core[0])
        if not -1.0 < rho < 1.0 or (n > 1 and rho <= -1.0 / (n - 1)):
            raise StructureError(
                f"exchangeable rho={rho} is outside (-1/(n-1), 1) for n={n}",
                parameter="rho",
            )
        mat = np.full((n, n), rho)
        np.fill_diagonal(mat, 1.0)
    elif structure.kind == "ar1":
        rho = float(core[0])
        if not -1.0 < rho < 1.0:
            raise StructureError(f"ar1 rho={rho} must lie in (-1, 1)", parameter="rho")
        mat = rho ** np.abs(np.subtract.outer(np.arange(n), np.arange(n)))
    else:  # arma
        p, q = structure.ar_order, structure.ma_order
        acov = arma_autocovariance(core[:p], core[p : p + q], 1.0, max_lag=max(n - 1, 0))
        acf = acov / acov[0]
        mat = toeplitz(acf[:n])
    if phi <= 0:
        raise StructureError(f"scale phi={phi} must be positive", parameter="phi")
    mat = phi * mat
    if not np.isfinite(mat).all():
        raise StructureError(
            f"{structure.label()} produced non-finite entries at "
            f"gamma={np.asarray(gamma).tolist()}",
            parameter=structure.kind,
        )
    if validate:
        if not np.allclose(mat, mat.T, atol=1e-14 * max(phi, 1.0)):
            raise StructureError("correlation matrix is not symmetric")
        w = np.linalg.eigvalsh(mat)
        if w.min() <= 1e-10:
            raise StructureError(
                f"{structure.label()} gives a non-PD matrix (min eig {w.min():.3e}) "
                f"at gamma={np.asarray(gamma).tolist()}",
                parameter=structure.kind,
            )
    return mat


def random_effects_design(structure, cluster):
    """Design Z_i: optional intercept plus polynomial powers of selected columns."""
    cols = []
    if structure.re_intercept:
        cols.append(np.ones(cluster.n))
    for c in structure.re_columns:
        if not 0 <= c < cluster.p:
            raise StructureError(
                f"random-effects column {c} out of range for p={cluster.p}",
                parameter="re_columns",
            )
        for power in range(1, structure.re_poly + 1):
            cols.append(cluster.x[:, c] ** power)
    return np.column_stack(cols)


def _re_split(structure, gamma, strict=False):
    """Split a random-effects gamma into (Cholesky of V_u, sigma).

    Builders tolerate a PSD boundary (zero Cholesky diagonal: no random
    effect in that direction); the reparametrization requires the interior.
    """
    d = structure.re_dim
    m = d * (d + 1) // 2
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    if gamma.size != m + 1:
        raise StructureError(
            f"random_effects expects {m + 1} dispersion parameters, got {gamma.size}"
        )
    L = np.zeros((d, d))
    L[np.tril_indices(d)] = gamma[:m]
    sigma = float(gamma[m])
    floor = 0.0 if not strict else np.finfo(float).tiny
    if np.any(np.diag(L) < floor) or (strict and np.any(np.diag(L) == 0.0)):
        raise StructureError("Cholesky diagonal of V_u must be positive", parameter="chol")
    if sigma <= 0:
        raise StructureError("sigma must be positive", parameter="sigma")
    return L, sigma


def random_effects_cov(structure, gamma, cluster):
    """Sigma_i = Z_i V_u Z_i^T + sigma^2 I; positive definite for sigma > 0."""
    L, sigma = _re_split(structure, gamma)
    Z = random_effects_design(structure, cluster)
    ZL = Z @ L
    return ZL @ ZL.T + sigma**2 * np.eye(cluster.n)


def two_piece_variance(structure, gamma, cluster):
    """Diagonal variance: gamma[0] where the split covariate >= 0, else gamma[1]."""
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    if gamma.size != 2:
        raise StructureError("two_piece expects exactly two variances")
    if np.any(gamma <= 0):
        raise StructureError("two-piece variances must be positive", parameter="gamma")
    c = structure.split_column
    if not 0 <= c < cluster.p:
        raise StructureError(f"split column {c} out of range for p={cluster.p}")
    v = np.where(cluster.x[:, c] >= 0, gamma[0], gamma[1])
    return np.diag(v)


def cluster_matrix(structure, gamma, cluster, validate=False):
    """Per-cluster P_i(gamma), dispatching on the structure kind."""
    if structure.kind == "random_effects":
        return random_effects_cov(structure, gamma, cluster)
    if structure.kind == "two_piece":
        return two_piece_variance(structure, gamma, cluster)
    return build_correlation(structure, gamma, cluster.n, validate=validate)


def weight_matrix(cluster, family, beta, structure, gamma):
    """Estimating-equation weight W_i = A^{-1/2} P^{-1} A^{-1/2}.

    Computed via a Cholesky factorization of P_i; the full working
    covariance Sigma_i is never inverted directly.
    """
    v = variance_diag(cluster, family, beta)
    inv_sqrt_a = 1.0 / np.sqrt(v)
    P = cluster_matrix(structure, gamma, cluster)
    try:
        factor = cho_factor(P, lower=True)
    except np.linalg.LinAlgError as exc:
        raise StructureError(
            f"P_i is not positive definite at gamma={np.asarray(gamma).tolist()}",
            parameter=structure.kind,
        ) from exc
    p_inv = cho_solve(factor, np.eye(cluster.n))
    p_inv = 0.5 * (p_inv + p_inv.T)
    return p_inv * np.outer(inv_sqrt_a, inv_sqrt_a)


# ---------------------------------------------------------------------------
# Unconstrained reparametrization
# ---------------------------------------------------------------------------


def _interval_to_real(x, lo, hi):
    u = 2.0 * (x - lo) / (hi - lo) - 1.0
    return np.arctanh(np.clip(u, -1 + 1e-16, 1 - 1e-16))

def _real_to_interval(t, lo, hi):
    return lo + (hi - lo) * (np.tanh(t) + 1.0) / 2.0


def _pacf_to_coeffs(r):
    """Levinson-Durbin expansion of partial autocorrelations into AR coefficients."""
    a = np.zeros(0)
    for rk in r:
        a = np.concatenate((a - rk * a[::-1], [rk]))
    return a


def _coeffs_to_pacf(a):
    """Inverse Levinson-Durbin; fails when the coefficients are non-stationary."""
    a = np.array(a, dtype=float)
    r = np.zeros(a.size)
    for k in range(a.size, 0, -1):
        rk = a[-1]
        if not -1.0 < rk < 1.0:
            raise StructureError(
                f"coefficients {np.asarray(a).tolist()} violate stationarity/invertibility"
            )
        r[k - 1] = rk
        if k > 1:
            a = (a[:-1] + rk * a[-2::-1]) / (1.0 - rk * rk)
    return r


def _exch_bounds(structure):
    if structure.max_group_size is None:
        raise StructureError(
            "exchangeable structure must be bound to a dataset (max group size) "
            "before (un)packing; call structure.bind(dataset)"
        )
    n = structure.max_group_size
    lo = (-1.0 / (n - 1) if n > 1 else -1.0) + _EPS_CORR
    return lo, 1.0 - _EPS_CORR


def pack_params(structure, gamma):
    """Map an admissible gamma to unconstrained coordinates theta in R^q."""
    gamma = np.atleast_1d(np.asarray(gamma, dtype=float))
    kind = structure.kind
    if kind in _SERIAL_KINDS:
        core, phi = _split_scale(structure, gamma)
        if kind == "independence":
            theta = np.zeros(0)
        elif kind == "exchangeable":
            theta = np.array([_interval_to_real(core[0], *_exch_bounds(structure))])
        elif kind == "ar1":
            theta = np.array(
                [_interval_to_real(core[0], -1.0 + _EPS_CORR, 1.0 - _EPS_CORR)]
            )
        else:  # arma
            p = structure.ar_order
            theta = np.concatenate(
                (
                    np.arctanh(_coeffs_to_pacf(core[:p])) if p else np.zeros(0),
                    np.arctanh(_coeffs_to_pacf(-core[p:])) if structure.ma_order else np.zeros(0),
                )
            )
        if structure.has_free_scale:
            theta = np.concatenate((theta, [np.log(phi)]))
        return theta
    if kind == "random_effects":
        L, sigma = _re_split(structure, gamma, strict=True)
        d = structure.re_dim
        vals = []
        for i in range(d):
            for j in range(i + 1):
                vals.append(np.log(L[i, j]) if i == j else L[i, j])
        vals.append(np.log(sigma))
        return np.asarray(vals)
    # two_piece
    if np.any(gamma <= 0):
        raise StructureError("two-piece variances must be positive")
    return np.log(gamma)


def unpack_params(structure, theta):
    """Map any theta in R^q to an admissible gamma; total on R^q."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    if theta.size != structure.gamma_dim():
        raise StructureError(
            f"{structure.label()} expects {structure.gamma_dim()} unconstrained "
            f"coordinates, got {theta.size}"
        )
    kind = structure.kind
    if kind in _SERIAL_KINDS:
        core = theta[:-1] if structure.has_free_scale else theta
        if kind == "independence":
            gamma = np.zeros(0)
        elif kind == "exchangeable":
            gamma = np.array([_real_to_interval(core[0], *_exch_bounds(structure))])
        elif kind == "ar1":
            gamma = np.array(
                [_real_to_interval(core[0], -1.0 + _EPS_CORR, 1.0 - _EPS_CORR)]
            )
        else:
            # tanh saturates to exactly +-1 for |theta| beyond ~19; nudge the
            # partial autocorrelations inside the open interval so every theta
            # maps to a strictly stationary/invertible block
            cap = 1.0 - 1e-7
            p = structure.ar_order
            ar = _pacf_to_coeffs(np.clip(np.tanh(core[:p]), -cap, cap)) if p else np.zeros(0)
            ma = (
                -_pacf_to_coeffs(np.clip(np.tanh(core[p:]), -cap, cap))
                if structure.ma_order
                else np.zeros(0)
            )
            gamma = np.concatenate((ar, ma))
        if structure.has_free_scale:
            gamma = np.concatenate((gamma, [_exp_safe(theta[-1])]))
        return gamma
    if kind == "random_effects":
        d = structure.re_dim
        vals = []
        k = 0
        for i in range(d):
            for j in range(i + 1):
                vals.append(_exp_safe(theta[k]) if i == j else theta[k])
                k += 1
        vals.append(_exp_safe(theta[k]))
        return np.asarray(vals)
    return _exp_safe(theta)


def neutral_gamma(structure):
    """The gamma at theta = 0; a sensible optimizer start."""
    return unpack_params(structure, np.zeros(structure.gamma_dim()))


def validate_gamma(structure, gamma):
    """Raise StructureError when gamma violates the structure's invariants."""
    pack_params(structure, gamma)  # the reparametrization checks everything
