"""GLM families: link functions, mean models and variance functions.

A family couples a strictly increasing link ``g`` with a variance function
``v``.  The mean model for a cluster is ``mu_i = g^{-1}(X_i beta)``; its
Jacobian with respect to ``beta`` has entries ``X_jk / g'(mu_j)``, and the
variance-function diagonal is ``A_i = diag(v(mu_i))``.

Three standard pairings are provided (gaussian-identity, binomial-logit,
poisson-log) and any link may be combined with any variance function via
:func:`custom_family` for experimentation.

Numerical notes
---------------
* The logit inverse uses the two-branch form (the exponential argument is
  always <= 0), so it never overflows and never returns NaN for finite
  input.  Outputs are nudged into the open interval (0, 1): in float64,
  ``expit(eta)`` rounds to exactly 1.0 for eta >= ~37, which would put the
  mean on the boundary of the binomial variance function's domain.
* The log inverse caps the linear predictor at 700 so ``exp`` stays finite.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateMeanError

_TINY_MEAN = np.finfo(float).tiny  # lower clip for means pinned at a boundary
_ONE_MINUS = 1.0 - np.finfo(float).eps  # largest double strictly below 1
_VAR_FLOOR = 1e-300  # below this, v(mu) is treated as degenerate


def _stable_expit(eta):
    eta = np.asarray(eta, dtype=float)
    out = np.empty_like(eta)
    pos = eta >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-eta[pos]))
    e = np.exp(eta[~pos])
    out[~pos] = e / (1.0 + e)
    return np.clip(out, _TINY_MEAN, _ONE_MINUS)


def _stable_logit(mu):
    mu = np.asarray(mu, dtype=float)
    return np.log(mu) - np.log1p(-mu)


def _capped_exp(eta):
    return np.exp(np.minimum(np.asarray(eta, dtype=float), 700.0))


@dataclass(frozen=True, eq=False)
class GlmFamily:
    """A link / variance-function pairing.

    Parameters
    ----------
    name : str
        Display name, e.g. ``"binomial"``.
    link_name : str
        One of ``identity``, ``logit``, ``log``.
    variance_name : str
        One of ``constant``, ``binomial``, ``poisson``.
    link, inverse : callable
        ``g`` and ``g^{-1}``, applied component-wise.
    dmu_deta : callable
        Derivative of the inverse link as a function of the *mean*:
        ``1 / g'(mu)``.  (Identity: 1; logit: mu (1 - mu); log: mu.)
    variance : callable
        Variance function ``v(mu)``.
    """

    name: str
    link_name: str
    variance_name: str
    link: callable
    inverse: callable
    dmu_deta: callable
    variance: callable

    @property
    def constant_variance(self):
        return self.variance_name == "constant"


_LINKS = {
    "identity": (
        lambda mu: np.asarray(mu, dtype=float),
        lambda eta: np.asarray(eta, dtype=float),
        lambda mu: np.ones_like(np.asarray(mu, dtype=float)),
    ),
    "logit": (_stable_logit, _stable_expit, lambda mu: mu * (1.0 - mu)),
    "log": (np.log, _capped_exp, lambda mu: np.asarray(mu, dtype=float)),
}

_VARIANCES = {
    "constant": lambda mu: np.ones_like(np.asarray(mu, dtype=float)),
    "binomial": lambda mu: mu * (1.0 - mu),
    "poisson": lambda mu: np.asarray(mu, dtype=float),
}


def custom_family(link, variance, name=None):
    """Pair any supported link with any supported variance function."""
    if link not in _LINKS:
        raise ValueError(f"unknown link {link!r}; choose from {sorted(_LINKS)}")
    if variance not in _VARIANCES:
        raise ValueError(
            f"unknown variance function {variance!r}; choose from {sorted(_VARIANCES)}"
        )
    g, ginv, dmu = _LINKS[link]
    return GlmFamily(
        name=name or f"{variance}-{link}",
        link_name=link,
        variance_name=variance,
        link=g,
        inverse=ginv,
        dmu_deta=dmu,
        variance=_VARIANCES[variance],
    )


def gaussian():
    """Identity link, constant unit variance function."""
    return custom_family("identity", "constant", name="gaussian")


def binomial():
    """Logit link, variance function mu (1 - mu)."""
    return custom_family("logit", "binomial", name="binomial")


def poisson():
    """Log link, variance function mu."""
    return custom_family("log", "poisson", name="poisson")


def family_by_name(name, link=None):
    """Family from config-style names, with an optional non-canonical link."""
    canonical = {"gaussian": gaussian, "binomial": binomial, "poisson": poisson}
    if name not in canonical:
        raise ValueError(f"unknown family {name!r}; choose from {sorted(canonical)}")
    fam = canonical[name]()
    if link is None or link == fam.link_name:
        return fam
    return custom_family(link, fam.variance_name, name=f"{name}-{link}")


# ---------------------------------------------------------------------------
# Mean model operations
# ---------------------------------------------------------------------------


def mean_vector(cluster, family, beta):
    """Cluster mean ``g^{-1}(X_i beta)``, component-wise.

    For the logit link every component is strictly inside (0, 1); finite
    input never produces NaN.
    """
    eta = cluster.x @ np.asarray(beta, dtype=float)
    return family.inverse(eta)


def mean_jacobian(cluster, family, beta):
    """Jacobian of the cluster mean in ``beta``: entry (j, k) is X_jk / g'(mu_j)."""
    mu = mean_vector(cluster, family, beta)
    return family.dmu_deta(mu)[:, None] * cluster.x


def variance_diag(cluster, family, beta):
    """Variance-function diagonal ``v(g^{-1}(X_i beta))`` as a vector.

    Raises
    ------
    DegenerateMeanError
        If any ``v(mu_j)`` falls to ``1e-300`` or below (mean pinned at the
        boundary of the variance function's domain).
    """
    mu = mean_vector(cluster, family, beta)
    v = family.variance(mu)
    if np.any(v <= _VAR_FLOOR):
        j = int(np.argmin(v))
        raise DegenerateMeanError(
            f"variance function degenerate at observation {j}: v(mu)={v[j]:.3e}"
        )
    return v
