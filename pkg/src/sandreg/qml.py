"""Fixed-effects estimation: weighted estimating equations at fixed dispersion.

For each cluster the estimating function is ``D_i^T W_i (Y_i - mu_i)``
with ``D_i`` the mean Jacobian and ``W_i = A_i^{-1/2} P_i^{-1} A_i^{-1/2}``
the working weight.  (The transpose on ``D_i`` is forced by dimensions:
the summand must be a p-vector.)  The linear model solves in closed form;
otherwise Fisher scoring iterates

    beta <- beta + (sum_i D_i^T W_i D_i)^{-1} sum_i D_i^T W_i R_i

with step halving whenever the score norm fails to decrease.

Internally clusters are grouped by size and all per-cluster linear algebra
runs batched over each group; per-cluster terms are accumulated in fixed
cluster order, so results are deterministic for a given input.
"""

import weakref
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import covariance as cov
from .data import ClusterDataset
from .errors import ConvergenceError, RankDeficiencyError, StructureError
from .families import gaussian

_SEPARATION_ETA = 30.0  # |X beta| beyond this marks a boundary-mean observation
_SEPARATION_FRACTION = 0.05


# ---------------------------------------------------------------------------
# Size-grouped views of a dataset
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class _GroupDesign:
    n: int
    idx: np.ndarray  # (G,) cluster indices in dataset order
    Y: np.ndarray  # (G, n)
    X: np.ndarray  # (G, n, p)


_GROUP_CACHE = weakref.WeakKeyDictionary()


def group_by_size(dataset):
    """Clusters stacked by common group size; cached per dataset."""
    got = _GROUP_CACHE.get(dataset)
    if got is not None:
        return got
    by_n = {}
    for i, c in enumerate(dataset.clusters):
        by_n.setdefault(c.n, []).append(i)
    groups = []
    for n in sorted(by_n):
        idx = np.asarray(by_n[n], dtype=int)
        Y = np.stack([dataset.clusters[i].y for i in idx])
        X = np.stack([dataset.clusters[i].x for i in idx])
        groups.append(_GroupDesign(n=n, idx=idx, Y=Y, X=X))
    _GROUP_CACHE[dataset] = groups
    return groups


# ---------------------------------------------------------------------------
# Working weights per group
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class _GroupWeights:
    shared: bool
    P: np.ndarray  # (n, n) if shared else (G, n, n)
    Pinv: np.ndarray
    logdet: np.ndarray  # scalar if shared else (G,)


def _invert_spd_stack(P, what, indices):
    """Batched Cholesky inverse of a stack of SPD matrices."""
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        bad = []
        for g in range(P.shape[0]):
            try:
                np.linalg.cholesky(P[g])
            except np.linalg.LinAlgError:
                bad.append(int(indices[g]))
        raise StructureError(
            f"{what} not positive definite for clusters {bad}", parameter=what
        )
    eye = np.broadcast_to(np.eye(P.shape[-1]), P.shape)
    Linv = np.linalg.solve(L, eye.copy())
    Pinv = np.swapaxes(Linv, -1, -2) @ Linv
    logdet = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=-1)
    return Pinv, logdet


def build_weights(structure, gamma, dataset, validate=False):
    """Per-group pseudo-correlation matrices, inverses and log-determinants."""
    groups = group_by_size(dataset)
    out = []
    if not structure.data_dependent:
        per_size = {}
        for g in groups:
            if g.n not in per_size:
                P = cov.build_correlation(structure, gamma, g.n, validate=validate)
                try:
                    factor = cho_factor(P, lower=True)
                except np.linalg.LinAlgError as exc:
                    raise StructureError(
                        f"{structure.label()} gives a non-PD matrix at "
                        f"gamma={np.asarray(gamma).tolist()} for n={g.n}",
                        parameter=structure.kind,
                    ) from exc
                Pinv = cho_solve(factor, np.eye(g.n))
                Pinv = 0.5 * (Pinv + Pinv.T)
                logdet = 2.0 * np.log(np.diag(factor[0])).sum()
                per_size[g.n] = _GroupWeights(True, P, Pinv, np.float64(logdet))
            out.append(per_size[g.n])
        return out
    for g in groups:
        if structure.kind == "two_piece":
            gam = np.atleast_1d(np.asarray(gamma, dtype=float))
            if gam.size != 2 or np.any(gam <= 0):
                raise StructureError("two_piece expects two positive variances")
            v = np.where(g.X[:, :, structure.split_column] >= 0, gam[0], gam[1])
            P = np.zeros((len(g.idx), g.n, g.n))
            ii = np.arange(g.n)
            P[:, ii, ii] = v
            Pinv = np.zeros_like(P)
            Pinv[:, ii, ii] = 1.0 / v
            logdet = np.log(v).sum(axis=1)
            out.append(_GroupWeights(False, P, Pinv, logdet))
            continue
        # random effects: P = Z V Z^T + sigma^2 I built per cluster
        L, sigma = cov._re_split(structure, gamma)
        cols = [np.ones((len(g.idx), g.n))] if structure.re_intercept else []
        for c in structure.re_columns:
            if not 0 <= c < g.X.shape[2]:
                raise StructureError(
                    f"random-effects column {c} out of range", parameter="re_columns"
                )
            for power in range(1, structure.re_poly + 1):
                cols.append(g.X[:, :, c] ** power)
        Z = np.stack(cols, axis=2)  # (G, n, d)
        ZL = Z @ L
        P = ZL @ np.swapaxes(ZL, 1, 2) + sigma**2 * np.eye(g.n)
        Pinv, logdet = _invert_spd_stack(P, "random-effects covariance", g.idx)
        out.append(_GroupWeights(False, P, Pinv, logdet))
    return out


# ---------------------------------------------------------------------------
# Score assembly
# ---------------------------------------------------------------------------


def _group_terms(group, weights, family, beta):
    """Everything the estimating equation needs for one size group at beta."""
    eta = group.X @ beta
    mu = family.inverse(eta)
    dmu = family.dmu_deta(mu)
    v = family.variance(mu)
    a = 1.0 / np.sqrt(v)
    D = dmu[:, :, None] * group.X
    R = group.Y - mu
    aD = a[:, :, None] * D
    aR = a * R
    # Pinv broadcasts over the group axis whether shared (n, n) or stacked
    WaD = np.matmul(weights.Pinv, aD)
    WaR = np.matmul(weights.Pinv, aR[..., None])[..., 0]
    p = aD.shape[2]
    M = np.tensordot(aD.reshape(-1, p), WaD.reshape(-1, p), axes=(0, 0))
    s = (aD * WaR[..., None]).sum(axis=1)
    return {"eta": eta, "mu": mu, "a": a, "D": D, "R": R, "M": M, "s": s}


def _assemble(groups, weight_list, family, beta):
    p = groups[0].X.shape[2]
    M = np.zeros((p, p))
    score = np.zeros(p)
    parts = []
    for g, w in zip(groups, weight_list):
        t = _group_terms(g, w, family, beta)
        M += t["M"]
        score += t["s"].sum(axis=0)
        parts.append(t)
    return M, score, parts


# ---------------------------------------------------------------------------
# Solutions
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class QmlSolution:
    """A solved estimating equation plus the per-cluster caches downstream
    algorithms need (mean Jacobians, weights, residuals, score pieces and
    the assembled normal matrix)."""

    beta: np.ndarray
    score_norm: float
    iterations: int
    converged: bool
    separation_flag: bool
    cond: float
    M: np.ndarray
    Minv: np.ndarray
    dataset: ClusterDataset
    family: object
    structure: object
    gamma: np.ndarray
    _groups: list  # (group, weights, terms) triples at the solution

    @property
    def n_clusters(self):
        return self.dataset.n_clusters

    @property
    def p(self):
        return self.beta.size

    def score_pieces(self):
        """(I, p) array: per-cluster D_i^T W_i R_i in dataset cluster order."""
        out = np.empty((self.n_clusters, self.p))
        for g, _, t in self._groups:
            out[g.idx] = t["s"]
        return out

    def cluster_parts(self, i):
        """Per-cluster pieces (D_i, W_i, W_i^{-1}, R_i, s_i) for cluster ``i``."""
        for g, w, t in self._groups:
            pos = np.nonzero(g.idx == i)[0]
            if pos.size:
                k = int(pos[0])
                a = t["a"][k]
                Pinv = w.Pinv if w.shared else w.Pinv[k]
                P = w.P if w.shared else w.P[k]
                W = Pinv * np.outer(a, a)
                Winv = P * np.outer(1.0 / a, 1.0 / a)
                return t["D"][k], W, Winv, t["R"][k], t["s"][k]
        raise IndexError(f"cluster {i} not found")


def _tolerance(beta, rel_tol):
    return rel_tol * (1.0 + np.max(np.abs(beta)))


def _finalize(
    dataset, family, structure, gamma, groups, weight_list, beta, iters, rel_tol,
    assembled=None, stalled=False,
):
    if assembled is None:
        assembled = _assemble(groups, weight_list, family, beta)
    M, score, parts = assembled
    score_norm = float(np.max(np.abs(score))) if score.size else 0.0
    cond = float(np.linalg.cond(M))
    try:
        factor = cho_factor(M, lower=True)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError(
            f"normal matrix singular (condition estimate {cond:.3e})", condition=cond
        ) from exc
    Minv = cho_solve(factor, np.eye(M.shape[0]))
    Minv = 0.5 * (Minv + Minv.T)
    separation = False
    if family.variance_name == "binomial":
        total = sum(p["eta"].size for p in parts)
        hits = sum(int(np.sum(np.abs(p["eta"]) > _SEPARATION_ETA)) for p in parts)
        separation = hits / total >= _SEPARATION_FRACTION
    return QmlSolution(
        beta=beta,
        score_norm=score_norm,
        iterations=iters,
        converged=stalled or score_norm <= _tolerance(beta, rel_tol),
        separation_flag=separation,
        cond=cond,
        M=M,
        Minv=Minv,
        dataset=dataset,
        family=family,
        structure=structure,
        gamma=np.atleast_1d(np.asarray(gamma, dtype=float)) if gamma is not None else None,
        _groups=[(g, w, t) for g, w, t in zip(groups, weight_list, parts)],
    )


def fisher_scoring(
    dataset,
    family,
    structure,
    gamma,
    beta_init=None,
    rel_tol=1e-8,
    max_iter=100,
    max_halvings=20,
):
    """Solve the weighted estimating equation by Fisher scoring.

    Stops when the infinity norm of the score falls below
    ``rel_tol * (1 + |beta|_inf)``.  When a full step fails to reduce the
    score norm the step is halved, up to ``max_halvings`` times.  Raises
    :class:`ConvergenceError` (carrying the last iterate and score norm)
    after ``max_iter`` updates without convergence.
    """
    groups = group_by_size(dataset)
    p = dataset.p
    weight_list = build_weights(structure, gamma, dataset)

    if beta_init is None:
        if family.link_name == "identity" and family.constant_variance:
            beta = np.zeros(p)
        else:
            # pilot: independence working correlation from a zero start
            pilot = fisher_scoring(
                dataset,
                family,
                cov.independence(),
                np.zeros(0),
                beta_init=np.zeros(p),
                rel_tol=min(1e-6, rel_tol * 100),
                max_iter=max_iter,
            )
            beta = pilot.beta
    else:
        beta = np.asarray(beta_init, dtype=float).copy()
        if beta.shape != (p,):
            raise ValueError(f"beta_init must have shape ({p},)")

    assembled = _assemble(groups, weight_list, family, beta)
    M, score = assembled[0], assembled[1]
    norm = np.max(np.abs(score))
    for it in range(1, max_iter + 1):
        if norm <= _tolerance(beta, rel_tol):
            return _finalize(
                dataset, family, structure, gamma, groups, weight_list, beta, it - 1,
                rel_tol, assembled=assembled,
            )
        try:
            factor = cho_factor(M, lower=True)
        except np.linalg.LinAlgError as exc:
            raise RankDeficiencyError(
                f"normal matrix singular at iteration {it} "
                f"(condition estimate {np.linalg.cond(M):.3e})",
                condition=float(np.linalg.cond(M)),
            ) from exc
        step = cho_solve(factor, score)
        if np.max(np.abs(step)) <= 1e-12 * (1.0 + np.max(np.abs(beta))):
            # score has hit its floating-point floor (ill-conditioned weights
            # amplify roundoff past the nominal tolerance); the iterate
            # cannot improve further
            return _finalize(
                dataset, family, structure, gamma, groups, weight_list, beta, it - 1,
                rel_tol, assembled=assembled, stalled=True,
            )
        scale = 1.0
        improved = False
        for _ in range(max_halvings + 1):
            cand = beta + scale * step
            assembled_new = _assemble(groups, weight_list, family, cand)
            norm_new = np.max(np.abs(assembled_new[1]))
            if norm_new < norm:
                improved = True
                break
            scale *= 0.5
        if not improved:
            # even the smallest halved step cannot reduce the score
            if norm <= 1e3 * _tolerance(beta, rel_tol):
                # already within a few orders of the target: the iterate is
                # at its floating-point stationary point
                return _finalize(
                    dataset, family, structure, gamma, groups, weight_list, beta,
                    it - 1, rel_tol, assembled=assembled, stalled=True,
                )
            raise ConvergenceError(
                f"Fisher scoring stalled at score norm {norm:.3e}",
                last_beta=beta,
                score_norm=float(norm),
            )
        beta, assembled, norm = cand, assembled_new, norm_new
        M, score = assembled[0], assembled[1]
    if norm <= _tolerance(beta, rel_tol):
        return _finalize(
            dataset, family, structure, gamma, groups, weight_list, beta, max_iter,
            rel_tol, assembled=assembled,
        )
    raise ConvergenceError(
        f"Fisher scoring did not converge in {max_iter} iterations "
        f"(score norm {norm:.3e})",
        last_beta=beta,
        score_norm=float(norm),
    )


def solve_wls(dataset, structure, gamma, rel_tol=1e-10):
    """Closed-form weighted least squares (identity link, unit variance).

    beta(gamma) = (sum_i X_i^T Sigma_i^{-1} X_i)^{-1} sum_i X_i^T Sigma_i^{-1} Y_i,
    solved through a Cholesky factorization; the solution's ``cond`` field
    reports the normal matrix's condition number.
    """
    return fisher_scoring(
        dataset, gaussian(), structure, gamma, beta_init=np.zeros(dataset.p),
        rel_tol=rel_tol, max_iter=3,
    )


def solve_wls_weighted(dataset, weight_matrices, rel_tol=1e-10):
    """Weighted least squares with explicit per-cluster SPD weights W_i.

    Covers weighting schemes outside any parametric structure.  The
    returned solution carries the same caches as a structure-based fit, so
    leave-one-out machinery applies unchanged.
    """
    if len(weight_matrices) != dataset.n_clusters:
        raise ValueError("need exactly one weight matrix per cluster")
    groups = group_by_size(dataset)
    weight_list = []
    for g in groups:
        W = np.stack([np.asarray(weight_matrices[i], dtype=float) for i in g.idx])
        # store W in Pinv's slot (and W^{-1} in P's): unit variance function
        # makes the downstream algebra identical to a structure-based fit
        Winv, neg_logdet = _invert_spd_stack(W, "weight matrix", g.idx)
        weight_list.append(_GroupWeights(False, Winv, W, -neg_logdet))
    family = gaussian()
    beta = np.zeros(dataset.p)
    M, score, _ = _assemble(groups, weight_list, family, beta)
    try:
        factor = cho_factor(M, lower=True)
    except np.linalg.LinAlgError as exc:
        raise RankDeficiencyError(
            f"normal matrix singular (condition estimate {np.linalg.cond(M):.3e})",
            condition=float(np.linalg.cond(M)),
        ) from exc
    beta = cho_solve(factor, score)
    return _finalize(
        dataset, family, None, None, groups, weight_list, beta, 1, rel_tol
    )


def estimating_equation(dataset, family, structure, gamma, beta):
    """Stacked estimating function sum_i D_i^T W_i (Y_i - mu_i(beta))."""
    groups = group_by_size(dataset)
    weight_list = build_weights(structure, gamma, dataset)
    _, score, _ = _assemble(groups, weight_list, family, np.asarray(beta, dtype=float))
    return score
