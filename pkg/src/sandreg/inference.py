"""Jackknife variance for fitted fixed effects, dispersion-model selection,
and delta-method variance for smooth transforms.

The variance estimator leaves one cluster out at a time and approximates
both re-estimations with one quadratic step each about the full-sample fit:

* the fixed-effect step reuses the Woodbury leave-one-out update
  ``beta_check_(-i) - beta_hat = -T_i D_i^T W_i R_i``;
* the dispersion step is a Newton step on the deleted-sample objective,
  ``theta_(-i) - theta_hat = -H^{-1} (grad L_(-i) - grad term_i)`` in
  unconstrained coordinates.  All derivatives are central finite
  differences with per-coordinate step ``1e-4 (1 + |theta|)``.  The Hessian
  is computed once at theta_hat, shared across clusters, and regularized to
  positive definite by flooring its eigenvalues at ``1e-8 ||H||``.  The
  deleted-sample gradient uses the objective's per-cluster decomposition
  (dropping cluster i's own term), so all cluster gradients come from the
  same 2q evaluations.

  Sign convention: the update applied is the one that *decreases* the
  deleted-sample objective.  Because the full-sample gradient vanishes at
  theta_hat, this equals a Newton step driven by the gradient of
  (L_(-i) - L), up to the sign a descent direction requires.

* the dispersion step then perturbs the weight matrices,
  ``Delta_(-i) = W_(-i)(gamma_(-i)) - W_(-i)(gamma_hat)`` at fixed beta_hat,
  and the combined fixed-effect perturbation is

      beta_(-i) - beta_hat =
          (I_p - T_i D_(-i)^T Delta D_(-i)) (beta_check_(-i) - beta_hat)
          + T_i D_(-i)^T Delta R_(-i).

The estimator is ``V_hat = (I-1)/I sum_i outer(beta_(-i) - beta_hat)``,
positive semidefinite by construction.  With ``steps=0`` the dispersion is
held fixed and the estimator reduces exactly to the rescaled sandwich-loss
matrix.  ``steps > 1`` re-centers the Newton gradient at each new iterate
(Hessian kept from theta_hat); useful in very small samples at a real
computational cost.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import covariance as cov
from .errors import ConvergenceError, DataError, SandregError
from .objectives import (
    DispersionObjective,
    OptimizerSettings,
    eqml_terms,
    gee_terms,
    minimize_dispersion,
)
from .qml import build_weights, fisher_scoring, group_by_size
from .sandwich_loss import build_loo_cache, large_sample_from_solution

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class VarianceEstimate:
    """Jackknife variance of the fitted fixed effects.

    ``vhat = (I-1)/I sum_i outer(loo_deltas_i)`` with ``loo_deltas`` the
    per-cluster estimates of ``beta_(-i) - beta_hat``.
    """

    vhat: np.ndarray
    loo_deltas: np.ndarray
    newton_steps_used: int
    gamma_step_max: float
    fallback_clusters: tuple


@dataclass(frozen=True, eq=False)
class ModelCandidate:
    """One working-covariance model in a selection run."""

    label: str
    structure: object
    warm_start: np.ndarray = None


@dataclass(eq=False)
class SelectionRow:
    label: str
    gamma_hat: np.ndarray
    cvc: float
    selected: bool
    error: str = None


# ---------------------------------------------------------------------------
# Per-cluster objective terms as a function of theta
# ---------------------------------------------------------------------------


def _terms_function(fit, dataset, family, structure):
    """theta -> (I,) per-cluster objective terms, for the fitted objective."""
    kind = fit.objective.kind
    warm = {"beta": fit.beta_hat}
    if kind in ("sandwich", "sandwich_large_sample"):
        c = fit.objective.target

        def terms(theta):
            gamma = cov.unpack_params(structure, theta)
            sol = fisher_scoring(dataset, family, structure, gamma, beta_init=warm["beta"])
            warm["beta"] = sol.beta
            if kind == "sandwich":
                cache = build_loo_cache(sol)
                return (cache.loo_delta @ c) ** 2
            pieces = sol.score_pieces() @ sol.Minv
            return (pieces @ c) ** 2

        return terms
    if kind == "eqml":
        return lambda theta: eqml_terms(
            dataset, family, structure, cov.unpack_params(structure, theta), fit.beta_hat
        )
    if kind == "gee":
        return lambda theta: gee_terms(
            dataset, family, structure, cov.unpack_params(structure, theta), fit.beta_hat
        )
    raise SandregError(f"objective kind {kind!r} has no dispersion to re-estimate")


def _gradients(terms, theta0, h):
    """Gradient of the total and of every per-cluster term (central differences)."""
    q = theta0.size
    grad_total = np.zeros(q)
    plus = []
    minus = []
    for k in range(q):
        e = np.zeros(q)
        e[k] = h[k]
        tp = terms(theta0 + e)
        tm = terms(theta0 - e)
        plus.append(tp)
        minus.append(tm)
        grad_total[k] = (tp.sum() - tm.sum()) / (2.0 * h[k])
    grad_terms = np.stack(
        [(tp - tm) / (2.0 * hk) for tp, tm, hk in zip(plus, minus, h)], axis=1
    )  # (I, q)
    return grad_total, grad_terms, plus, minus


def _hessian(terms, theta0, h, L0, plus_totals, minus_totals):
    q = theta0.size
    H = np.zeros((q, q))
    for k in range(q):
        H[k, k] = (plus_totals[k] - 2.0 * L0 + minus_totals[k]) / h[k] ** 2
    for j in range(q):
        for k in range(j + 1, q):
            ej = np.zeros(q)
            ek = np.zeros(q)
            ej[j] = h[j]
            ek[k] = h[k]
            val = (
                terms(theta0 + ej + ek).sum()
                - terms(theta0 + ej - ek).sum()
                - terms(theta0 - ej + ek).sum()
                + terms(theta0 - ej - ek).sum()
            ) / (4.0 * h[j] * h[k])
            H[j, k] = H[k, j] = val
    return H


def _floor_spd(H):
    """Inverse of the Hessian on its informative eigenspace.

    Eigenvalues are floored at 1e-8 ||H||; directions *below* the floor
    carry no curvature information (exactly flat scale rays produce them),
    so the Newton step is projected out of them rather than amplified by
    the reciprocal floor.
    """
    w, V = np.linalg.eigh(0.5 * (H + H.T))
    top = np.max(np.abs(w))
    if top <= 0.0 or not np.isfinite(top):
        return None
    keep = w > 1e-8 * top
    if not np.any(keep):
        return None
    winv = np.where(keep, 1.0 / np.maximum(w, 1e-8 * top), 0.0)
    return (V * winv) @ V.T


# ---------------------------------------------------------------------------
# Weight-perturbation sums
# ---------------------------------------------------------------------------


class _WeightSums:
    """Totals sum_i D_i^T W(gamma) D_i and sum_i D_i^T W(gamma) R_i at fixed
    beta_hat, re-evaluable at new gamma values, plus cluster-level terms.

    For covariate-independent structures the cross moments are precomputed
    once, so each new gamma costs O(n^2 p^2) regardless of cluster count.
    """

    def __init__(self, solution, structure):
        self.solution = solution
        self.structure = structure
        self.shared = not structure.data_dependent
        self.p = solution.p
        self._groups = solution._groups
        if self.shared:
            # one group per distinct size, so the cross moments key on n
            self._C4 = {}  # n -> (n, p, n, p)
            self._C3 = {}  # n -> (n, p, n)
            self._aD = {}  # n -> (G, n, p)
            self._aR = {}  # n -> (G, n)
            for g, w, t in self._groups:
                aD = t["a"][:, :, None] * t["D"]
                aR = t["a"] * t["R"]
                self._C4[g.n] = np.einsum("gja,gkb->jakb", aD, aD, optimize=True)
                self._C3[g.n] = np.einsum("gja,gk->jak", aD, aR, optimize=True)
                self._aD[g.n] = aD
                self._aR[g.n] = aR

    def totals_and_cluster(self, gamma, i):
        """(M_total, b_total, m_i, s_i) with weights built at ``gamma``."""
        sol = self.solution
        if self.shared:
            M = np.zeros((self.p, self.p))
            b = np.zeros(self.p)
            m_i = s_i = None
            for g, _, t in self._groups:
                P = cov.build_correlation(self.structure, gamma, g.n)
                Pinv = np.linalg.inv(P)
                M += np.tensordot(Pinv, self._C4[g.n], axes=([0, 1], [0, 2]))
                b += np.tensordot(Pinv, self._C3[g.n], axes=([0, 1], [0, 2]))
                pos = np.nonzero(g.idx == i)[0]
                if pos.size:
                    k = int(pos[0])
                    aD = self._aD[g.n][k]
                    aR = self._aR[g.n][k]
                    m_i = aD.T @ Pinv @ aD
                    s_i = aD.T @ Pinv @ aR
            return M, b, m_i, s_i
        weights = build_weights(self.structure, gamma, sol.dataset)
        M = np.zeros((self.p, self.p))
        b = np.zeros(self.p)
        m_i = s_i = None
        for (g, _, t), w in zip(self._groups, weights):
            aD = t["a"][:, :, None] * t["D"]
            aR = t["a"] * t["R"]
            M += np.einsum("gja,gjk,gkb->ab", aD, w.Pinv, aD, optimize=True)
            b += np.einsum("gja,gjk,gk->a", aD, w.Pinv, aR, optimize=True)
            pos = np.nonzero(g.idx == i)[0]
            if pos.size:
                k = int(pos[0])
                m_i = np.einsum("ja,jk,kb->ab", aD[k], w.Pinv[k], aD[k], optimize=True)
                s_i = aD[k].T @ w.Pinv[k] @ aR[k]
        return M, b, m_i, s_i


# ---------------------------------------------------------------------------
# The jackknife estimator
# ---------------------------------------------------------------------------


def jackknife_variance(fit, dataset, family, structure, c, steps=1):
    """Leave-one-cluster-out variance of the fitted fixed effects.

    ``steps`` counts Newton updates of the per-cluster dispersion
    perturbation: 0 freezes the dispersion (the estimator then equals the
    rescaled sandwich-loss matrix exactly), 1 is the default single step,
    larger values re-center the gradient at each new iterate.
    """
    I = dataset.n_clusters
    p = dataset.p
    if I < p + 2:
        raise DataError(f"jackknife needs at least p + 2 = {p + 2} clusters, got {I}")
    if not fit.converged:
        raise ConvergenceError("refusing to jackknife an unconverged fit")
    c = np.atleast_1d(np.asarray(c, dtype=float))
    structure = structure.bind(dataset)

    sol = fit.solution
    cache = build_loo_cache(sol)
    base_delta = cache.loo_delta  # beta_check_(-i) - beta_hat
    q = structure.gamma_dim()
    # the scale coordinate is pinned for variance-targeted fits (the loss is
    # exactly scale invariant), so it is excluded from the dispersion step too
    reduce_scale = (
        fit.objective.kind in ("sandwich", "sandwich_large_sample")
        and structure.has_free_scale
    )
    q_active = q - 1 if reduce_scale else q

    fallback = []
    gamma_step_max = 0.0
    if steps == 0 or q_active == 0 or fit.objective.kind == "none":
        deltas = base_delta
        used = 0
    else:
        terms_full = _terms_function(fit, dataset, family, structure)
        theta_full = np.asarray(fit.theta_hat, dtype=float)
        if reduce_scale:
            tail = theta_full[-1:]

            def to_full(ta):
                return np.concatenate((ta, tail))

            def terms(ta):
                return terms_full(to_full(ta))

            theta0 = theta_full[:-1]
        else:

            def to_full(ta):
                return ta

            terms = terms_full
            theta0 = theta_full
        h = 1e-4 * (1.0 + np.abs(theta0))
        t0 = terms(theta0)
        L0 = t0.sum()
        grad_total, grad_terms, plus, minus = _gradients(terms, theta0, h)
        H = _hessian(
            terms, theta0, h, L0, [tp.sum() for tp in plus], [tm.sum() for tm in minus]
        )
        Hinv = _floor_spd(H)
        used = steps
        if Hinv is None:
            logger.warning(
                "dispersion Hessian vanished; holding gamma fixed in the jackknife"
            )
            deltas = base_delta
            fallback = list(range(I))
            used = 0
        else:
            sums = _WeightSums(sol, structure)
            M_hat = sol.M
            s_hat = sol.score_pieces()
            b_hat = s_hat.sum(axis=0)
            m_hat = _cluster_normal_terms(sol)
            deltas = np.empty((I, p))
            for i in range(I):
                dtheta = _capped(-Hinv @ (grad_total - grad_terms[i]))
                theta_i = theta0 + dtheta
                for _ in range(1, steps):
                    g_tot_i, g_terms_i, _, _ = _gradients(terms, theta_i, h)
                    theta_i = theta_i + _capped(-Hinv @ (g_tot_i - g_terms_i[i]))
                gamma_i = cov.unpack_params(structure, to_full(theta_i))
                gamma_step_max = max(
                    gamma_step_max, float(np.max(np.abs(gamma_i - fit.gamma_hat)))
                )
                M2, b2, m2_i, s2_i = sums.totals_and_cluster(gamma_i, i)
                q1 = (M2 - m2_i) - (M_hat - m_hat[i])
                q2 = (b2 - s2_i) - (b_hat - s_hat[i])
                T_i = cache.T[i]
                deltas[i] = (np.eye(p) - T_i @ q1) @ base_delta[i] + T_i @ q2

    vhat = (I - 1) / I * (deltas.T @ deltas)
    w = np.linalg.eigvalsh(0.5 * (vhat + vhat.T))
    if w.min() < -1e-10 * max(float(w.max()), 1.0):
        raise SandregError("jackknife variance lost positive semidefiniteness")
    return VarianceEstimate(
        vhat=vhat,
        loo_deltas=deltas,
        newton_steps_used=used,
        gamma_step_max=gamma_step_max,
        fallback_clusters=tuple(fallback),
    )


_MAX_DISPERSION_STEP = 5.0  # (unconstrained coords) leave-one-out steps are O(1/I)


def _capped(step):
    size = np.max(np.abs(step)) if step.size else 0.0
    if size > _MAX_DISPERSION_STEP:
        logger.debug("capping a leave-one-out dispersion step of size %.2e", size)
        return step * (_MAX_DISPERSION_STEP / size)
    return step


def _cluster_normal_terms(solution):
    """(I, p, p) per-cluster D_i^T W_i D_i at the solution."""
    I = solution.n_clusters
    p = solution.p
    out = np.empty((I, p, p))
    for g, w, t in solution._groups:
        aD = t["a"][:, :, None] * t["D"]
        if w.shared:
            out[g.idx] = np.einsum("gja,jk,gkb->gab", aD, w.Pinv, aD, optimize=True)
        else:
            out[g.idx] = np.einsum("gja,gjk,gkb->gab", aD, w.Pinv, aD, optimize=True)
    return out


# ---------------------------------------------------------------------------
# Model selection and the delta method
# ---------------------------------------------------------------------------


def _warm_theta(prev_structure, prev_gamma, structure):
    """Embed a previously fitted gamma into a (possibly larger) structure."""
    if prev_gamma is None or prev_structure is None:
        return None
    try:
        if prev_structure.kind == structure.kind == "arma":
            prev_theta = cov.pack_params(prev_structure, prev_gamma)
            p0, q0 = prev_structure.ar_order, prev_structure.ma_order
            p1, q1 = structure.ar_order, structure.ma_order
            if p1 < p0 or q1 < q0:
                return None
            ar = np.concatenate((prev_theta[:p0], np.zeros(p1 - p0)))
            ma = np.concatenate((prev_theta[p0 : p0 + q0], np.zeros(q1 - q0)))
            tail = prev_theta[p0 + q0 :] if structure.has_free_scale == prev_structure.has_free_scale else np.zeros(int(structure.has_free_scale))
            return np.concatenate((ar, ma, tail))
        if (
            prev_structure.kind == structure.kind
            and prev_structure.gamma_dim() == structure.gamma_dim()
        ):
            return cov.pack_params(structure, prev_gamma)
    except SandregError:
        return None
    return None


def select_model(candidates, dataset, family, objective, c, settings=None, steps=1):
    """Fit every candidate structure and pick the one of minimal estimated
    variance of the target contrast.

    Candidates are fitted in order; each fit is additionally warm-started
    from the previous candidate's solution when the parametrizations nest
    (and from ``candidate.warm_start`` when supplied).  Failed candidates
    are recorded and skipped; only a total failure raises.  Ties break to
    the earliest candidate.

    Returns ``(best_label, rows)`` where each row carries the candidate's
    label, fitted dispersion, c^T V_hat c and a selected flag.  The selected
    variance is conditional on this selection.
    """
    if not candidates:
        raise SandregError("select_model needs at least one candidate")
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if isinstance(objective, str):
        kind = objective
        objective = DispersionObjective(
            kind, target=c if kind in ("sandwich", "sandwich_large_sample") else None
        )
    settings = settings or OptimizerSettings()
    rows = []
    fits = []
    prev = (None, None)
    for cand in candidates:
        structure = cand.structure.bind(dataset)
        extra = []
        warm = _warm_theta(prev[0], prev[1], structure)
        if warm is not None:
            extra.append(warm)
        if cand.warm_start is not None:
            extra.append(cov.pack_params(structure, cand.warm_start))
        try:
            fit = minimize_dispersion(
                dataset, family, structure, objective,
                settings=settings, extra_starts=tuple(extra), label=cand.label,
            )
            est = jackknife_variance(fit, dataset, family, structure, c, steps=steps)
            cvc = float(c @ est.vhat @ c)
            rows.append(SelectionRow(cand.label, fit.gamma_hat, cvc, False))
            fits.append(fit)
            prev = (structure, fit.gamma_hat)
        except SandregError as exc:
            logger.warning("candidate %s failed: %s", cand.label, exc)
            rows.append(SelectionRow(cand.label, None, np.nan, False, error=str(exc)))
            fits.append(None)
    finite = [(k, r.cvc) for k, r in enumerate(rows) if np.isfinite(r.cvc)]
    if not finite:
        raise ConvergenceError("every candidate model failed")
    best_idx = min(finite, key=lambda kv: kv[1])[0]
    rows[best_idx].selected = True
    return rows[best_idx].label, rows


def delta_method_variance(fit, vhat, c, family):
    """Variance of g^{-1}(c^T beta_hat) by first-order propagation.

    Multiplies c^T V_hat c by the squared derivative of the inverse link at
    the fitted linear predictor.
    """
    c = np.atleast_1d(np.asarray(c, dtype=float))
    eta = float(c @ fit.beta_hat)
    mu = family.inverse(np.array([eta]))[0]
    slope = float(family.dmu_deta(np.array([mu]))[0])
    return slope**2 * float(c @ vhat @ c)
