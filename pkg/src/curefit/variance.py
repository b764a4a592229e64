"""Observed information by Louis' formula, covariance and Wald tests.

Parameters are laid out as ``[alpha | beta | lambda]``. The observed
information equals the expected complete-data information minus the
conditional covariance of the complete-data score. Latent variables of
different subjects are conditionally independent, so the covariance is a sum
of per-subject terms. For one subject the score is

    S = c + A u + sum_{j <= M} g(kappa_j)

with ``A`` the cure indicator, ``M`` the geometric copy count and
``kappa_j`` i.i.d. copy-time indices, which gives

    Cov(S) = Var(A) u u' + E[M] E[g g'] + E[M(M-1)] gbar gbar' - E[M]^2 gbar gbar'.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import gammaincc

from .exceptions import SingularInformationError
from .model import Dataset, ModelParams, _Evaluated

__all__ = [
    "InformationMatrix",
    "complete_score_expectation",
    "complete_info_expectation",
    "score_outer_expectation",
    "louis_information",
    "louis_information_literal",
    "covariance_and_se",
    "wald_test",
    "chi2_sf",
]


@dataclass(frozen=True, eq=False)
class InformationMatrix:
    matrix: np.ndarray
    d_alpha: int
    d_beta: int

    @property
    def K(self) -> int:
        return self.matrix.shape[0] - self.d_alpha - self.d_beta


def _latents(params, data, latents):
    if latents is None:
        from .em import e_step
        latents = e_step(params, data).latents
    return latents


class _Parts:
    """Per-subject ingredients of the complete-data score, vectorized."""

    def __init__(self, params: ModelParams, data: Dataset, latents):
        ev = _Evaluated(params, data)
        self.d1, self.d2, self.K = params.dims
        self.D = self.d1 + self.d2 + self.K
        self.p = np.exp(ev.log_p)
        self.hr = ev.hr
        self.log_s_x = ev.log_s_x
        self.delta1 = data.is_event.astype(float)
        self.lam = params.lam
        self.m = data.n_le_time
        self.k_ev = data.event_index
        self.z1, self.z2 = data.z1, data.z2
        lat = latents
        self.e_a, self.var_a = lat.e_a, lat.var_a
        self.e_m, self.var_m, self.e_m2m = lat.e_m, lat.var_m, lat.e_m2m
        self.pmf = lat.ghost_pmf
        kg = self.pmf.shape[1]
        self.kg = kg
        # log S_i(t_k) on the copy support
        self.gl = -params.cumhaz[:kg][None, :] * self.hr[:, None]
        # P(kappa >= k)
        self.pge = np.cumsum(self.pmf[:, ::-1], axis=1)[:, ::-1]
        self.gl_mean = (self.pmf * self.gl).sum(axis=1)

    # -- single subject, dense vectors ------------------------------------
    def u(self, i):
        v = np.zeros(self.D)
        d1, d2 = self.d1, self.d2
        v[:d1] = self.z1[i]
        v[d1:d1 + d2] = self.z2[i] * (self.delta1[i] + self.log_s_x[i])
        lam_part = v[d1 + d2:]
        lam_part[:self.m[i]] = -self.hr[i]
        if self.k_ev[i] >= 0:
            lam_part[self.k_ev[i]] += 1.0 / self.lam[self.k_ev[i]]
        return v

    def c(self, i):
        v = np.zeros(self.D)
        v[:self.d1] = -self.p[i] * self.z1[i]
        return v

    def g(self, i, kappa):
        v = np.zeros(self.D)
        d1, d2 = self.d1, self.d2
        v[:d1] = (1.0 - self.p[i]) * self.z1[i]
        v[d1:d1 + d2] = self.z2[i] * (1.0 + self.gl[i, kappa])
        lam_part = v[d1 + d2:]
        lam_part[:kappa + 1] = -self.hr[i]
        lam_part[kappa] += 1.0 / self.lam[kappa]
        return v

    def support(self, i):
        return np.flatnonzero(self.pmf[i] > 0) if self.kg else np.array([], dtype=int)

    def g_mean(self, i):
        v = np.zeros(self.D)
        for kappa in self.support(i):
            v += self.pmf[i, kappa] * self.g(i, kappa)
        return v

    def g_second(self, i):
        out = np.zeros((self.D, self.D))
        for kappa in self.support(i):
            g = self.g(i, kappa)
            out += self.pmf[i, kappa] * np.outer(g, g)
        return out


def complete_score_expectation(params: ModelParams, data: Dataset, latents=None,
                               i: int = 0) -> np.ndarray:
    """E[grad l^c_i | observed] stacked over (alpha, beta, lambda)."""
    parts = _Parts(params, data, _latents(params, data, latents))
    return parts.c(i) + parts.e_a[i] * parts.u(i) + parts.e_m[i] * parts.g_mean(i)


def complete_info_expectation(params: ModelParams, data: Dataset, latents=None,
                              i: int = 0) -> np.ndarray:
    """E[-hess l^c_i | observed]; alpha is block-separated from (beta, lambda)."""
    P = _Parts(params, data, _latents(params, data, latents))
    d1, d2 = P.d1, P.d2
    B = np.zeros((P.D, P.D))
    z1, z2 = P.z1[i], P.z2[i]
    B[:d1, :d1] = np.outer(z1, z1) * (1.0 + P.e_m[i]) * P.p[i] * (1.0 - P.p[i])
    neg_log_s = -(P.e_a[i] * P.log_s_x[i] + P.e_m[i] * P.gl_mean[i])
    B[d1:d1 + d2, d1:d1 + d2] = np.outer(z2, z2) * neg_log_s
    risk = np.zeros(P.K)
    risk[:P.m[i]] = P.e_a[i]
    risk[:P.kg] += P.e_m[i] * P.pge[i]
    bl = np.outer(z2, risk * P.hr[i])
    B[d1:d1 + d2, d1 + d2:] = bl
    B[d1 + d2:, d1:d1 + d2] = bl.T
    mass = np.zeros(P.K)
    if P.k_ev[i] >= 0:
        mass[P.k_ev[i]] = P.e_a[i] * P.delta1[i]
    mass[:P.kg] += P.e_m[i] * P.pmf[i]
    idx = np.arange(d1 + d2, P.D)
    B[idx, idx] = mass / P.lam ** 2
    return B


def score_outer_expectation(params: ModelParams, data: Dataset, latents=None,
                            i: int = 0) -> np.ndarray:
    """E[S_i S_i' | observed] for the complete-data score ``S_i``."""
    P = _Parts(params, data, _latents(params, data, latents))
    es = P.c(i) + P.e_a[i] * P.u(i) + P.e_m[i] * P.g_mean(i)
    u = P.u(i)
    gbar = P.g_mean(i)
    cov = (P.var_a[i] * np.outer(u, u) + P.e_m[i] * P.g_second(i)
           + (P.e_m2m[i] - P.e_m[i] ** 2) * np.outer(gbar, gbar))
    return cov + np.outer(es, es)


def _revcum(a, axis=0):
    return np.flip(np.cumsum(np.flip(a, axis=axis), axis=axis), axis=axis)


def _max_index_matrix(v):
    """Matrix ``V[k, h] = v[max(k, h)]``."""
    k = np.arange(v.size)
    return v[np.maximum(k[:, None], k[None, :])]


def _louis(params: ModelParams, data: Dataset, latents=None):
    P = _Parts(params, data, _latents(params, data, latents))
    d1, d2, K, kg = P.d1, P.d2, P.K, P.kg
    a, b = slice(0, d1), slice(d1, d1 + d2)
    lsl = slice(d1 + d2, P.D)
    z1, z2, hr, lam = P.z1, P.z2, P.hr, P.lam
    e_a, e_m = P.e_a, P.e_m
    n = z1.shape[0]

    # ---- expected complete-data information E[B] -----------------------
    B = np.zeros((P.D, P.D))
    w = (1.0 + e_m) * P.p * (1.0 - P.p)
    B[a, a] = (z1.T * w) @ z1
    neg_log_s = -(e_a * P.log_s_x + e_m * P.gl_mean)
    B[b, b] = (z2.T * neg_log_s) @ z2
    # risk weight of subject i at t_k: e_a 1{k < m_i} + e_m P(kappa >= k)
    acc = np.zeros((K + 1, d2))
    np.add.at(acc, P.m, (e_a * hr)[:, None] * z2)
    risk_z = _revcum(acc)[1:]
    if kg:
        risk_z[:kg] += (P.pge * (e_m * hr)[:, None]).T @ z2
    B[b, lsl] = risk_z.T
    B[lsl, b] = risk_z
    ev = P.k_ev >= 0
    mass = np.bincount(P.k_ev[ev], e_a[ev], minlength=K)
    if kg:
        mass[:kg] += (e_m[:, None] * P.pmf).sum(axis=0)
    B[lsl, lsl] = np.diag(mass / lam ** 2)

    # ---- conditional covariance of the complete-data score --------------
    C = np.zeros((P.D, P.D))
    # cure indicator: u has alpha z1, beta z2 log S(X), lambda -hr 1{k < m}
    va = P.var_a
    cz = z2 * P.log_s_x[:, None]
    C[a, a] += (z1.T * va) @ z1
    C[a, b] += (z1.T * va) @ cz
    C[b, b] += (cz.T * va) @ cz
    acc = np.zeros((K + 1, d1 + d2))
    np.add.at(acc, P.m, (va * hr)[:, None] * np.hstack([z1, cz]))
    cross = -_revcum(acc)[1:]
    C[a, lsl] += cross[:, :d1].T
    C[b, lsl] += cross[:, d1:].T
    acc = np.zeros(K + 1)
    np.add.at(acc, P.m, va * hr ** 2)
    C[lsl, lsl] += _max_index_matrix(_revcum(acc)[1:])

    if kg:
        lk = slice(d1 + d2, d1 + d2 + kg)
        lam_g = lam[:kg]
        pmf, pge, gl = P.pmf, P.pge, P.gl
        g1 = 1.0 + gl
        g1_mean = (pmf * g1).sum(axis=1)
        g1_sq = (pmf * g1 ** 2).sum(axis=1)
        # mean lambda-part: pi_k / lam_k - hr P(kappa >= k)
        lbar = pmf / lam_g - hr[:, None] * pge
        one_p = 1.0 - P.p
        # E[M] E_pi[g g']
        C[a, a] += (z1.T * (e_m * one_p ** 2)) @ z1
        C[a, b] += (z1.T * (e_m * one_p * g1_mean)) @ z2
        C[b, b] += (z2.T * (e_m * g1_sq)) @ z2
        C[a, lk] += (z1.T * (e_m * one_p)) @ lbar
        # E_pi[(1 + gl) L_k] = lbar_k + pi_k gl_k / lam_k - hr sum_{kappa >= k} pi gl
        pg = pmf * gl
        bl = lbar + pg / lam_g - hr[:, None] * _revcum(pg, axis=1)
        C[b, lk] += (z2.T * e_m) @ bl
        colmass = (e_m[:, None] * pmf).sum(axis=0)
        c_k = (e_m * hr) @ pmf / lam_g
        M1 = np.tril(np.broadcast_to(c_k[:, None], (kg, kg)))
        v = (e_m * hr ** 2) @ pge
        C[lk, lk] += np.diag(colmass / lam_g ** 2) - M1 - M1.T + _max_index_matrix(v)
        # (E[M(M-1)] - E[M]^2) gbar gbar'
        coef = P.e_m2m - e_m ** 2
        gbar = np.hstack([one_p[:, None] * z1, g1_mean[:, None] * z2, lbar])
        sub = slice(0, d1 + d2 + kg)
        C[sub, sub] += (gbar.T * coef) @ gbar

    iu = np.triu_indices(P.D, 1)
    C[(iu[1], iu[0])] = C[iu]

    # total expected score
    score = np.zeros(P.D)
    score[a] = z1.T @ (e_a - P.p + e_m * (1.0 - P.p))
    score[b] = z2.T @ (e_a * (P.delta1 + P.log_s_x) + e_m * (1.0 + P.gl_mean))
    acc = np.zeros(K + 1)
    np.add.at(acc, P.m, e_a * hr)
    risk = _revcum(acc)[1:]
    if kg:
        risk[:kg] += (e_m * hr) @ P.pge
    score[lsl] = mass / lam - risk

    info = B - C
    info = 0.5 * (info + info.T)
    return InformationMatrix(info, d1, d2), score


def louis_information(params: ModelParams, data: Dataset, latents=None
                      ) -> InformationMatrix:
    """Observed information ``sum E[B_i] - sum Cov(S_i)`` at ``params``.

    This equals the negative Hessian of :func:`~curefit.model.marginal_loglik_tilde`
    at any parameter value, and the textbook Louis expression at a
    stationary point.
    """
    return _louis(params, data, latents)[0]


def louis_information_with_score(params: ModelParams, data: Dataset, latents=None):
    return _louis(params, data, latents)


def louis_information_literal(params: ModelParams, data: Dataset) -> np.ndarray:
    """Louis' expression summed subject by subject, cross terms included.

    ``sum E[B_i] - sum E[S_i S_i'] - sum_{i != i'} E[S_i] E[S_i']'``.
    Quadratic in ``n``; meant for checking the fast path on small data.
    """
    lat = _latents(params, data, None)
    P = _Parts(params, data, lat)
    total = np.zeros((P.D, P.D))
    scores = []
    for i in range(data.n):
        total += complete_info_expectation(params, data, lat, i)
        total -= score_outer_expectation(params, data, lat, i)
        scores.append(complete_score_expectation(params, data, lat, i))
    for i in range(data.n):
        for j in range(data.n):
            if i != j:
                total -= np.outer(scores[i], scores[j])
    return total


def covariance_and_se(info: InformationMatrix):
    """Invert the information and return ``(cov, se_alpha, se_beta)``."""
    mat = np.asarray(info.matrix, dtype=float)
    if not np.allclose(mat, mat.T, rtol=1e-10, atol=0):
        raise SingularInformationError("information matrix is not symmetric")
    try:
        cho = linalg.cho_factor(mat)
        cov = linalg.cho_solve(cho, np.eye(mat.shape[0]))
    except (linalg.LinAlgError, ValueError) as exc:
        raise SingularInformationError(f"information matrix is singular: {exc}") from None
    cov = 0.5 * (cov + cov.T)
    diag = np.diag(cov)
    if not np.all(np.isfinite(diag)) or np.any(diag <= 0):
        raise SingularInformationError("non-positive variance in inverted information")
    d1, d2 = info.d_alpha, info.d_beta
    se = np.sqrt(diag[:d1 + d2])
    return cov, se[:d1], se[d1:d1 + d2]


def chi2_sf(x: float, df: int) -> float:
    """Upper tail of the chi-square distribution."""
    if x <= 0:
        return 1.0
    return float(gammaincc(df / 2.0, x / 2.0))


def wald_test(estimate, covariance, coord_indices):
    """Wald chi-square test that the selected coefficients are all zero.

    Parameters
    ----------
    estimate : array-like or FitResult
        Coefficient vector laid out as ``[alpha | beta]``. A ``FitResult``
        may be passed instead, in which case ``covariance`` may be ``None``.
    covariance : array-like
        Covariance matrix whose leading block matches ``estimate``.
    coord_indices : sequence of int

    Returns
    -------
    statistic, df, p_value
    """
    if hasattr(estimate, "coef") and hasattr(estimate, "covariance"):
        if covariance is None:
            covariance = estimate.covariance
        estimate = estimate.coef
    if covariance is None:
        raise SingularInformationError("no covariance available for the Wald test")
    idx = np.asarray(coord_indices, dtype=int)
    theta = np.asarray(estimate, dtype=float)[idx]
    V = np.asarray(covariance, dtype=float)[np.ix_(idx, idx)]
    try:
        stat = float(theta @ linalg.solve(V, theta, assume_a="pos"))
    except (linalg.LinAlgError, ValueError) as exc:
        raise SingularInformationError(f"singular covariance sub-block: {exc}") from None
    df = idx.size
    return stat, df, chi2_sf(stat, df)
