"""Ghost-copy EM for the mixture cure model under left truncation.

Every observed subject is augmented with a latent cure indicator (random only
when censored) and a geometric number of truncated copies whose event times
fall on the observed event times below the subject's entry. The latent
variables enter the complete-data log-likelihood linearly, so the E-step
reduces to per-subject weights and the M-step to one weighted logistic and
one weighted Cox fit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .exceptions import (GhostMassOverflowError, SeparationError,
                         SingularInformationError)
from .model import (Dataset, ModelParams, _Evaluated, ghost_event_masses,
                    marginal_loglik_tilde, observed_loglik)
from .solvers import (CoxWeights, LogisticWeights, SolverConfig,
                      naive_cox_fit, naive_logistic_fit, weighted_cox_fit,
                      weighted_logistic_fit)

logger = logging.getLogger(__name__)

__all__ = [
    "EMConfig",
    "LatentSummaries",
    "EMWeights",
    "FitResult",
    "initialize",
    "e_step",
    "m_step",
    "fit_em",
    "baseline_selfconsistency_residual",
]


@dataclass(frozen=True)
class EMConfig:
    param_tol: float = 1e-6
    loglik_tol: float = 1e-8
    max_iter: int = 500
    solver_cfg: SolverConfig = field(default_factory=SolverConfig)
    compute_variance: bool = True

    def __post_init__(self):
        if not (self.param_tol > 0 and self.loglik_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True, eq=False)
class LatentSummaries:
    """Conditional moments of the latent variables given the observed data.

    All fields are per-subject arrays; ``ghost_pmf`` has one column per event
    time that lies below some entry time.
    """

    e_a: np.ndarray
    var_a: np.ndarray
    e_m: np.ndarray
    var_m: np.ndarray
    e_m2m: np.ndarray
    ghost_pmf: np.ndarray
    # p * sum_{t_k < Q} f(t_k): success probability of the geometric count
    ghost_q: np.ndarray


@dataclass(frozen=True, eq=False)
class EMWeights:
    logistic: LogisticWeights
    cox: CoxWeights
    latents: LatentSummaries


@dataclass
class FitResult:
    params: ModelParams
    covariance: np.ndarray | None
    se_alpha: np.ndarray
    se_beta: np.ndarray
    loglik_observed: float
    loglik_tilde: float
    trace: list
    iterations: int
    converged: bool
    baseline_residual: float
    score_norm: float = float("nan")
    warnings: list = field(default_factory=list)

    @property
    def coef(self) -> np.ndarray:
        return np.concatenate([self.params.alpha, self.params.beta])

    @property
    def se(self) -> np.ndarray:
        return np.concatenate([self.se_alpha, self.se_beta])


def initialize(data: Dataset, cfg: EMConfig = EMConfig()) -> ModelParams:
    """Starting values from the naive fits.

    The logistic part uses subjects with known cure status only; the Cox part
    is the left-truncated fit that treats cured subjects as censored at tau.
    Separation in the naive logistic fit falls back to ``alpha = 0``.
    """
    try:
        alpha = naive_logistic_fit(data, exclude_censored=True, cfg=cfg.solver_cfg)
    except SeparationError:
        logger.info("naive logistic start separated; starting from alpha = 0")
        alpha = np.zeros(data.z1.shape[1])
    beta, lam = naive_cox_fit(data, cfg=cfg.solver_cfg)
    return ModelParams.for_data(data, alpha, beta, lam)


def e_step(params: ModelParams, data: Dataset) -> EMWeights:
    """Conditional expectations of the latent variables and the M-step weights."""
    ev = _Evaluated(params, data)
    p = np.exp(ev.log_p)
    f = ghost_event_masses(params, data)
    fsum = f.sum(axis=1)
    q = p * fsum
    if np.any(q >= 1.0):
        bad = int(np.argmax(q))
        raise GhostMassOverflowError(
            f"truncated-copy mass {q[bad]:.6g} >= 1 for subject {data.ids[bad]!r}")
    e_m = q / (1.0 - q)
    with np.errstate(invalid="ignore", divide="ignore"):
        pmf = np.where(fsum[:, None] > 0, f / fsum[:, None], 0.0)

    cens = data.is_censored
    ev_ = data.is_event.astype(float)
    # P(uncured | censored at X) = p S(X) / (1 - p + p S(X))
    phi_x = expit(ev.eta1 + ev.log_s_x)
    e_a = ev_ + np.where(cens, phi_x, 0.0)
    var_a = np.where(cens, phi_x * (1.0 - phi_x), 0.0)

    logistic = LogisticWeights(
        w0=data.is_cured + np.where(cens, 1.0 - phi_x, 0.0),
        w1=e_a + e_m,
    )
    cox = CoxWeights(event=ev_, tail=np.where(cens, phi_x, 0.0),
                     ghost=e_m[:, None] * pmf)
    latents = LatentSummaries(
        e_a=e_a, var_a=var_a, e_m=e_m,
        var_m=q / (1.0 - q) ** 2,
        e_m2m=2.0 * q ** 2 / (1.0 - q) ** 2,
        ghost_pmf=pmf, ghost_q=q,
    )
    return EMWeights(logistic, cox, latents)


def m_step(weights: EMWeights, data: Dataset, warm: ModelParams,
           cfg: EMConfig = EMConfig()) -> ModelParams:
    alpha = weighted_logistic_fit(data.z1, weights.logistic, init=warm.alpha,
                                  cfg=cfg.solver_cfg)
    beta, lam = weighted_cox_fit(weights.cox, data, init_beta=warm.beta,
                                 cfg=cfg.solver_cfg)
    return ModelParams.for_data(data, alpha, beta, lam)


def _param_change(a: ModelParams, b: ModelParams) -> float:
    return float(np.max(np.abs(np.concatenate([
        a.alpha - b.alpha, a.beta - b.beta, np.log(a.lam) - np.log(b.lam)]))))


def baseline_selfconsistency_residual(params: ModelParams, data: Dataset) -> float:
    """Largest relative gap between the jumps and the observed-likelihood
    self-consistency equation for the baseline hazard.

    The equation is ``lambda_k = dN(t_k) / sum_i W_i(t_k) exp(beta'z2_i)`` with
    ``W_i(t) = {d1_i + dc_i phi_i(X_i)} 1{t <= X_i} - phi_i(Q_i) 1{t <= Q_i}``.
    """
    ev = _Evaluated(params, data)
    cens = data.is_censored
    phi_x = np.where(cens, expit(ev.eta1 + ev.log_s_x), 0.0)
    phi_q = expit(ev.eta1 + ev.log_s_q)
    K = data.K
    acc = np.zeros(K + 1)
    np.add.at(acc, data.n_le_time, (data.is_event + phi_x) * ev.hr)
    np.add.at(acc, data.n_le_entry, -phi_q * ev.hr)
    # index j holds subjects whose indicator covers t_1..t_j
    denom = np.cumsum(acc[::-1])[::-1][1:]
    dN = np.bincount(data.event_index[data.is_event], minlength=K)
    if np.any(denom <= 0):
        k = int(np.flatnonzero(denom <= 0)[0])
        raise ValueError(f"non-positive self-consistency denominator at event index {k}")
    return float(np.max(np.abs(params.lam - dN / denom) / params.lam))


def fit_em(data: Dataset, cfg: EMConfig = EMConfig(), init: ModelParams | None = None
           ) -> FitResult:
    """Run the EM from the naive starting values until both the parameter
    change and the log-likelihood change fall below their tolerances.

    Non-convergence within ``cfg.max_iter`` returns the last iterate with
    ``converged=False`` rather than raising.
    """
    from .variance import covariance_and_se, louis_information_with_score

    params = initialize(data, cfg) if init is None else init
    ll = marginal_loglik_tilde(params, data)
    trace = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        weights = e_step(params, data)
        new = m_step(weights, data, params, cfg)
        ll_new = marginal_loglik_tilde(new, data)
        change = _param_change(new, params)
        trace.append((ll_new, change))
        if ll_new < ll - 1e-10:
            logger.warning("EM log-likelihood decreased by %.3g at iteration %d",
                           ll - ll_new, it)
        done = change < cfg.param_tol and abs(ll_new - ll) < cfg.loglik_tol
        params, ll = new, ll_new
        if done:
            converged = True
            break

    result = FitResult(
        params=params, covariance=None,
        se_alpha=np.full(params.alpha.size, np.nan),
        se_beta=np.full(params.beta.size, np.nan),
        loglik_observed=observed_loglik(params, data), loglik_tilde=ll,
        trace=trace, iterations=it, converged=converged,
        baseline_residual=baseline_selfconsistency_residual(params, data),
    )
    if not converged:
        result.warnings.append(f"EM did not converge in {cfg.max_iter} iterations")
    if cfg.compute_variance:
        info, score = louis_information_with_score(params, data)
        # stationarity measured in (alpha, beta, log lambda) coordinates
        score[params.alpha.size + params.beta.size:] *= params.lam
        result.score_norm = float(np.max(np.abs(score)))
        if result.score_norm > 1e-4:
            result.warnings.append(
                f"expected score sup-norm {result.score_norm:.3g} > 1e-4; "
                "information evaluated away from a stationary point")
        try:
            cov, se_a, se_b = covariance_and_se(info)
        except SingularInformationError as exc:
            result.warnings.append(str(exc))
        else:
            result = replace(result, covariance=cov, se_alpha=se_a, se_beta=se_b)
    return result
