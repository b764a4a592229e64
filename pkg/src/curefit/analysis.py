"""Side-by-side model comparison and Wald-based covariate selection."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .em import EMConfig, FitResult, fit_em
from .exceptions import SingularInformationError
from .io import CohortTable
from .model import Dataset
from .solvers import (SolverConfig, cox_profile_information, logistic_information,
                      naive_cox_fit, naive_cox_weights, naive_logistic_fit,
                      naive_logistic_weights)
from .variance import chi2_sf, wald_test

logger = logging.getLogger(__name__)

__all__ = ["coef_table", "fit_summary", "compare_models", "SelectionResult",
           "select_covariates", "shared_wald_tests"]


def _inverse_se(info):
    try:
        cov = linalg.inv(info)
    except (linalg.LinAlgError, ValueError):
        return np.full(info.shape[0], np.nan)
    d = np.diag(cov)
    return np.sqrt(np.where(d > 0, d, np.nan))


def coef_table(names, estimate, se):
    """Rows ``{term, estimate, se, z, p_value}`` with two-sided normal p-values."""
    rows = []
    for name, b, s in zip(names, estimate, se):
        z = b / s if np.isfinite(s) and s > 0 else float("nan")
        rows.append({"term": name, "estimate": float(b), "se": float(s), "z": float(z),
                     "p_value": chi2_sf(z * z, 1) if np.isfinite(z) else float("nan")})
    return rows


def shared_wald_tests(fit: FitResult, data: Dataset):
    """Joint 2-df Wald test for every covariate present in both model parts."""
    out = []
    d1 = data.z1.shape[1]
    for j, name in enumerate(data.z1_names[1:], start=1):
        if name in data.z2_names:
            k = d1 + data.z2_names.index(name)
            if fit.covariance is None:
                stat, p = float("nan"), float("nan")
            else:
                stat, _, p = wald_test(fit.coef, fit.covariance, [j, k])
            out.append({"covariate": name, "statistic": stat, "df": 2, "p_value": p})
    return out


def fit_summary(fit: FitResult, data: Dataset) -> dict:
    """JSON-ready description of a cure-model fit."""
    p = fit.params
    return {
        "converged": fit.converged,
        "iterations": fit.iterations,
        "loglik_observed": fit.loglik_observed,
        "loglik_tilde": fit.loglik_tilde,
        "baseline_residual": fit.baseline_residual,
        "score_norm": fit.score_norm,
        "tau": data.tau,
        "n": data.n,
        "n_event": int(data.is_event.sum()),
        "n_cured": int(data.is_cured.sum()),
        "n_censored": int(data.is_censored.sum()),
        "logistic": coef_table(data.z1_names, p.alpha, fit.se_alpha),
        "cox": coef_table(data.z2_names, p.beta, fit.se_beta),
        "wald_2df": shared_wald_tests(fit, data),
        "warnings": list(fit.warnings),
    }


def compare_models(data: Dataset, em_cfg: EMConfig = EMConfig()) -> dict:
    """Fit the cure model next to the two naive alternatives.

    The naive logistic model regresses event (yes/no) on ``z1`` with censored
    subjects counted as non-events; the naive Cox model is the left-truncated
    fit on ``z2`` with cured subjects censored at tau.
    """
    cfg = em_cfg.solver_cfg
    fit = fit_em(data, em_cfg)
    alpha = naive_logistic_fit(data, exclude_censored=False, cfg=cfg)
    se_a = _inverse_se(logistic_information(alpha, data.z1,
                                            naive_logistic_weights(data, False)))
    beta, lam = naive_cox_fit(data, cfg=cfg)
    if beta.size:
        se_b = _inverse_se(cox_profile_information(beta, naive_cox_weights(data), data))
    else:
        se_b = np.empty(0)
    return {
        "cure_model": fit_summary(fit, data),
        "naive_logistic": {"logistic": coef_table(data.z1_names, alpha, se_a)},
        "naive_cox": {"cox": coef_table(data.z2_names, beta, se_b)},
    }


@dataclass
class SelectionResult:
    selected: list
    trace: list
    fit: FitResult
    data: Dataset
    warnings: list = field(default_factory=list)


def _fit_cols(table: CohortTable, cols, tau, em_cfg):
    data = table.to_dataset(cols, cols, tau)
    return data, fit_em(data, em_cfg)


def _joint_p(fit: FitResult, data: Dataset, col: str) -> float:
    if fit.covariance is None:
        raise SingularInformationError(f"no covariance for the model containing {col!r}")
    j = data.z1_names.index(col)
    k = data.z1.shape[1] + data.z2_names.index(col)
    return wald_test(fit.coef, fit.covariance, [j, k])[2]


def select_covariates(table: CohortTable, candidates: Sequence[str],
                      tau: float | None = None, screen_p: float = 0.2,
                      keep_p: float = 0.1, force: Sequence[str] = (),
                      em_cfg: EMConfig = EMConfig()) -> SelectionResult:
    """Univariate screen then backward elimination on joint 2-df Wald tests.

    Each covariate enters both the incidence and the latency part. Screening
    fits one model per candidate (plus any forced covariates) and keeps
    candidates with ``p <= screen_p``. Backward elimination then drops the
    candidate with the largest p-value until all are ``<= keep_p``; on a tie
    the later column is dropped. Forced covariates are never dropped.
    """
    force = [c for c in force]
    for c in list(candidates) + force:
        if c not in table.covariates:
            raise ValueError(f"unknown covariate {c!r}")
    pool = [c for c in candidates if c not in force]
    if not pool and not force:
        raise ValueError("at least one candidate covariate is required")
    trace = []
    warnings = []
    kept = []
    for c in pool:
        data, fit = _fit_cols(table, force + [c], tau, em_cfg)
        p = _joint_p(fit, data, c)
        keep = p <= screen_p
        trace.append({"stage": "screen", "covariate": c, "p_value": p,
                      "decision": "keep" if keep else "drop"})
        if keep:
            kept.append(c)
    current = [c for c in table.covariates if c in force or c in kept]
    while True:
        data, fit = _fit_cols(table, current, tau, em_cfg)
        free = [c for c in current if c not in force]
        if not free:
            break
        pvals = [_joint_p(fit, data, c) for c in free]
        worst = max(range(len(free)), key=lambda i: (pvals[i], i))
        step = {"stage": "backward", "model": list(current),
                "p_values": dict(zip(free, pvals))}
        if pvals[worst] > keep_p:
            step["dropped"] = free[worst]
            trace.append(step)
            current = [c for c in current if c != free[worst]]
        else:
            step["dropped"] = None
            trace.append(step)
            break
    if not current:
        warnings.append("all covariates screened out; final model has no covariates")
    return SelectionResult(current, trace, fit, data, warnings)
