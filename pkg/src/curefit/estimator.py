"""scikit-learn style estimators wrapping the fitting routines.

The survival target is a structured array with fields ``entry``, ``time`` and
``status``; build one with :func:`make_survival_target`.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .em import EMConfig, fit_em
from .exceptions import DataValidationError
from .model import Status, build_dataset
from .survfit import kaplan_meier

__all__ = ["make_survival_target", "check_survival_y", "CureRateModel",
           "LeftTruncatedKaplanMeier"]

_Y_DTYPE = np.dtype([("entry", "f8"), ("time", "f8"), ("status", "i1")])


def make_survival_target(entry, time, status) -> np.ndarray:
    """Pack entry times, exit times and status labels into a structured array.

    ``status`` accepts :class:`Status` members, their integer codes or the
    labels ``"event"``, ``"cured"`` and ``"censored"``.
    """
    entry = np.asarray(entry, dtype=float).ravel()
    time = np.asarray(time, dtype=float).ravel()
    status = np.asarray(status, dtype=object).ravel()
    if not (entry.size == time.size == status.size):
        raise ValueError("entry, time and status must have the same length")
    y = np.empty(entry.size, dtype=_Y_DTYPE)
    y["entry"] = entry
    y["time"] = time
    try:
        y["status"] = [int(Status.parse(s)) for s in status]
    except ValueError as exc:
        raise DataValidationError(str(exc)) from None
    return y


def check_survival_y(y, n_samples=None):
    """Validate a survival target and return ``(entry, time, status)`` arrays."""
    y = np.asarray(y)
    if y.dtype.names is None or not {"entry", "time", "status"} <= set(y.dtype.names):
        raise ValueError("y must be a structured array with fields entry, time, status; "
                         "see make_survival_target")
    if y.ndim != 1:
        raise ValueError("y must be one-dimensional")
    if n_samples is not None and y.shape[0] != n_samples:
        raise ValueError(f"X has {n_samples} samples but y has {y.shape[0]}")
    entry = np.asarray(y["entry"], dtype=float)
    time = np.asarray(y["time"], dtype=float)
    status = np.asarray(y["status"], dtype=np.int8)
    if not (np.all(np.isfinite(entry)) and np.all(np.isfinite(time))):
        raise DataValidationError("entry and time must be finite")
    if not np.isin(status, [int(s) for s in Status]).all():
        raise DataValidationError("unknown status code in y")
    return entry, time, status


class CureRateModel(BaseEstimator):
    """Logistic-incidence / proportional-hazards-latency cure model fitted by EM.

    Parameters
    ----------
    tau : float, optional
        Cure horizon. Defaults to the common time of the cured subjects.
    cure_features, latency_features : sequence of int, optional
        Columns of ``X`` entering the incidence and latency parts. ``None``
        uses every column.
    param_tol, loglik_tol, max_iter
        EM stopping rule.
    compute_variance : bool
        Whether to compute the observed-information covariance.

    Attributes
    ----------
    intercept_ : float
    cure_coef_ : ndarray
        Incidence coefficients (log-odds of being uncured), intercept excluded.
    latency_coef_ : ndarray
    baseline_times_, baseline_hazard_, cumulative_baseline_hazard_ : ndarray
    covariance_ : ndarray or None
        Covariance over ``[intercept, cure_coef, latency_coef, baseline jumps]``.
    cure_se_, latency_se_ : ndarray
        Standard errors; ``cure_se_[0]`` belongs to the intercept.
    result_ : FitResult
    """

    def __init__(self, tau=None, cure_features=None, latency_features=None,
                 param_tol=1e-6, loglik_tol=1e-8, max_iter=500, compute_variance=True):
        self.tau = tau
        self.cure_features = cure_features
        self.latency_features = latency_features
        self.param_tol = param_tol
        self.loglik_tol = loglik_tol
        self.max_iter = max_iter
        self.compute_variance = compute_variance

    def _columns(self, X):
        p = X.shape[1]
        cure = list(range(p)) if self.cure_features is None else list(self.cure_features)
        lat = list(range(p)) if self.latency_features is None else list(self.latency_features)
        for j in cure + lat:
            if not 0 <= j < p:
                raise ValueError(f"feature index {j} out of range for {p} columns")
        return cure, lat

    def _dataset(self, X, y, tau):
        entry, time, status = check_survival_y(y, X.shape[0])
        cure, lat = self._columns(X)
        z1 = np.column_stack([np.ones(X.shape[0]), X[:, cure]])
        z2 = X[:, lat]
        records = zip(range(X.shape[0]), entry, time, status, z1, z2)
        return build_dataset(records, tau,
                             ("intercept",) + tuple(f"x{j}" for j in cure),
                             tuple(f"x{j}" for j in lat))

    def fit(self, X, y):
        X = check_array(X, dtype=float, ensure_min_features=0)
        self.n_features_in_ = X.shape[1]
        _, time, status = check_survival_y(y, X.shape[0])
        tau = self.tau
        if tau is None:
            cured = time[status == Status.CURED]
            if cured.size == 0:
                raise DataValidationError("no cured subjects; set tau explicitly")
            tau = float(cured.max())
        data = self._dataset(X, y, tau)
        cfg = EMConfig(param_tol=self.param_tol, loglik_tol=self.loglik_tol,
                       max_iter=self.max_iter, compute_variance=self.compute_variance)
        res = fit_em(data, cfg)
        p = res.params
        self.tau_ = tau
        self.result_ = res
        self.intercept_ = float(p.alpha[0])
        self.cure_coef_ = p.alpha[1:].copy()
        self.latency_coef_ = p.beta.copy()
        self.baseline_times_ = p.event_times.copy()
        self.baseline_hazard_ = p.lam.copy()
        self.cumulative_baseline_hazard_ = p.cumhaz.copy()
        self.covariance_ = res.covariance
        self.cure_se_ = res.se_alpha
        self.latency_se_ = res.se_beta
        self.n_iter_ = res.iterations
        self.converged_ = res.converged
        return self

    def _check_X(self, X):
        check_is_fitted(self, "result_")
        X = check_array(X, dtype=float, ensure_min_features=0)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def predict_uncured_proba(self, X) -> np.ndarray:
        """Probability of not being cured, ``p(z1)``."""
        X = self._check_X(X)
        cure, _ = self._columns(X)
        eta = self.intercept_ + X[:, cure] @ self.cure_coef_
        return 1.0 / (1.0 + np.exp(-eta))

    def predict_proba(self, X) -> np.ndarray:
        """Columns ``[P(cured), P(uncured)]``."""
        p = self.predict_uncured_proba(X)
        return np.column_stack([1.0 - p, p])

    def predict_latency_survival(self, X, times) -> np.ndarray:
        """Survival of the uncured, ``S(t | z2)``, as an (n_samples, n_times) array."""
        X = self._check_X(X)
        _, lat = self._columns(X)
        times = np.atleast_1d(np.asarray(times, dtype=float))
        if np.any(times >= self.tau_):
            raise ValueError("times must lie before the cure horizon")
        cum = self.result_.params.cumulative_hazard(times)
        hr = np.exp(X[:, lat] @ self.latency_coef_)
        return np.exp(-np.outer(hr, cum))

    def predict_survival(self, X, times) -> np.ndarray:
        """Population survival ``1 - p + p S(t | z2)``."""
        p = self.predict_uncured_proba(X)[:, None]
        return 1.0 - p + p * self.predict_latency_survival(X, times)

    def score(self, X, y) -> float:
        """Mean observed-data log-likelihood per subject.

        Event times in ``y`` must be among the fitted baseline jump times.
        """
        X = self._check_X(X)
        entry, time, status = check_survival_y(y, X.shape[0])
        _, lat = self._columns(X)
        params = self.result_.params
        p = self.predict_uncured_proba(X)
        eta2 = X[:, lat] @ self.latency_coef_
        hr = np.exp(eta2)
        cum_x = np.where(status == Status.CURED, 0.0, params.cumulative_hazard(
            np.where(status == Status.CURED, 0.0, time)))
        s_x = np.exp(-hr * cum_x)
        s_q = np.exp(-hr * params.cumulative_hazard(entry))
        ll = -np.log(1.0 - p + p * s_q)
        ev = status == Status.EVENT
        k = np.searchsorted(params.event_times, time[ev])
        k = np.minimum(k, params.event_times.size - 1)
        if not np.array_equal(params.event_times[k], time[ev]):
            raise ValueError("score requires event times seen during fit")
        ll[ev] += np.log(p[ev]) + np.log(params.lam[k]) + eta2[ev] + np.log(s_x[ev])
        cu = status == Status.CURED
        ll[cu] += np.log(1.0 - p[cu])
        ce = status == Status.CENSORED
        ll[ce] += np.log(1.0 - p[ce] + p[ce] * s_x[ce])
        return float(ll.mean())


class LeftTruncatedKaplanMeier(BaseEstimator):
    """Product-limit estimator with risk sets ``entry < t <= time``."""

    def __init__(self, exclude_cured=False):
        self.exclude_cured = exclude_cured

    def fit(self, y, X=None):
        entry, time, status = check_survival_y(y)
        if self.exclude_cured:
            keep = status != Status.CURED
            entry, time, status = entry[keep], time[keep], status[keep]
        if np.any(entry >= time):
            raise DataValidationError("entry must be before time")
        self.curve_ = kaplan_meier(entry, time, status == Status.EVENT)
        self.event_times_ = self.curve_.time
        self.survival_ = self.curve_.survival
        return self

    def predict(self, times) -> np.ndarray:
        check_is_fitted(self, "curve_")
        return self.curve_(times)
