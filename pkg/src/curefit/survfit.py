"""Product-limit survival curves for left-truncated, right-censored data.

A subject is at risk at ``t`` when ``entry < t <= time``. Cured subjects are
right-censored at the cure horizon.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import DataValidationError
from .io import write_rows_csv
from .model import Dataset

__all__ = ["KMCurve", "kaplan_meier", "km_left_truncated", "write_curve_csv"]

_Z = 1.959964


@dataclass(frozen=True, eq=False)
class KMCurve:
    """Kaplan-Meier estimate evaluated at the distinct event times.

    ``variance`` is Greenwood's estimate of Var S(t); the confidence limits
    are built on the log-survival scale and clipped to [0, 1]. Once the curve
    reaches zero the variance and limits are NaN.
    """

    time: np.ndarray
    n_risk: np.ndarray
    n_event: np.ndarray
    survival: np.ndarray
    variance: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray

    @property
    def std_err(self) -> np.ndarray:
        return np.sqrt(self.variance)

    def __call__(self, t):
        """Step-function value of the estimate at ``t`` (right-continuous)."""
        k = np.searchsorted(self.time, np.asarray(t, dtype=float), side="right")
        return np.concatenate([[1.0], self.survival])[k]


def kaplan_meier(entry, time, event, conf_level_z: float = _Z) -> KMCurve:
    """Left-truncated product-limit estimator from plain arrays.

    Parameters
    ----------
    entry, time : array-like
        Entry and exit times with ``entry < time``.
    event : array-like of bool
        True where ``time`` is an observed event.
    """
    entry = np.asarray(entry, dtype=float)
    time = np.asarray(time, dtype=float)
    event = np.asarray(event, dtype=bool)
    if not (entry.shape == time.shape == event.shape):
        raise ValueError("entry, time and event must have the same length")
    if not event.any():
        raise DataValidationError("no events in group")
    t = np.unique(time[event])
    d = np.bincount(np.searchsorted(t, time[event]), minlength=t.size)
    # at risk: entry < t_k <= time, i.e. #{time >= t_k} - #{entry >= t_k}
    y = (np.searchsorted(np.sort(entry), t, side="left")
         - np.searchsorted(np.sort(time), t, side="left"))
    if np.any(y < d):
        raise DataValidationError("risk set smaller than event count")
    surv = np.cumprod(1.0 - d / y)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = d / (y * (y - d))
    green = np.cumsum(terms)
    dead = np.cumsum(y == d) > 0
    green = np.where(dead, np.nan, green)
    var = surv ** 2 * green
    half = conf_level_z * np.sqrt(green)
    lo = np.clip(surv * np.exp(-half), 0.0, 1.0)
    hi = np.clip(surv * np.exp(half), 0.0, 1.0)
    return KMCurve(t, y, d, surv, var, lo, hi)


def km_left_truncated(data: Dataset, subgroup=None) -> KMCurve:
    """Kaplan-Meier curve of ``data`` restricted to ``subgroup``.

    ``subgroup`` may be a boolean mask, an index array or a callable that
    receives the dataset and returns a mask.
    """
    mask = np.ones(data.n, dtype=bool)
    if subgroup is not None:
        sel = subgroup(data) if callable(subgroup) else subgroup
        sel = np.asarray(sel)
        if sel.dtype == bool:
            mask = sel
        else:
            mask = np.zeros(data.n, dtype=bool)
            mask[sel] = True
    return kaplan_meier(data.entry[mask], data.time[mask], data.is_event[mask])


CURVE_COLUMNS = ("time", "n_risk", "n_event", "survival", "std_err", "ci_low", "ci_high")


def write_curve_csv(fh, curve: KMCurve) -> None:
    rows = zip(curve.time, curve.n_risk, curve.n_event, curve.survival,
               curve.std_err, curve.ci_low, curve.ci_high)
    write_rows_csv(fh, CURVE_COLUMNS, rows)
