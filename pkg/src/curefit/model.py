"""Cohort containers and pure evaluators for the mixture cure-rate model.

The incidence part is logistic in ``z1`` (which carries a leading intercept),
the latency part is proportional hazards in ``z2`` with a baseline cumulative
hazard that jumps only at the observed event times. All quantities are
evaluated in log space where products of probabilities would otherwise form.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from .exceptions import DataValidationError, GhostMassOverflowError

__all__ = [
    "Status",
    "SubjectRecord",
    "Dataset",
    "ModelParams",
    "build_dataset",
    "cure_prob",
    "survival",
    "event_mass",
    "posterior_uncured_phi",
    "observed_loglik",
    "marginal_loglik_tilde",
    "ghost_event_masses",
]


class Status(enum.IntEnum):
    """Observed outcome category of a subject."""

    EVENT = 0
    CURED = 1
    CENSORED = 2

    @classmethod
    def parse(cls, value) -> "Status":
        if isinstance(value, Status):
            return value
        if isinstance(value, str):
            try:
                return cls[value.strip().upper()]
            except KeyError:
                raise ValueError(f"unknown status {value!r}") from None
        return cls(int(value))

    @property
    def indicators(self) -> tuple[int, int, int]:
        """The indicator triple (event, cured, censored)."""
        return (int(self is Status.EVENT), int(self is Status.CURED),
                int(self is Status.CENSORED))


@dataclass(frozen=True)
class SubjectRecord:
    """One observed subject.

    ``z1`` must start with the intercept component 1; ``z2`` has no intercept.
    """

    id: object
    q: float
    x: float
    status: Status
    z1: tuple
    z2: tuple


def _readonly(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Validated cohort in array form.

    Use :func:`build_dataset` to construct one; the constructor performs no
    checks. ``event_index[i]`` is the position of subject ``i``'s event time
    in ``event_times`` (-1 for non-events).
    """

    ids: tuple
    entry: np.ndarray
    time: np.ndarray
    status: np.ndarray
    z1: np.ndarray
    z2: np.ndarray
    tau: float
    event_times: np.ndarray
    event_index: np.ndarray
    z1_names: tuple = ()
    z2_names: tuple = ()
    # number of event times t_k <= X_i, t_k < Q_i and t_k <= Q_i
    n_le_time: np.ndarray = field(init=False, repr=False)
    n_lt_entry: np.ndarray = field(init=False, repr=False)
    n_le_entry: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        t = self.event_times
        object.__setattr__(self, "n_le_time",
                           _readonly(np.searchsorted(t, self.time, side="right")))
        object.__setattr__(self, "n_lt_entry",
                           _readonly(np.searchsorted(t, self.entry, side="left")))
        object.__setattr__(self, "n_le_entry",
                           _readonly(np.searchsorted(t, self.entry, side="right")))

    @property
    def n(self) -> int:
        return self.time.shape[0]

    @property
    def K(self) -> int:
        return self.event_times.shape[0]

    @property
    def is_event(self) -> np.ndarray:
        return self.status == Status.EVENT

    @property
    def is_cured(self) -> np.ndarray:
        return self.status == Status.CURED

    @property
    def is_censored(self) -> np.ndarray:
        return self.status == Status.CENSORED

    @property
    def n_ghost_support(self) -> int:
        """Largest number of event times strictly below any entry time."""
        return int(self.n_lt_entry.max()) if self.n else 0

    @property
    def subjects(self) -> list[SubjectRecord]:
        return [
            SubjectRecord(self.ids[i], float(self.entry[i]), float(self.time[i]),
                          Status(int(self.status[i])), tuple(self.z1[i]),
                          tuple(self.z2[i]))
            for i in range(self.n)
        ]

    def subset(self, mask) -> "Dataset":
        """Dataset restricted to the subjects selected by ``mask``."""
        mask = np.asarray(mask)
        if mask.dtype != bool:
            sel = np.zeros(self.n, dtype=bool)
            sel[mask] = True
            mask = sel
        return _assemble([self.ids[i] for i in np.flatnonzero(mask)],
                         self.entry[mask], self.time[mask], self.status[mask],
                         self.z1[mask], self.z2[mask], self.tau,
                         self.z1_names, self.z2_names)


def _assemble(ids, q, x, status, z1, z2, tau, z1_names=(), z2_names=()):
    q = np.asarray(q, dtype=float)
    x = np.asarray(x, dtype=float)
    status = np.asarray(status, dtype=np.int8)
    z1 = np.asarray(z1, dtype=float).reshape(len(x), -1)
    z2 = np.asarray(z2, dtype=float).reshape(len(x), -1)
    ev = status == Status.EVENT
    if not ev.any():
        raise DataValidationError("dataset has no events")
    event_times = np.unique(x[ev])
    event_index = np.full(len(x), -1, dtype=np.intp)
    event_index[ev] = np.searchsorted(event_times, x[ev])
    return Dataset(tuple(ids), _readonly(q), _readonly(x), _readonly(status),
                   _readonly(z1), _readonly(z2), float(tau),
                   _readonly(event_times), _readonly(event_index),
                   tuple(z1_names), tuple(z2_names))


def build_dataset(records: Iterable, tau: float, z1_names: Sequence[str] = (),
                  z2_names: Sequence[str] = ()) -> Dataset:
    """Validate raw subject rows and assemble a :class:`Dataset`.

    Parameters
    ----------
    records : iterable of SubjectRecord, mapping or tuple
        Each row provides ``id, q, x, status, z1, z2``. Mappings use those
        keys; tuples use that order. ``z1`` must include the leading 1.
    tau : float
        Cure horizon. Cured subjects must carry ``x == tau``.

    Raises
    ------
    DataValidationError
        On ``q >= x``, ``x > tau``, an event at ``tau``, a cured row with
        ``x != tau``, duplicate ids, ragged covariates or no events at all.
        Row numbers in messages are 1-based.
    """
    tau = float(tau)
    if not np.isfinite(tau) or tau <= 0:
        raise DataValidationError(f"tau must be positive and finite, got {tau}")
    ids, qs, xs, sts, z1s, z2s = [], [], [], [], [], []
    seen = set()
    d1 = d2 = None
    for row_no, rec in enumerate(records, start=1):
        if isinstance(rec, SubjectRecord):
            rid, q, x, st, z1, z2 = rec.id, rec.q, rec.x, rec.status, rec.z1, rec.z2
        elif isinstance(rec, dict):
            rid, q, x, st, z1, z2 = (rec["id"], rec["q"], rec["x"], rec["status"],
                                     rec["z1"], rec["z2"])
        else:
            rid, q, x, st, z1, z2 = rec
        try:
            q, x = float(q), float(x)
            st = Status.parse(st)
            z1 = np.asarray(z1, dtype=float).ravel()
            z2 = np.asarray(z2, dtype=float).ravel()
        except (TypeError, ValueError) as exc:
            raise DataValidationError(str(exc), row=row_no) from None
        if not (np.isfinite(q) and np.isfinite(x)):
            raise DataValidationError("times must be finite", row=row_no)
        if not (np.all(np.isfinite(z1)) and np.all(np.isfinite(z2))):
            raise DataValidationError("covariates must be finite", row=row_no)
        if rid in seen:
            raise DataValidationError(f"duplicate id {rid!r}", row=row_no)
        seen.add(rid)
        if q < 0:
            raise DataValidationError(f"entry {q} is negative", row=row_no)
        if q >= x:
            raise DataValidationError(f"entry {q} is not before time {x}", row=row_no)
        if x > tau:
            raise DataValidationError(f"time {x} exceeds tau={tau}", row=row_no)
        if st is Status.EVENT and x >= tau:
            raise DataValidationError(f"event at time {x} is not before tau={tau}",
                                      row=row_no)
        if st is Status.CURED and x != tau:
            raise DataValidationError(f"cured subject has time {x} != tau={tau}",
                                      row=row_no)
        if z1.size == 0 or z1[0] != 1.0:
            raise DataValidationError("z1 must start with the intercept 1", row=row_no)
        if d1 is None:
            d1, d2 = z1.size, z2.size
        elif z1.size != d1 or z2.size != d2:
            raise DataValidationError("covariate dimensions differ between rows",
                                      row=row_no)
        ids.append(rid)
        qs.append(q)
        xs.append(x)
        sts.append(int(st))
        z1s.append(z1)
        z2s.append(z2)
    if not xs:
        raise DataValidationError("no rows")
    return _assemble(ids, qs, xs, sts, np.vstack(z1s),
                     np.vstack(z2s) if d2 else np.empty((len(xs), 0)), tau,
                     z1_names, z2_names)


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Parameter triple (alpha, beta, lambda) on a fixed event-time grid.

    ``lam[k]`` is the jump of the baseline cumulative hazard at
    ``event_times[k]``; the cumulative hazard is right-continuous.
    """

    alpha: np.ndarray
    beta: np.ndarray
    lam: np.ndarray
    event_times: np.ndarray
    tau: float

    def __post_init__(self):
        object.__setattr__(self, "alpha", _readonly(np.asarray(self.alpha, float).ravel()))
        object.__setattr__(self, "beta", _readonly(np.asarray(self.beta, float).ravel()))
        object.__setattr__(self, "lam", _readonly(np.asarray(self.lam, float).ravel()))
        object.__setattr__(self, "event_times",
                           _readonly(np.asarray(self.event_times, float).ravel()))
        if self.lam.shape != self.event_times.shape:
            raise ValueError("lam and event_times lengths differ")
        if not np.all(np.isfinite(self.lam)) or np.any(self.lam <= 0):
            raise ValueError("baseline jumps must be positive and finite")

    @classmethod
    def for_data(cls, data: Dataset, alpha, beta, lam) -> "ModelParams":
        return cls(alpha, beta, lam, data.event_times, data.tau)

    @property
    def cumhaz(self) -> np.ndarray:
        """Cumulative baseline hazard at each event time (jump included)."""
        return np.cumsum(self.lam)

    def cumulative_hazard(self, t) -> np.ndarray:
        """Baseline cumulative hazard at arbitrary times in [0, tau)."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.event_times, t, side="right")
        return np.concatenate(([0.0], self.cumhaz))[idx]

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.alpha.size, self.beta.size, self.lam.size

    def to_vector(self, log_lambda: bool = False) -> np.ndarray:
        lam = np.log(self.lam) if log_lambda else self.lam
        return np.concatenate([self.alpha, self.beta, lam])

    def with_vector(self, vec, log_lambda: bool = False) -> "ModelParams":
        d1, d2, _ = self.dims
        vec = np.asarray(vec, dtype=float)
        lam = vec[d1 + d2:]
        return ModelParams(vec[:d1], vec[d1:d1 + d2],
                           np.exp(lam) if log_lambda else lam,
                           self.event_times, self.tau)


def _log_expit(x):
    return -np.logaddexp(0.0, -x)


def cure_prob(alpha, z1) -> float:
    """Probability of belonging to the uncured (susceptible) group."""
    alpha = np.asarray(alpha, dtype=float)
    z1 = np.asarray(z1, dtype=float)
    if alpha.shape != z1.shape:
        raise ValueError(f"dimension mismatch: alpha {alpha.shape} vs z1 {z1.shape}")
    return float(expit(alpha @ z1))


def _check_z2(params: ModelParams, z2):
    z2 = np.asarray(z2, dtype=float)
    if z2.shape != params.beta.shape:
        raise ValueError(f"dimension mismatch: beta {params.beta.shape} vs z2 {z2.shape}")
    return z2


def survival(params: ModelParams, z2, t) -> float:
    """Latency survival ``exp(-Lambda(t) exp(beta'z2))`` for ``0 <= t < tau``."""
    z2 = _check_z2(params, z2)
    if not 0 <= t < params.tau:
        raise ValueError(f"survival is defined on [0, tau), got t={t}")
    lam_t = params.cumulative_hazard(t)
    return float(np.exp(-lam_t * np.exp(params.beta @ z2)))


def event_mass(params: ModelParams, z2, k: int) -> float:
    """Point mass ``lambda_k exp(beta'z2) S(t_k)`` at the k-th event time (0-based)."""
    z2 = _check_z2(params, z2)
    if not 0 <= k < params.lam.size:
        raise IndexError(f"event index {k} outside 0..{params.lam.size - 1}")
    h = np.exp(params.beta @ z2)
    return float(params.lam[k] * h * np.exp(-params.cumhaz[k] * h))


def posterior_uncured_phi(params: ModelParams, z1, z2, t) -> float:
    """P(uncured | still event-free at t) = p S(t) / (1 - p + p S(t))."""
    z2 = _check_z2(params, z2)
    z1 = np.asarray(z1, dtype=float)
    if z1.shape != params.alpha.shape:
        raise ValueError("dimension mismatch between alpha and z1")
    if not 0 <= t < params.tau:
        raise ValueError(f"phi is defined on [0, tau), got t={t}")
    lam_t = params.cumulative_hazard(t)
    return float(expit(params.alpha @ z1 - lam_t * np.exp(params.beta @ z2)))


class _Evaluated:
    """Per-subject building blocks shared by the likelihoods and the E-step."""

    def __init__(self, params: ModelParams, data: Dataset):
        if params.lam.size != data.K:
            raise ValueError("params and data have different event-time grids")
        self.eta1 = data.z1 @ params.alpha
        self.eta2 = data.z2 @ params.beta
        self.hr = np.exp(self.eta2)
        self.log_p = _log_expit(self.eta1)
        self.log_1mp = _log_expit(-self.eta1)
        cum = np.concatenate(([0.0], params.cumhaz))
        self.cumhaz = cum
        self.cumhaz_x = cum[data.n_le_time]
        self.cumhaz_q = cum[data.n_le_entry]
        # cured subjects have x == tau; their S(x) is never used
        self.log_s_x = np.where(data.is_cured, 0.0, -self.cumhaz_x * self.hr)
        self.log_s_q = -self.cumhaz_q * self.hr


def ghost_event_masses(params: ModelParams, data: Dataset) -> np.ndarray:
    """Matrix ``f_i(t_k)`` restricted to ``t_k < Q_i`` (zero elsewhere).

    Only the first ``data.n_ghost_support`` event-time columns can be non-zero,
    so the returned array has that many columns.
    """
    kg = data.n_ghost_support
    if kg == 0:
        return np.zeros((data.n, 0))
    hr = np.exp(data.z2 @ params.beta)[:, None]
    lam = params.lam[:kg]
    cum = params.cumhaz[:kg]
    f = lam * hr * np.exp(-cum * hr)
    mask = np.arange(kg)[None, :] < data.n_lt_entry[:, None]
    return np.where(mask, f, 0.0)


def _numerator_terms(ev: _Evaluated, params: ModelParams, data: Dataset):
    out = np.empty(data.n)
    e, c, r = data.is_event, data.is_cured, data.is_censored
    out[e] = (ev.log_p[e] + np.log(params.lam[data.event_index[e]]) + ev.eta2[e]
              + ev.log_s_x[e])
    out[c] = ev.log_1mp[c]
    out[r] = np.logaddexp(ev.log_1mp[r], ev.log_p[r] + ev.log_s_x[r])
    return out


def observed_loglik(params: ModelParams, data: Dataset, per_subject: bool = False):
    """Log of the observed-data likelihood conditional on entry.

    Each subject contributes its event/cure/censoring term divided by the
    probability ``1 - p + p S(Q)`` of surviving past its entry time.
    """
    ev = _Evaluated(params, data)
    terms = _numerator_terms(ev, params, data)
    terms -= np.logaddexp(ev.log_1mp, ev.log_p + ev.log_s_q)
    if not np.all(np.isfinite(terms)):
        raise ValueError("observed log-likelihood is not finite")
    return terms if per_subject else float(terms.sum())


def marginal_loglik_tilde(params: ModelParams, data: Dataset, per_subject: bool = False):
    """Log-likelihood obtained by summing the complete-data likelihood over
    the latent cure indicator, copy counts and copy times.

    Identical to :func:`observed_loglik` except that each denominator is
    ``1 - p sum_{t_k < Q} f(t_k)``. This is the objective the EM ascends.
    """
    ev = _Evaluated(params, data)
    terms = _numerator_terms(ev, params, data)
    f = ghost_event_masses(params, data)
    q = np.exp(ev.log_p) * f.sum(axis=1)
    if np.any(q >= 1.0):
        bad = int(np.argmax(q))
        raise GhostMassOverflowError(
            f"truncated-copy mass {q[bad]:.6g} >= 1 for subject {data.ids[bad]!r}")
    terms -= np.log1p(-q)
    if not np.all(np.isfinite(terms)):
        raise ValueError("marginal log-likelihood is not finite")
    return terms if per_subject else float(terms.sum())
