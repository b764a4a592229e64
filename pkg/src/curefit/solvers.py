"""Weighted logistic and weighted Cox maximizers used by the M-step.

Both objectives are concave and are maximized by Newton's method with step
halving. The Cox part profiles the baseline jumps out in closed form
(Breslow-type), so Newton only runs over the regression coefficients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import expit

from .exceptions import (MaxIterError, NonConcaveStepError, SeparationError,
                         SingularHessianError, ZeroRiskError)
from .model import Dataset

__all__ = [
    "SolverConfig",
    "LogisticWeights",
    "CoxWeights",
    "weighted_logistic_fit",
    "logistic_objective",
    "logistic_information",
    "profile_lambda",
    "cox_loglik",
    "cox_profile_objective",
    "cox_profile_information",
    "weighted_cox_fit",
    "naive_cox_weights",
    "naive_cox_fit",
    "naive_logistic_weights",
    "naive_logistic_fit",
]

SEPARATION_BOUND = 50.0


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-8
    max_iter: int = 100
    step_halvings: int = 30

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True, eq=False)
class LogisticWeights:
    """Failure mass ``w0`` and success mass ``w1`` per subject."""

    w0: np.ndarray
    w1: np.ndarray

    def __post_init__(self):
        w0 = np.asarray(self.w0, dtype=float)
        w1 = np.asarray(self.w1, dtype=float)
        if w0.shape != w1.shape:
            raise ValueError("w0 and w1 shapes differ")
        if np.any(w0 < 0) or np.any(w1 < 0) or not (np.all(np.isfinite(w0))
                                                    and np.all(np.isfinite(w1))):
            raise ValueError("logistic weights must be finite and non-negative")
        object.__setattr__(self, "w0", w0)
        object.__setattr__(self, "w1", w1)


@dataclass(frozen=True, eq=False)
class CoxWeights:
    """Event-time masses ``w^f`` and tail masses ``w^S`` per subject.

    The ``w^f`` matrix is stored in two pieces: ``event`` is the mass each
    subject puts on its own observed event time, and ``ghost[i, k]`` is the
    mass on event time ``k`` coming from truncated copies (columns beyond
    ``ghost.shape[1]`` are zero). When ``entry_truncated`` is set, a subject
    only counts in the risk set at ``t_k`` if ``Q_i < t_k``; this is how the
    naive left-truncated Cox fit is expressed.
    """

    event: np.ndarray
    tail: np.ndarray
    ghost: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    entry_truncated: bool = False

    def __post_init__(self):
        event = np.asarray(self.event, dtype=float)
        tail = np.asarray(self.tail, dtype=float)
        ghost = np.asarray(self.ghost, dtype=float)
        if ghost.size == 0:
            ghost = np.zeros((event.shape[0], 0))
        for name, arr in (("event", event), ("tail", tail), ("ghost", ghost)):
            if np.any(arr < 0) or not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} weights must be finite and non-negative")
        if ghost.shape[1] and self.entry_truncated:
            raise ValueError("entry truncation cannot be combined with ghost mass")
        object.__setattr__(self, "event", event)
        object.__setattr__(self, "tail", tail)
        object.__setattr__(self, "ghost", ghost)

    def event_mass_matrix(self, data: Dataset) -> np.ndarray:
        """Dense ``w^f`` as an ``(n, K)`` array."""
        w = np.zeros((data.n, data.K))
        kg = self.ghost.shape[1]
        w[:, :kg] += self.ghost
        ev = data.event_index >= 0
        w[np.flatnonzero(ev), data.event_index[ev]] += self.event[ev]
        return w


def _flat_direction(fgh, x, step: float = 10.0) -> bool:
    """True when the objective does not drop along its least-curved direction.

    A concave objective with a finite, unique maximizer at ``x`` decreases
    strictly along every ray; separation or a covariate without variation
    leaves a direction where it stays (asymptotically) flat.
    """
    if x.size == 0:
        return False
    f, _, H = fgh(x)
    _, vecs = linalg.eigh(-H)
    v = vecs[:, 0]
    tol = 1e-9 * (1.0 + abs(f))
    for sign in (1.0, -1.0):
        with np.errstate(over="ignore", invalid="ignore"):
            f_far = fgh(x + sign * step * v)[0]
        if np.isfinite(f_far) and f_far >= f - tol:
            return True
    return False


def _newton_ascent(fgh, x0, cfg: SolverConfig, bound=None, on_bound=None):
    """Maximize a concave function given ``fgh(x) -> (f, g, H)``."""
    x = np.array(x0, dtype=float)
    f, g, H = fgh(x)
    for _ in range(cfg.max_iter):
        if x.size == 0 or np.max(np.abs(g)) <= cfg.tol:
            return x
        accepted = False
        for ridge_attempt in range(2):
            negH = -H
            if ridge_attempt:
                scale = np.trace(negH) / negH.shape[0]
                negH = negH + 1e-8 * scale * np.eye(negH.shape[0])
            try:
                cho = linalg.cho_factor(negH, check_finite=True)
                step = linalg.cho_solve(cho, g)
            except (linalg.LinAlgError, ValueError):
                if ridge_attempt:
                    raise SingularHessianError(
                        "Hessian is singular; a covariate may lack variation") from None
                continue
            decrement = float(g @ step)
            t = 1.0
            for _ in range(cfg.step_halvings + 1):
                x_new = x + t * step
                if bound is not None and np.max(np.abs(x_new)) > bound:
                    on_bound(x_new)
                f_new, g_new, H_new = fgh(x_new)
                if np.isfinite(f_new) and f_new >= f - 1e-12 * (1.0 + abs(f)):
                    accepted = True
                    break
                t *= 0.5
            if accepted:
                break
            if decrement <= 1e-13 * (1.0 + abs(f)):
                # gradient left over is roundoff
                return x
        if not accepted:
            raise NonConcaveStepError(
                f"Newton step failed to ascend (gradient sup-norm {np.max(np.abs(g)):.3g})")
        x, f, g, H = x_new, f_new, g_new, H_new
    if np.max(np.abs(g)) <= cfg.tol:
        return x
    raise MaxIterError(f"no convergence in {cfg.max_iter} Newton iterations "
                       f"(gradient sup-norm {np.max(np.abs(g)):.3g})")


# --------------------------------------------------------------------------
# logistic part
# --------------------------------------------------------------------------

def logistic_objective(alpha, z1, weights: LogisticWeights):
    """Value, gradient and Hessian of ``sum w1 log p + w0 log(1 - p)``."""
    eta = z1 @ alpha
    log_p = -np.logaddexp(0.0, -eta)
    log_1mp = -np.logaddexp(0.0, eta)
    p = expit(eta)
    tot = weights.w0 + weights.w1
    f = float(weights.w1 @ log_p + weights.w0 @ log_1mp)
    g = z1.T @ (weights.w1 - tot * p)
    H = -(z1.T * (tot * p * (1.0 - p))) @ z1
    return f, g, H


def logistic_information(alpha, z1, weights: LogisticWeights) -> np.ndarray:
    return -logistic_objective(alpha, z1, weights)[2]


def weighted_logistic_fit(z1, weights: LogisticWeights, init=None,
                          cfg: SolverConfig = SolverConfig()) -> np.ndarray:
    """Maximize the weighted logistic log-likelihood.

    Raises
    ------
    SeparationError
        If either total mass is zero or the iterates leave the box
        ``|alpha| <= 50``, i.e. the objective has no finite maximizer.
    """
    z1 = np.asarray(z1, dtype=float)
    if weights.w0.sum() <= 0 or weights.w1.sum() <= 0:
        raise SeparationError("both outcome classes need positive weight")
    x0 = np.zeros(z1.shape[1]) if init is None else np.asarray(init, dtype=float)

    def on_bound(x):
        raise SeparationError(
            f"logistic coefficients exceed {SEPARATION_BOUND:g}; data are separated")

    fgh = lambda a: logistic_objective(a, z1, weights)  # noqa: E731
    alpha = _newton_ascent(fgh, x0, cfg, bound=SEPARATION_BOUND, on_bound=on_bound)
    # under separation the gradient vanishes only asymptotically, so Newton
    # can stop on a near-flat ridge; detect it by the curvature
    if _flat_direction(fgh, alpha):
        raise SeparationError("logistic likelihood has no finite maximizer; "
                              "data are separated or a covariate is collinear")
    return alpha


def naive_logistic_weights(data: Dataset, exclude_censored: bool) -> LogisticWeights:
    w1 = data.is_event.astype(float)
    w0 = data.is_cured.astype(float)
    if not exclude_censored:
        w0 = w0 + data.is_censored
    return LogisticWeights(w0, w1)


def naive_logistic_fit(data: Dataset, exclude_censored: bool = True,
                       cfg: SolverConfig = SolverConfig()) -> np.ndarray:
    """Logistic regression of event (yes/no) on ``z1``.

    With ``exclude_censored`` the censored subjects are dropped; otherwise
    they count as non-events.
    """
    return weighted_logistic_fit(data.z1, naive_logistic_weights(data, exclude_censored),
                                 cfg=cfg)


# --------------------------------------------------------------------------
# Cox part
# --------------------------------------------------------------------------

class _RiskAtoms:
    """Risk mass as (subject, index, mass) atoms plus a dense copy block.

    An atom contributes ``mass * exp(beta'z2_subject)`` to every risk total
    ``R_h`` with ``h <= index``, so ``R`` is a reverse cumulative sum. Copy
    weights are kept per subject as reverse cumulative sums over event times,
    which turns their risk contribution into one matrix product.
    """

    def __init__(self, weights: CoxWeights, data: Dataset):
        if weights.event.shape[0] != data.n:
            raise ValueError("weights and data have different sizes")
        n, K = data.n, data.K
        ev = np.flatnonzero((data.event_index >= 0) & (weights.event > 0))
        tl = np.flatnonzero((weights.tail > 0) & (data.n_le_time > 0))
        subj = np.concatenate([ev, tl])
        idx = np.concatenate([data.event_index[ev], data.n_le_time[tl] - 1])
        mass = np.concatenate([weights.event[ev], weights.tail[tl]])
        if weights.entry_truncated:
            e = data.n_le_entry[subj]
            cut = e > 0
            subj = np.concatenate([subj, subj[cut]])
            idx = np.concatenate([idx, np.minimum(idx[cut], e[cut] - 1)])
            mass = np.concatenate([mass, -mass[cut]])
        self.subj, self.idx, self.mass = subj, idx, mass
        self.K = K
        z = data.z2
        self.z = z
        kg = weights.ghost.shape[1]
        self.kg = kg
        self.ghost_cum = (np.cumsum(weights.ghost[:, ::-1], axis=1)[:, ::-1]
                          if kg else None)
        # event mass D_k and the linear term sum_i W_i z_i
        D = np.bincount(data.event_index[ev], weights.event[ev], minlength=K)
        W = weights.event * (data.event_index >= 0)
        if kg:
            D[:kg] += weights.ghost.sum(axis=0)
            W = W + weights.ghost.sum(axis=1)
        self.D = D
        self.linear = z.T @ W
        if np.any(D <= 0):
            k = int(np.flatnonzero(D <= 0)[0])
            raise ZeroRiskError(f"event time index {k} carries no event mass")

    def risk(self, beta, order=0):
        n, d = self.z.shape
        hr_all = np.exp(self.z @ beta)
        feats = [np.ones((n, 1))]
        if order >= 1:
            feats.append(self.z)
        if order >= 2:
            feats.append((self.z[:, :, None] * self.z[:, None, :]).reshape(n, d * d))
        tot = self._totals(hr_all, np.hstack(feats))
        R = tot[:, 0]
        if np.any(R <= 0):
            k = int(np.flatnonzero(R <= 0)[0])
            raise ZeroRiskError(f"no risk mass at event time index {k}")
        if order == 0:
            return R
        R1 = tot[:, 1:1 + d]
        if order == 1:
            return R, R1
        return R, R1, tot[:, 1 + d:].reshape(self.K, d, d)

    def _totals(self, hr_all, feat):
        """Risk totals of ``hr_i * feat_i`` (feat is n x m) at every t_k."""
        vals = (hr_all[self.subj] * self.mass)[:, None] * feat[self.subj]
        out = np.column_stack([np.bincount(self.idx, vals[:, j], minlength=self.K)
                               for j in range(feat.shape[1])])
        out = np.cumsum(out[::-1], axis=0)[::-1]
        if self.kg:
            out[:self.kg] += self.ghost_cum.T @ (hr_all[:, None] * feat)
        return out


def profile_lambda(beta, weights: CoxWeights, data: Dataset) -> np.ndarray:
    """Closed-form maximizer of the weighted Cox objective in the jumps.

    ``lambda_k = D_k / R_k(beta)`` with ``D_k`` the event mass at ``t_k`` and
    ``R_k`` the exponentially tilted risk mass.
    """
    atoms = _RiskAtoms(weights, data)
    return atoms.D / atoms.risk(np.asarray(beta, dtype=float))


def cox_loglik(beta, lam, weights: CoxWeights, data: Dataset) -> float:
    """Weighted Cox objective ``sum w^f log f(t_k) + sum w^S log S(X)``."""
    atoms = _RiskAtoms(weights, data)
    beta = np.asarray(beta, dtype=float)
    lam = np.asarray(lam, dtype=float)
    R = atoms.risk(beta)
    return float(atoms.D @ np.log(lam) + atoms.linear @ beta - lam @ R)


def _profile_fgh(atoms: _RiskAtoms, beta):
    R, R1, R2 = atoms.risk(beta, order=2)
    D = atoms.D
    zbar = R1 / R[:, None]
    f = float(D @ np.log(D / R) + atoms.linear @ beta - D.sum())
    g = atoms.linear - D @ zbar
    H = -(np.einsum("k,kij->ij", D / R, R2) - np.einsum("k,ki,kj->ij", D, zbar, zbar))
    return f, g, H


def cox_profile_objective(beta, weights: CoxWeights, data: Dataset):
    """Profiled Cox objective with its analytic gradient and Hessian."""
    return _profile_fgh(_RiskAtoms(weights, data), np.asarray(beta, dtype=float))


def cox_profile_information(beta, weights: CoxWeights, data: Dataset) -> np.ndarray:
    return -cox_profile_objective(beta, weights, data)[2]


def weighted_cox_fit(weights: CoxWeights, data: Dataset, init_beta=None,
                     cfg: SolverConfig = SolverConfig()):
    """Jointly maximize the weighted Cox objective over (beta, lambda).

    Returns
    -------
    beta : ndarray
    lam : ndarray
        ``profile_lambda(beta)``.
    """
    atoms = _RiskAtoms(weights, data)
    d = data.z2.shape[1]
    x0 = np.zeros(d) if init_beta is None else np.asarray(init_beta, dtype=float)
    if d == 0:
        return x0, atoms.D / atoms.risk(x0)
    beta = _newton_ascent(lambda b: _profile_fgh(atoms, b), x0, cfg)
    if _flat_direction(lambda b: _profile_fgh(atoms, b), beta):
        raise SingularHessianError(
            "Cox information is singular; a covariate may lack variation")
    return beta, atoms.D / atoms.risk(beta)


def naive_cox_weights(data: Dataset) -> CoxWeights:
    ev = data.is_event.astype(float)
    return CoxWeights(event=ev, tail=1.0 - ev, entry_truncated=True)


def naive_cox_fit(data: Dataset, cfg: SolverConfig = SolverConfig()):
    """Left-truncated Cox-Breslow fit treating cured subjects as censored at tau.

    Subject ``i`` is at risk at ``t_k`` when ``Q_i < t_k <= X_i``.
    """
    return weighted_cox_fit(naive_cox_weights(data), data, cfg=cfg)
