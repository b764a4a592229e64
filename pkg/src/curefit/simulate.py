"""Synthetic cohorts with an observable cure horizon and Monte Carlo studies.

Each candidate subject gets ``Z1 ~ N(4, 1)`` and ``Z2 ~ Bernoulli(0.3)``,
an uncured indicator drawn from the logistic incidence model, and (if
uncured) an event time ``T = 20 {1 - U^exp(-beta'Z)}``, whose baseline
cumulative hazard is ``-log(1 - t/20)``. Candidates with ``T <= Q``,
``Q ~ U(0, a)``, are discarded; censoring is ``C ~ U(15, b)``. The first
``n`` retained candidates form the sample.

Seeds
-----
Trial ``j`` of a study uses
``np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(j,)))``,
so trials can run in any order or in parallel. The truncation and censoring
bounds are calibrated once per study from fixed seeds independent of the
master seed.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.special import expit

from .em import EMConfig, fit_em
from .exceptions import CalibrationError, CureFitError
from .io import dump_json, write_rows_csv
from .model import Dataset, Status, _assemble

logger = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_ALPHA",
    "DEFAULT_BETA",
    "SimConfig",
    "ParamSummary",
    "StudySummary",
    "trial_rng",
    "gen_trial",
    "calibrate_truncation_bound",
    "calibrate_censoring_bound",
    "resolve_bounds",
    "run_study",
    "true_cumhaz",
]

DEFAULT_ALPHA = (1.0, -0.63, 1.0)
DEFAULT_BETA = (-0.2, 0.3)
PARAM_NAMES = ("alpha0", "alpha1", "alpha2", "beta1", "beta2")

TRUNC_CALIBRATION_SEED = 0x7A11
CENS_CALIBRATION_SEED = 0xCE45
CALIBRATION_DRAWS = 200_000
CALIBRATION_TOL = 0.005
MIN_RETENTION = 0.01
Z_975 = 1.959964


def true_cumhaz(t, tau: float = 20.0):
    """Baseline cumulative hazard implied by the event-time generator."""
    return -np.log1p(-np.asarray(t, dtype=float) / tau)


@dataclass(frozen=True)
class SimConfig:
    """Simulation scenario.

    ``trunc_bound``/``cens_bound`` override calibration when given; a
    truncation bound of 0 means no truncation and a censoring bound of
    ``inf`` means no censoring.
    """

    n: int = 1000
    alpha_true: tuple = DEFAULT_ALPHA
    beta_true: tuple = DEFAULT_BETA
    tau: float = 20.0
    trunc_target: float = 0.0
    cens_target: float = 0.0
    trunc_bound: float | None = None
    cens_bound: float | None = None
    master_seed: int = 0
    n_trials: int = 1

    def __post_init__(self):
        object.__setattr__(self, "alpha_true", tuple(float(a) for a in self.alpha_true))
        object.__setattr__(self, "beta_true", tuple(float(b) for b in self.beta_true))
        if len(self.alpha_true) != 3 or len(self.beta_true) != 2:
            raise ValueError("alpha_true needs 3 entries and beta_true 2")
        if self.n < 1 or self.n_trials < 1:
            raise ValueError("n and n_trials must be positive")
        if self.tau != 20.0:
            raise ValueError("the generator is defined for tau = 20")
        for name in ("trunc_target", "cens_target"):
            v = getattr(self, name)
            if not 0.0 <= v <= 0.5:
                raise ValueError(f"{name} must lie in [0, 0.5], got {v}")
        if self.trunc_bound is not None and not 0.0 <= self.trunc_bound < 15.0:
            raise ValueError("truncation bound must satisfy 0 <= a < 15")
        if self.cens_bound is not None and not self.cens_bound > 20.0:
            raise ValueError("censoring bound must exceed 20")
        if not 0 <= self.master_seed < 2 ** 64:
            raise ValueError("master_seed must be a 64-bit unsigned integer")

    @property
    def label(self) -> str:
        return (f"n{self.n}_trunc{round(100 * self.trunc_target)}"
                f"_cens{round(100 * self.cens_target)}")


def trial_rng(master_seed: int, trial_index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(entropy=master_seed, spawn_key=(trial_index,)))


def _event_time(u, z1, z2, beta):
    return 20.0 * (1.0 - u ** np.exp(-(beta[0] * z1 + beta[1] * z2)))


def _draw_candidates(rng, m, alpha, beta, a, b):
    z1 = rng.normal(4.0, 1.0, m)
    z2 = (rng.random(m) < 0.3).astype(float)
    uncured = rng.random(m) < expit(alpha[0] + alpha[1] * z1 + alpha[2] * z2)
    u = rng.random(m)
    t = np.where(uncured, _event_time(u, z1, z2, beta), np.inf)
    q = a * rng.random(m) if a > 0 else np.zeros(m)
    c = 15.0 + (b - 15.0) * rng.random(m) if math.isfinite(b) else np.full(m, np.inf)
    return z1, z2, uncured, t, q, c


# ---------------------------------------------------------------- calibration
@lru_cache(maxsize=64)
def _truncation_bound(alpha, beta, target):
    if target == 0.0:
        return 0.0
    # CALIBRATION_DRAWS uncured candidates; the rate is P(T <= Q | uncured)
    rng = np.random.default_rng(TRUNC_CALIBRATION_SEED)
    chunks = []
    got = 0
    while got < CALIBRATION_DRAWS:
        z1, z2, uncured, t, _, _ = _draw_candidates(rng, CALIBRATION_DRAWS, alpha, beta,
                                                    0.0, math.inf)
        chunks.append(t[uncured])
        got += chunks[-1].size
    t = np.concatenate(chunks)[:CALIBRATION_DRAWS]
    v = rng.random(CALIBRATION_DRAWS)

    def rate(a):
        return float(np.mean(t <= a * v))

    lo, hi = 0.01, 14.99
    if not rate(lo) - CALIBRATION_TOL <= target <= rate(hi) + CALIBRATION_TOL:
        raise CalibrationError(
            f"truncation target {target:.3f} outside achievable range "
            f"[{rate(lo):.4f}, {rate(hi):.4f}]")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if rate(mid) < target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-10:
            break
    a = 0.5 * (lo + hi)
    if abs(rate(a) - target) > CALIBRATION_TOL:
        raise CalibrationError(f"truncation calibration missed target {target:.3f}")
    return a


@lru_cache(maxsize=64)
def _censoring_bound(alpha, beta, a, target):
    if target == 0.0:
        return math.inf
    rng = np.random.default_rng(CENS_CALIBRATION_SEED)
    z1, z2, uncured, t, q, _ = _draw_candidates(rng, CALIBRATION_DRAWS, alpha, beta,
                                                a, math.inf)
    keep = ~(t <= q)
    horizon = np.minimum(t[keep], 20.0)
    w = rng.random(CALIBRATION_DRAWS)[keep]

    def rate(b):
        return float(np.mean(15.0 + (b - 15.0) * w < horizon))

    lo, hi = 20.01, 2000.0
    if not rate(hi) - CALIBRATION_TOL <= target <= rate(lo) + CALIBRATION_TOL:
        raise CalibrationError(
            f"censoring target {target:.3f} outside achievable range "
            f"[{rate(hi):.4f}, {rate(lo):.4f}]")
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if rate(mid) > target:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-9:
            break
    b = 0.5 * (lo + hi)
    if abs(rate(b) - target) > CALIBRATION_TOL:
        raise CalibrationError(f"censoring calibration missed target {target:.3f}")
    return b


def calibrate_truncation_bound(cfg: SimConfig) -> float:
    """Bound ``a`` such that ``P(T <= Q | uncured)`` matches the target.

    Returns 0 (no truncation) for a zero target.
    """
    return _truncation_bound(cfg.alpha_true, cfg.beta_true, float(cfg.trunc_target))


def calibrate_censoring_bound(cfg: SimConfig) -> float:
    """Bound ``b`` such that ``P(C < min(T, 20))`` among retained subjects
    matches the target. Returns ``inf`` (no censoring) for a zero target."""
    a = cfg.trunc_bound if cfg.trunc_bound is not None else calibrate_truncation_bound(cfg)
    return _censoring_bound(cfg.alpha_true, cfg.beta_true, float(a),
                            float(cfg.cens_target))


def resolve_bounds(cfg: SimConfig) -> SimConfig:
    """Copy of ``cfg`` with both bounds filled in (calibrating if needed)."""
    a = cfg.trunc_bound if cfg.trunc_bound is not None else calibrate_truncation_bound(cfg)
    cfg = replace(cfg, trunc_bound=a)
    b = cfg.cens_bound if cfg.cens_bound is not None else calibrate_censoring_bound(cfg)
    return replace(cfg, cens_bound=b)


# ------------------------------------------------------------------ generation
def gen_trial(cfg: SimConfig, trial_index: int, rng: np.random.Generator | None = None
              ) -> Dataset:
    """Draw the sample for one trial.

    Candidates are generated in blocks and filtered until ``cfg.n`` have been
    retained; the retained subjects are kept in generation order.

    Raises
    ------
    CalibrationError
        When fewer than 1% of candidates survive truncation.
    """
    cfg = resolve_bounds(cfg)
    if rng is None:
        rng = trial_rng(cfg.master_seed, trial_index)
    a, b = cfg.trunc_bound, cfg.cens_bound
    block = max(256, 2 * cfg.n)
    parts = []
    kept = drawn = 0
    while kept < cfg.n:
        z1, z2, uncured, t, q, c = _draw_candidates(rng, block, cfg.alpha_true,
                                                    cfg.beta_true, a, b)
        drawn += block
        keep = ~(t <= q)
        kept += int(keep.sum())
        parts.append((z1[keep], z2[keep], uncured[keep], t[keep], q[keep], c[keep]))
        if kept < cfg.n and kept < MIN_RETENTION * drawn:
            raise CalibrationError(f"retention rate {kept / drawn:.4f} below 1%")
    z1, z2, uncured, t, q, c = (np.concatenate(col)[:cfg.n] for col in zip(*parts))
    tau = cfg.tau
    event = uncured & (t <= c)
    cured = ~uncured & (c >= tau)
    status = np.full(cfg.n, Status.CENSORED, dtype=np.int8)
    status[event] = Status.EVENT
    status[cured] = Status.CURED
    x = np.minimum(np.minimum(t, c), tau)
    return _assemble(list(range(1, cfg.n + 1)), q, x, status,
                     np.column_stack([np.ones(cfg.n), z1, z2]),
                     np.column_stack([z1, z2]), tau,
                     ("intercept", "z1", "z2"), ("z1", "z2"))


# ---------------------------------------------------------------------- study
@dataclass
class TrialOutcome:
    index: int
    estimate: np.ndarray | None = None
    se: np.ndarray | None = None
    converged: bool = False
    error: str | None = None

    @property
    def usable(self) -> bool:
        return (self.error is None and self.converged and self.se is not None
                and bool(np.all(np.isfinite(self.se))))


@dataclass(frozen=True)
class ParamSummary:
    param: str
    truth: float
    estimate_mean: float
    sample_sd: float | None
    mean_se: float
    coverage: float
    n_trials: int
    n_failed: int


@dataclass
class StudySummary:
    scenario: str
    config: SimConfig
    rows: list
    trials: list = field(default_factory=list, repr=False)

    @property
    def n_failed(self) -> int:
        return sum(not t.usable for t in self.trials)

    def row(self, param: str) -> ParamSummary:
        return next(r for r in self.rows if r.param == param)

    def to_dict(self) -> dict:
        cfg = asdict(self.config)
        return {
            "scenario": self.scenario,
            "config": cfg,
            "n_failed": self.n_failed,
            "sd_available": all(r.sample_sd is not None for r in self.rows),
            "params": [asdict(r) for r in self.rows],
        }


CSV_COLUMNS = ("scenario", "param", "truth", "estimate_mean", "sample_sd", "mean_se",
               "coverage", "n_trials", "n_failed")


def write_study_csv(fh, summaries) -> None:
    rows = ([s.scenario, r.param, r.truth, r.estimate_mean, r.sample_sd, r.mean_se,
             r.coverage, r.n_trials, r.n_failed]
            for s in summaries for r in s.rows)
    write_rows_csv(fh, CSV_COLUMNS, rows)


def write_study_json(fh, summaries) -> None:
    dump_json({"schema_version": 1, "studies": [s.to_dict() for s in summaries]}, fh)


def _run_trial(args) -> TrialOutcome:
    cfg, j, em_cfg = args
    out = TrialOutcome(j)
    try:
        data = gen_trial(cfg, j)
        fit = fit_em(data, em_cfg)
    except (CureFitError, FloatingPointError) as exc:
        out.error = f"{type(exc).__name__}: {exc}"
        return out
    out.estimate = fit.coef
    out.se = fit.se
    out.converged = fit.converged
    return out


def summarize(cfg: SimConfig, trials) -> StudySummary:
    truth = np.array(cfg.alpha_true + cfg.beta_true)
    good = [t for t in trials if t.usable]
    failed = len(trials) - len(good)
    rows = []
    if good:
        est = np.array([t.estimate for t in good])
        se = np.array([t.se for t in good])
        cover = np.abs(est - truth) <= Z_975 * se
        sd = est.std(axis=0, ddof=1) if len(good) > 1 else [None] * truth.size
        for j, name in enumerate(PARAM_NAMES):
            rows.append(ParamSummary(
                name, float(truth[j]), float(est[:, j].mean()),
                None if sd[j] is None else float(sd[j]), float(se[:, j].mean()),
                float(cover[:, j].mean()), len(good), failed))
    else:
        nan = float("nan")
        rows = [ParamSummary(name, float(truth[j]), nan, None, nan, nan, 0, failed)
                for j, name in enumerate(PARAM_NAMES)]
    return StudySummary(cfg.label, cfg, rows, list(trials))


def run_study(cfg: SimConfig, n_jobs: int = 1, em_cfg: EMConfig = EMConfig()
              ) -> StudySummary:
    """Fit ``cfg.n_trials`` simulated datasets and summarize the estimates.

    Trials that raise, fail to converge or lack standard errors are counted
    in ``n_failed`` and excluded from every summary column. Coverage uses
    the Wald interval ``estimate +- 1.959964 SE``.
    """
    cfg = resolve_bounds(cfg)
    jobs = [(cfg, j, em_cfg) for j in range(1, cfg.n_trials + 1)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            trials = list(pool.map(_run_trial, jobs, chunksize=4))
    else:
        trials = [_run_trial(job) for job in jobs]
    for t in trials:
        if t.error:
            logger.warning("trial %d failed: %s", t.index, t.error)
    return summarize(cfg, trials)
