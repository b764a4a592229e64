import io
import json
import math

import numpy as np
import pytest
from scipy import integrate, stats
from scipy.special import expit

from curefit.exceptions import CalibrationError
from curefit.simulate import (PARAM_NAMES, SimConfig, DEFAULT_ALPHA, TrialOutcome,
                              _draw_candidates, calibrate_censoring_bound,
                              calibrate_truncation_bound, gen_trial, resolve_bounds,
                              run_study, summarize, trial_rng, true_cumhaz,
                              write_study_csv, write_study_json)


def _cured_probability(alpha):
    # E over Z1 ~ N(4, 1), Z2 ~ Bernoulli(0.3) of 1 - p(z)
    def inner(z2):
        f = lambda z1: (1 - expit(alpha[0] + alpha[1] * z1 + alpha[2] * z2)) \
            * stats.norm.pdf(z1, 4, 1)  # noqa: E731
        return integrate.quad(f, -np.inf, np.inf)[0]
    return 0.7 * inner(0.0) + 0.3 * inner(1.0)


def test_cured_fraction_matches_integral():
    data = gen_trial(SimConfig(n=10000, master_seed=17), 1)
    truth = _cured_probability(DEFAULT_ALPHA)
    assert 0.70 < truth < 0.80
    frac = np.mean(data.is_cured)
    assert abs(frac - truth) < 3 * math.sqrt(truth * (1 - truth) / data.n)


def test_event_times_uniform_when_beta_zero():
    # beta = 0 gives T = 20 (1 - U), i.e. uniform on (0, 20)
    data = gen_trial(SimConfig(n=4000, beta_true=(0.0, 0.0), master_seed=18), 1)
    t = data.time[data.is_event]
    assert stats.kstest(t, stats.uniform(0, 20).cdf).pvalue > 1e-3


def test_true_cumhaz_matches_generator():
    rng = np.random.default_rng(0)
    t = 20 * (1 - rng.random(200000))
    for s in (2.0, 8.0, 15.0):
        assert np.mean(t > s) == pytest.approx(math.exp(-true_cumhaz(s)), abs=5e-3)


def test_structure_of_generated_data():
    data = gen_trial(SimConfig(n=500, trunc_target=0.1, cens_target=0.2, master_seed=2), 3)
    assert data.n == 500
    assert list(data.ids) == list(range(1, 501))
    assert np.all(data.entry < data.time) and np.all(data.time <= 20)
    assert np.all(data.time[data.is_cured] == 20)
    assert np.all(data.time[~data.is_cured] < 20)
    assert np.array_equal(data.z1[:, 0], np.ones(500))
    assert np.array_equal(data.z1[:, 1:], data.z2)
    assert set(np.unique(data.z2[:, 1])) <= {0.0, 1.0}


def test_truncation_calibration_hits_target():
    bounds = [calibrate_truncation_bound(SimConfig(trunc_target=r)) for r in (0.05, 0.1, 0.2)]
    assert bounds[0] < bounds[1] < bounds[2]
    # independent check on fresh draws
    rng = np.random.default_rng(99)
    for r, a in zip((0.05, 0.1, 0.2), bounds):
        _, _, uncured, t, q, _ = _draw_candidates(rng, 200000, DEFAULT_ALPHA, (-0.2, 0.3),
                                                  a, math.inf)
        assert np.mean(t[uncured] <= q[uncured]) == pytest.approx(r, abs=0.006)
    assert calibrate_truncation_bound(SimConfig()) == 0.0


def test_infeasible_truncation_target():
    with pytest.raises(CalibrationError):
        calibrate_truncation_bound(SimConfig(trunc_target=0.3))


def test_censoring_calibration_hits_target():
    cfg = SimConfig(n=20000, trunc_target=0.1, cens_target=0.2, master_seed=5)
    data = gen_trial(cfg, 1)
    assert np.mean(data.is_censored) == pytest.approx(0.2, abs=0.012)
    assert calibrate_censoring_bound(SimConfig(cens_target=0.4)) < \
        calibrate_censoring_bound(SimConfig(cens_target=0.2))
    assert calibrate_censoring_bound(SimConfig()) == math.inf


def test_censoring_bound_25_halves_followup_past_20():
    rng = np.random.default_rng(3)
    *_, c = _draw_candidates(rng, 100000, DEFAULT_ALPHA, (-0.2, 0.3), 0.0, 25.0)
    assert np.all((c >= 15) & (c <= 25))
    assert np.mean(c < 20) == pytest.approx(0.5, abs=0.01)


def test_determinism_and_trial_independence():
    cfg = SimConfig(n=200, trunc_target=0.1, cens_target=0.2, master_seed=123)
    a, b = gen_trial(cfg, 4), gen_trial(cfg, 4)
    assert np.array_equal(a.time, b.time) and np.array_equal(a.z1, b.z1)
    c = gen_trial(cfg, 5)
    assert not np.array_equal(a.time, c.time)
    explicit = gen_trial(cfg, 4, rng=trial_rng(123, 4))
    assert np.array_equal(a.time, explicit.time)
    other = gen_trial(SimConfig(n=200, trunc_target=0.1, cens_target=0.2, master_seed=124), 4)
    assert not np.array_equal(a.time, other.time)


def test_resolve_bounds_keeps_overrides():
    cfg = resolve_bounds(SimConfig(trunc_bound=3.0, cens_bound=40.0))
    assert cfg.trunc_bound == 3.0 and cfg.cens_bound == 40.0


def test_config_validation_and_label():
    assert SimConfig(n=200, trunc_target=0.1, cens_target=0.2).label == "n200_trunc10_cens20"
    for bad in (dict(n=0), dict(tau=10.0), dict(trunc_target=0.6),
                dict(cens_bound=18.0), dict(alpha_true=(1, 2))):
        with pytest.raises(ValueError):
            SimConfig(**bad)


def test_single_trial_has_no_sample_sd():
    s = run_study(SimConfig(n=200, trunc_target=0.1, cens_target=0.2, master_seed=7))
    assert [r.param for r in s.rows] == list(PARAM_NAMES)
    assert all(r.sample_sd is None for r in s.rows)
    assert s.to_dict()["sd_available"] is False
    buf = io.StringIO()
    write_study_csv(buf, [s])
    line = buf.getvalue().splitlines()[1].split(",")
    assert line[0] == "n200_trunc10_cens20" and line[4] == ""


def test_summary_excludes_failed_trials():
    cfg = SimConfig(n_trials=3)
    good = [TrialOutcome(1, np.zeros(5), np.ones(5), True),
            TrialOutcome(2, np.full(5, 2.0), np.ones(5), True)]
    bad = [TrialOutcome(3, error="SolverError: x")]
    s = summarize(cfg, good + bad)
    r = s.row("alpha0")
    assert s.n_failed == 1 and r.n_trials == 2 and r.n_failed == 1
    assert r.estimate_mean == 1.0 and r.sample_sd == pytest.approx(math.sqrt(2))
    # truth 1: |0 - 1| and |2 - 1| both within 1.96
    assert r.coverage == 1.0
    buf = io.StringIO()
    write_study_json(buf, [s])
    doc = json.loads(buf.getvalue())
    assert doc["schema_version"] == 1 and doc["studies"][0]["n_failed"] == 1


def test_study_is_reproducible_and_parallel_safe():
    cfg = SimConfig(n=150, trunc_target=0.1, cens_target=0.2, master_seed=9, n_trials=4)
    a = run_study(cfg)
    b = run_study(cfg, n_jobs=2)
    for ra, rb in zip(a.rows, b.rows):
        assert ra == rb


def test_covariate_marginals():
    data = gen_trial(SimConfig(n=10000, trunc_target=0.1, master_seed=31), 1)
    assert data.z2[:, 0].mean() == pytest.approx(4.0, abs=0.05)
    assert data.z2[:, 1].mean() == pytest.approx(0.3, abs=0.02)


def test_truncation_lowers_event_fraction():
    # without censoring every uncured subject has an event before 20, so the
    # population event fraction is P(uncured); truncation removes early events
    population = 1 - _cured_probability(DEFAULT_ALPHA)
    cfg = SimConfig(n=400, trunc_target=0.2, master_seed=41)
    fracs = [np.mean(gen_trial(cfg, j).is_event) for j in range(1, 51)]
    assert np.mean(fracs) < population
