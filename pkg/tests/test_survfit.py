import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from statsmodels.duration.survfunc import SurvfuncRight

from curefit.exceptions import DataValidationError
from curefit.survfit import kaplan_meier, km_left_truncated, write_curve_csv

from conftest import C, E, R, make_data, sim

# entry, time, event; hand-enumerated risk sets entry < t <= time:
#   t=2: {1,2,3,6} d=1   t=3: {2,3,4,6} d=1   t=5: {4,5,6} d=1   t=6.5: {6} d=1
SIX = (np.array([0, 0, 1, 2.5, 3.5, 0]), np.array([2, 4, 3, 5, 6, 6.5]),
       np.array([1, 0, 1, 1, 0, 1], bool))


def test_three_subject_example():
    c = kaplan_meier([0, 0, 0], [1, 2, 3], [True, True, True])
    assert np.allclose(c.survival, [2 / 3, 1 / 3, 0.0], rtol=0, atol=1e-15)
    assert np.array_equal(c.n_risk, [3, 2, 1])
    assert c.variance[0] == pytest.approx((2 / 3) ** 2 * (1 / 6))
    assert np.isnan(c.variance[-1]) and np.isnan(c.ci_low[-1])


def test_six_subject_truncated_example():
    c = kaplan_meier(*SIX)
    assert np.array_equal(c.time, [2, 3, 5, 6.5])
    assert np.array_equal(c.n_risk, [4, 4, 3, 1])
    assert np.array_equal(c.n_event, [1, 1, 1, 1])
    assert np.allclose(c.survival, [3 / 4, 9 / 16, 3 / 8, 0.0], rtol=0, atol=1e-15)
    assert c.variance[0] == pytest.approx(9 / 16 / 12)
    assert c.variance[1] == pytest.approx((9 / 16) ** 2 * (1 / 12 + 1 / 12))


def test_late_entry_excluded_from_earlier_risk_set():
    c = kaplan_meier([0, 0, 5], [2, 6, 7], [True, True, False])
    # subject 3 enters at 5, so only subjects 1 and 2 are at risk at t = 2
    assert c.n_risk[0] == 2


def test_tied_censoring_is_at_risk():
    c = kaplan_meier([0, 0, 0], [2, 2, 3], [True, False, True])
    assert c.n_risk[0] == 3 and c.survival[0] == pytest.approx(2 / 3)


def test_step_function_evaluation():
    c = kaplan_meier(*SIX)
    assert np.allclose(c([0.0, 1.99, 2.0, 4.0, 10.0]), [1, 1, 3 / 4, 9 / 16, 0])


def test_confidence_limits_log_scale():
    c = kaplan_meier(*SIX)
    half = 1.959964 * np.sqrt(c.variance[:3]) / c.survival[:3]
    assert np.allclose(c.ci_low[:3], np.clip(c.survival[:3] * np.exp(-half), 0, 1))
    assert np.allclose(c.ci_high[:3], np.clip(c.survival[:3] * np.exp(half), 0, 1))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_untruncated_reduction_matches_statsmodels(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 40))
    t = np.round(rng.exponential(5, n), 1) + 0.1
    e = rng.random(n) < 0.7
    e[0] = True
    c = kaplan_meier(np.zeros(n), t, e)
    ref = SurvfuncRight(t, e.astype(int))
    keep = ref.n_events > 0
    assert np.allclose(c.time, ref.surv_times[keep])
    assert np.allclose(c.survival, ref.surv_prob[keep], rtol=1e-12, atol=1e-14)
    ok = np.isfinite(c.variance)
    assert np.allclose(c.std_err[ok], ref.surv_prob_se[keep][ok], rtol=1e-9, atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_survival_monotone_and_bounded(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 50))
    q = rng.uniform(0, 3, n)
    x = q + rng.exponential(4, n) + 1e-3
    e = rng.random(n) < 0.6
    e[np.argmin(q)] = True
    try:
        c = kaplan_meier(q, x, e)
    except DataValidationError:
        return
    assert np.all(np.diff(c.survival) <= 0)
    assert np.all((c.survival >= 0) & (c.survival <= 1))
    assert np.all(c.n_risk >= c.n_event)


def test_full_realization_without_censoring():
    c = kaplan_meier(np.zeros(5), [1, 2, 3, 4, 5], np.ones(5, bool))
    assert c.survival[-1] == 0.0


def test_dataset_wrapper_and_subgroup():
    data = make_data([(0, 1.0, E, (), (0.0,)), (0, 2.0, E, (), (1.0,)),
                      (0.5, 3.0, R, (), (1.0,)), (0, 20.0, C, (), (0.0,))])
    full = km_left_truncated(data)
    # cured subject is censored at 20 and counts in every risk set
    assert np.array_equal(full.n_risk, [4, 3])
    sub = km_left_truncated(data, lambda d: d.z2[:, 0] == 1.0)
    assert np.array_equal(sub.n_risk, [2]) and sub.survival[0] == 0.5
    idx = km_left_truncated(data, np.array([0, 3]))
    assert np.array_equal(idx.n_risk, [2])


def test_no_events_raises():
    with pytest.raises(DataValidationError):
        kaplan_meier([0, 0], [1, 2], [False, False])


def test_curve_csv():
    buf = io.StringIO()
    write_curve_csv(buf, kaplan_meier(*SIX))
    lines = buf.getvalue().splitlines()
    assert lines[0] == "time,n_risk,n_event,survival,std_err,ci_low,ci_high"
    assert lines[1].startswith("2,4,1,0.75,")
    assert lines[-1].endswith(",nan,nan,nan")


def test_simulated_truncated_curve_runs():
    data = sim(n=300, trunc=0.2, cens=0.2, seed=2)
    c = km_left_truncated(data)
    assert c.time.size == data.K
