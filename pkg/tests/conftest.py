import numpy as np
import pytest

from curefit.model import Status, build_dataset
from curefit.simulate import SimConfig, gen_trial


def make_data(rows, tau=20.0):
    """rows: (q, x, status, z1 without intercept, z2)."""
    recs = [(i, q, x, st, (1.0, *z1), tuple(z2)) for i, (q, x, st, z1, z2) in enumerate(rows)]
    return build_dataset(recs, tau)


def sim(n=200, trunc=0.1, cens=0.2, seed=1, trial=1, **kw):
    return gen_trial(SimConfig(n=n, trunc_target=trunc, cens_target=cens,
                               master_seed=seed, **kw), trial)


@pytest.fixture
def small_truncated():
    return sim(n=60, trunc=0.2, cens=0.2, seed=3)


@pytest.fixture(scope="session")
def medium_fit():
    from curefit.em import fit_em
    data = sim(n=300, trunc=0.1, cens=0.2, seed=21)
    return data, fit_em(data)


E, C, R = Status.EVENT, Status.CURED, Status.CENSORED
