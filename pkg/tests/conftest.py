"""Shared fixtures: the six-state transplant model, its worked example subjects,
and small synthetic models used as ground-truth oracles."""

import numpy as np
import pandas as pd
import pytest

from mscure import validate_model_spec
from mscure.simulate import load_true_model

# Six-state model: 1 initial, 2 recovery, 3 adverse event, 4 both, 5 relapse
# (the single non-cure state), 6 death (absorbing). Transition ids follow the
# lexicographic (from, to) order, giving ids 1..13.
SIXSTATE_TRANSITIONS = [
    [1, 2], [1, 3], [1, 5], [1, 6],
    [2, 4], [2, 5], [2, 6],
    [3, 4], [3, 5], [3, 6],
    [4, 5], [4, 6],
    [5, 6],
]

SIXSTATE_CONFIG = {
    "states": [1, 2, 3, 4, 5, 6],
    "absorbing": [6],
    "transitions": SIXSTATE_TRANSITIONS,
    "non_cure_states": [5],
    "covariates": {
        "cure": ["year", "age", "proph", "match"],
        "survival": ["year", "age", "proph", "match"],
        "encodings": {
            "year": {
                "type": "factor",
                "levels": ["1985-1989", "1990-1994", "1995-1998"],
                "reference": "1985-1989",
            },
            "age": {"type": "factor", "levels": ["<=20", "20-40", ">40"], "reference": "<=20"},
            "proph": {"type": "factor", "levels": ["no", "yes"], "reference": "no"},
            "match": {
                "type": "factor",
                "levels": ["no gender mismatch", "gender mismatch"],
                "reference": "no gender mismatch",
            },
        },
    },
    "data_columns": {
        "2": {"time": "rec", "status": "rec.s"},
        "3": {"time": "ae", "status": "ae.s"},
        "4": {"time": "recae", "status": "recae.s"},
        "5": {"time": "rel", "status": "rel.s"},
        "6": {"time": "srv", "status": "srv.s"},
    },
    "fit": {"epsilon": 1e-4, "max_iter": 500, "zero_tail": "off", "seed": 7},
}


@pytest.fixture(scope="session")
def sixstate_spec():
    return validate_model_spec(SIXSTATE_CONFIG)


@pytest.fixture(scope="session")
def example_subjects():
    """The three worked wide-format records (AE+death; AE+recovery+relapse+death;
    AE then censored)."""
    return pd.DataFrame(
        [
            {
                "id": 1, "rec": 143, "rec.s": 0, "ae": 60, "ae.s": 1, "recae": 143,
                "recae.s": 0, "rel": 143, "rel.s": 0, "srv": 143, "srv.s": 1,
                "year": "1985-1989", "age": ">40", "proph": "yes", "match": "gender mismatch",
            },
            {
                "id": 2, "rec": 29, "rec.s": 1, "ae": 12, "ae.s": 1, "recae": 29,
                "recae.s": 1, "rel": 422, "rel.s": 1, "srv": 579, "srv.s": 1,
                "year": "1995-1998", "age": "20-40", "proph": "no", "match": "no gender mismatch",
            },
            {
                "id": 3, "rec": 3687, "rec.s": 0, "ae": 14, "ae.s": 1, "recae": 3687,
                "recae.s": 0, "rel": 3687, "rel.s": 0, "srv": 3687, "srv.s": 0,
                "year": "1990-1994", "age": "20-40", "proph": "no", "match": "no gender mismatch",
            },
        ]
    )


# Three-state toy: 1 event-free, 2 relapse (non-cure), 3 death (absorbing).
# 1->2 leads into the non-cure state, 1->3 is the split transition carrying a
# cure effect, 2->3 is post-relapse death fitted outside the EM loop.
# Used for structural tests; its cure fraction is weakly identified, so
# fitting-accuracy tests use the four-state model below instead.
TOY3_CONFIG = {
    "states": [1, 2, 3],
    "absorbing": [3],
    "transitions": [[1, 2], [1, 3], [2, 3]],
    "non_cure_states": [2],
    "covariates": {
        "cure": ["z"],
        "survival": ["z"],
        "encodings": {"z": {"type": "numeric"}},
    },
    "fit": {"epsilon": 1e-4, "max_iter": 500, "zero_tail": "off", "seed": 1},
}

TOY3_TRUTH = {
    "model": TOY3_CONFIG,
    "alpha": {"intercept": 0.4, "z": -0.6},
    "transitions": {
        "1-2": {"beta": {"z": 0.5}, "baseline": {"breakpoints": [], "rates": [0.10]}},
        "1-3": {"beta": {"z": -0.4}, "gamma": -0.5,
                "baseline": {"breakpoints": [], "rates": [0.08]}},
        "2-3": {"beta": {"z": 0.3}, "baseline": {"breakpoints": [], "rates": [0.15]}},
    },
    "censoring": {"type": "uniform", "c_max": 18.0},
    "covariates": {"z": {"type": "bernoulli", "p": 0.5}},
}

# Four-state calibration model: 1 start, 2 response, 3 relapse (non-cure),
# 4 death (absorbing, reachable only after relapse). The cure effect sits on
# 1->2, where later relapsers contribute hard non-cured events, and the late
# relapse-hazard spike means susceptible subjects relapse within follow-up:
# the regime where the mixture is well identified. The zero-tail override
# (cured polarity) pins the handful of subjects censored past the last
# relapse, which also removes the slow EM direction.
TOY4_CONFIG = {
    "states": [1, 2, 3, 4],
    "absorbing": [4],
    "transitions": [[1, 2], [1, 3], [2, 3], [3, 4]],
    "non_cure_states": [3],
    "covariates": {
        "cure": ["z"],
        "survival": ["z"],
        "encodings": {"z": {"type": "numeric"}},
    },
    "fit": {"zero_tail": "cure_censored_after_tmax", "epsilon": 1e-6, "max_iter": 3000},
}

TOY4_TRUTH = {
    "model": TOY4_CONFIG,
    "alpha": {"intercept": 0.3, "z": -0.5},
    "transitions": {
        "1-2": {"beta": {"z": 0.3}, "gamma": -0.4,
                "baseline": {"breakpoints": [], "rates": [0.25]}},
        "1-3": {"beta": {"z": 0.2},
                "baseline": {"breakpoints": [20.0], "rates": [0.20, 2.0]}},
        "2-3": {"beta": {"z": 0.25},
                "baseline": {"breakpoints": [20.0], "rates": [0.25, 2.0]}},
        "3-4": {"beta": {"z": 0.2},
                "baseline": {"breakpoints": [], "rates": [0.20]}},
    },
    "censoring": {"type": "uniform", "c_max": 28.0},
    "covariates": {"z": {"type": "bernoulli", "p": 0.5}},
}

TOY4_TRUE_PARAMS = {
    "alpha:intercept": 0.3,
    "alpha:z": -0.5,
    "b[1->2]:z": 0.3,
    "b[1->2]:cure": -0.4,
    "b[1->3]:z": 0.2,
    "b[2->3]:z": 0.25,
    "b[3->4]:z": 0.2,
}


@pytest.fixture(scope="session")
def toy3_spec():
    return validate_model_spec(TOY3_CONFIG)


@pytest.fixture(scope="session")
def toy3_truth():
    return load_true_model(TOY3_TRUTH)


@pytest.fixture(scope="session")
def toy3_cohort(toy3_truth):
    from mscure import simulate_cohort

    return simulate_cohort(toy3_truth, n=300, seed=11)


@pytest.fixture(scope="session")
def toy4_spec():
    return validate_model_spec(TOY4_CONFIG)


@pytest.fixture(scope="session")
def toy4_truth():
    return load_true_model(TOY4_TRUTH)


@pytest.fixture(scope="session")
def toy4_cohort(toy4_truth):
    from mscure import simulate_cohort

    return simulate_cohort(toy4_truth, n=400, seed=11)


@pytest.fixture(scope="session")
def toy4_fit(toy4_cohort, toy4_spec):
    from mscure import em_fit

    return em_fit(toy4_cohort, toy4_spec)


def make_rng(seed=0):
    return np.random.default_rng(seed)
