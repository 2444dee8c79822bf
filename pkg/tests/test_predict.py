"""Aalen-Johansen branch matrices, cure posteriors, and mixed occupancy curves."""

import numpy as np
import pandas as pd
import pytest

from mscure import (
    dynamic_predict,
    posterior_cure_given_history,
    transition_probability_matrix,
    validate_model_spec,
)
from mscure.cox import BaselineHazard, CoxCoefficients, TransitionBaseline, TransitionCox
from mscure.em import FittedModel
from mscure.errors import PredictionError
from mscure.logistic import CureCoefficients, expit
from mscure.predict import History


def _two_state_model(times, increments, beta=0.4):
    """Hand-built alive->dead model for the product-limit oracle."""
    spec = validate_model_spec(
        {
            "states": [1, 2],
            "absorbing": [2],
            "transitions": [[1, 2]],
            "non_cure_states": [2],
            "covariates": {"cure": [], "survival": ["z"], "encodings": {}},
        }
    )
    cox = CoxCoefficients({1: TransitionCox(tid=1, names=["z"], beta=np.array([beta]), has_gamma=False)})
    baseline = BaselineHazard(
        {1: TransitionBaseline(times=np.asarray(times, dtype=float),
                               increments=np.asarray(increments, dtype=float))}
    )
    return FittedModel(
        spec=spec,
        alpha=CureCoefficients(alpha=np.array([0.0]), names=["intercept"]),
        cox=cox,
        baseline=baseline,
        subject_ids=np.array([1]),
        known_noncured=np.array([True]),
        weights=np.array([0.0]),
        pi=np.array([0.5]),
        loglik_trace=[0.0],
        converged=True,
        iterations=1,
    )


class TestTransitionProbabilityMatrix:
    def test_identity_at_landmark(self, toy4_fit):
        p = transition_probability_matrix(toy4_fit, {"z": 1.0}, g=0, s=3.0, t=3.0)
        np.testing.assert_array_equal(p, np.eye(4))

    def test_two_state_product_limit_oracle(self):
        rng = np.random.default_rng(7)
        times = np.sort(rng.uniform(0.5, 9.5, 12))
        incs = rng.uniform(0.01, 0.15, 12)
        model = _two_state_model(times, incs, beta=0.4)
        for z in (0.0, 1.0):
            p = transition_probability_matrix(model, {"z": z}, g=0, s=0.0, t=10.0)
            survival = np.prod(1.0 - incs * np.exp(0.4 * z))
            assert p[0, 0] == pytest.approx(survival, rel=1e-12)
            assert p[0, 1] == pytest.approx(1.0 - survival, rel=1e-12)

    def test_rows_sum_to_one(self, toy4_fit):
        rng = np.random.default_rng(3)
        for _ in range(10):
            s = float(rng.uniform(0, 4))
            t = s + float(rng.uniform(0, 5.0))
            g = int(rng.integers(0, 2))
            z = float(rng.integers(0, 2))
            p = transition_probability_matrix(toy4_fit, {"z": z}, g=g, s=s, t=t)
            np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-10)
            assert np.all(p >= 0)

    def test_chapman_kolmogorov(self, toy4_fit):
        z = {"z": 1.0}
        for g in (0, 1):
            p_su = transition_probability_matrix(toy4_fit, z, g=g, s=1.0, t=4.0)
            p_ut = transition_probability_matrix(toy4_fit, z, g=g, s=4.0, t=9.0)
            p_st = transition_probability_matrix(toy4_fit, z, g=g, s=1.0, t=9.0)
            np.testing.assert_allclose(p_su @ p_ut, p_st, atol=1e-10)

    def test_cured_branch_never_occupies_noncure_states(self, toy4_fit):
        p = transition_probability_matrix(toy4_fit, {"z": 0.0}, g=1, s=0.0, t=9.0)
        # from any cure-compatible state, the non-cure state 3 (and state 4,
        # reachable only through it) has exactly zero occupancy
        assert np.all(p[[0, 1], 2] == 0.0)
        assert np.all(p[[0, 1], 3] == 0.0)

    def test_negative_diagonal_is_an_error(self):
        model = _two_state_model([1.0], [0.9], beta=1.0)
        with pytest.raises(PredictionError, match="negative diagonal"):
            transition_probability_matrix(model, {"z": 1.0}, g=0, s=0.0, t=2.0)

    def test_time_order_validated(self, toy4_fit):
        with pytest.raises(PredictionError, match="s <= t"):
            transition_probability_matrix(toy4_fit, {"z": 0.0}, g=0, s=5.0, t=1.0)


class TestPosterior:
    def test_history_through_noncure_state_gives_zero(self, toy4_fit):
        t_rel = float(toy4_fit.baseline[2].times[0])
        hist = History(landmark=t_rel + 1.0, covariates={"z": 0.0}, path=[(3, t_rel)])
        assert posterior_cure_given_history(hist, toy4_fit) == 0.0

    def test_baseline_landmark_reduces_to_cure_probability(self, toy4_fit):
        hist = History(landmark=0.0, covariates={"z": 1.0}, path=[])
        z = np.array([1.0, 1.0])
        expected = float(expit(z @ toy4_fit.alpha.alpha))
        assert posterior_cure_given_history(hist, toy4_fit) == pytest.approx(expected, rel=1e-12)

    def test_matches_direct_bayes_oracle(self, toy4_fit):
        """Response at a fitted event time, censored at the landmark: the
        posterior must equal a from-scratch Bayes evaluation on the same rows."""
        model = toy4_fit
        t1 = float(model.baseline[1].times[4])  # an observed 1->2 event time
        for s in (t1 + 2.0, t1 + 6.0):
            hist = History(landmark=s, covariates={"z": 1.0}, path=[(2, t1)])
            got = posterior_cure_given_history(hist, model)

            def cum(tid, a, b, g):
                base = model.baseline[tid]
                tf = model.cox[tid]
                eta = tf.beta[0] * 1.0
                if tf.has_gamma:
                    eta += tf.beta[-1] * g
                mask = (base.times > a) & (base.times <= b)
                return float(base.increments[mask].sum()) * np.exp(eta)

            def hazard(tid, t, g):
                base = model.baseline[tid]
                tf = model.cox[tid]
                j = int(np.searchsorted(base.times, t))
                eta = tf.beta[0] * 1.0 + (tf.beta[-1] * g if tf.has_gamma else 0.0)
                return float(base.increments[j]) * np.exp(eta)

            # noncured branch: at risk 1->2 and 1->3 over (0, t1], event 1->2 at
            # t1, then 2->3 risk over (t1, s]
            log_h = (
                -cum(1, 0, t1, 0) + np.log(hazard(1, t1, 0))
                - cum(2, 0, t1, 0) - cum(3, t1, s, 0)
            )
            # cured branch: only the split 1->2 row exists
            log_f = -cum(1, 0, t1, 1) + np.log(hazard(1, t1, 1))
            pi = float(expit(np.array([1.0, 1.0]) @ model.alpha.alpha))
            expected = 1.0 / (1.0 + np.exp(np.log1p(-pi) + log_h - np.log(pi) - log_f))
            assert got == pytest.approx(expected, rel=1e-10)
            assert 0.0 <= got <= 1.0

    def test_event_at_unfitted_time_is_an_error(self, toy4_fit):
        times = toy4_fit.baseline[1].times
        bogus = float(times[0] + times[1]) / 2.0
        if bogus in times:
            bogus += 1e-7
        hist = History(landmark=bogus + 1.0, covariates={"z": 0.0}, path=[(2, bogus)])
        from mscure.errors import FitError

        with pytest.raises(FitError, match="event time"):
            posterior_cure_given_history(hist, toy4_fit)

    def test_history_validation(self, toy4_fit):
        with pytest.raises(PredictionError, match="increasing"):
            History(landmark=5.0, covariates={}, path=[(2, 3.0), (3, 2.0)]).normalized_path(
                toy4_fit.spec
            )
        with pytest.raises(PredictionError, match="landmark"):
            History(landmark=1.0, covariates={}, path=[(2, 3.0)]).normalized_path(toy4_fit.spec)
        with pytest.raises(PredictionError, match="diagram"):
            History(landmark=5.0, covariates={}, path=[(4, 3.0)]).normalized_path(toy4_fit.spec)


class TestDynamicPredict:
    def test_starts_as_indicator_of_current_state(self, toy4_fit):
        hist = History(landmark=0.0, covariates={"z": 0.0}, path=[])
        curve = dynamic_predict(hist, toy4_fit, horizon=10.0)
        assert curve.times[0] == 0.0
        np.testing.assert_array_equal(curve.probabilities[0], [1.0, 0.0, 0.0, 0.0])

    def test_rows_sum_to_one_and_bounded(self, toy4_fit):
        hist = History(landmark=2.0, covariates={"z": 1.0}, path=[])
        curve = dynamic_predict(hist, toy4_fit, horizon=9.0)
        np.testing.assert_allclose(curve.probabilities.sum(axis=1), 1.0, atol=1e-10)
        assert np.all((curve.probabilities >= 0) & (curve.probabilities <= 1))

    def test_noncure_history_uses_single_branch(self, toy4_fit):
        t_rel = float(toy4_fit.baseline[2].times[0])
        hist = History(landmark=t_rel + 0.5, covariates={"z": 0.0}, path=[(3, t_rel)])
        curve = dynamic_predict(hist, toy4_fit, horizon=t_rel + 6.0)
        branch = dynamic_predict(hist, toy4_fit, horizon=t_rel + 6.0, p_cured=0.0)
        np.testing.assert_array_equal(curve.probabilities, branch.probabilities)
        assert curve.p_cured == 0.0

    def test_degenerate_posterior_reproduces_single_branch_bitwise(self, toy4_fit):
        hist = History(landmark=1.0, covariates={"z": 0.0}, path=[])
        grid = np.linspace(1.0, 9.0, 8)
        mixed0 = dynamic_predict(hist, toy4_fit, grid, p_cured=0.0)
        mixed1 = dynamic_predict(hist, toy4_fit, grid, p_cured=1.0)
        for g, ref in ((0, mixed0), (1, mixed1)):
            rows = []
            for t in grid:
                p = transition_probability_matrix(toy4_fit, {"z": 0.0}, g=g, s=1.0, t=t)
                rows.append(p[0])
            np.testing.assert_array_equal(ref.probabilities, np.asarray(rows))

    def test_half_posterior_is_plain_average(self, toy4_fit):
        hist = History(landmark=0.0, covariates={"z": 1.0}, path=[])
        grid = [0.0, 4.0, 8.5]
        mix = dynamic_predict(hist, toy4_fit, grid, p_cured=0.5)
        b0 = dynamic_predict(hist, toy4_fit, grid, p_cured=0.0)
        b1 = dynamic_predict(hist, toy4_fit, grid, p_cured=1.0)
        np.testing.assert_allclose(
            mix.probabilities, 0.5 * (b0.probabilities + b1.probabilities), rtol=1e-15
        )

    def test_three_landmark_demo(self, toy4_fit):
        """Baseline, post-response, and much later landmarks give three distinct
        curves, each a proper distribution over states."""
        t1 = float(toy4_fit.baseline[1].times[3])
        horizon = 9.0
        curves = [
            dynamic_predict(History(0.0, {"z": 1.0}, []), toy4_fit, horizon=horizon),
            dynamic_predict(History(t1 + 1.0, {"z": 1.0}, [(2, t1)]), toy4_fit, horizon=horizon),
            dynamic_predict(History(t1 + 6.0, {"z": 1.0}, [(2, t1)]), toy4_fit, horizon=horizon),
        ]
        for c in curves:
            np.testing.assert_allclose(c.probabilities.sum(axis=1), 1.0, atol=1e-10)
        finals = [c.probabilities[-1] for c in curves]
        assert not np.allclose(finals[0], finals[1])
        assert not np.allclose(finals[1], finals[2])

    def test_frame_columns(self, toy4_fit):
        hist = History(landmark=0.0, covariates={"z": 0.0}, path=[])
        frame = dynamic_predict(hist, toy4_fit, horizon=5.0).to_frame()
        assert list(frame.columns) == ["time", "state", "probability", "p_cured", "landmark_s"]
        per_time = frame.groupby("time")["probability"].sum()
        np.testing.assert_allclose(per_time, 1.0, atol=1e-10)
