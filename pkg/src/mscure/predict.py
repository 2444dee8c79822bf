"""Dynamic state-occupancy prediction from a fitted model.

Branch-specific transition probability matrices are Aalen-Johansen product
integrals over the fitted baseline event times, with covariate- and
cure-status-scaled increments; the cured branch runs on the reduced diagram
with every transition touching a non-cure state removed. The two branches are
mixed over the posterior cure distribution given the observed history, which
is a single E-step evaluation at the final parameter estimates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .cox import evaluate_interval
from .em import FittedModel, _posterior_weight_log
from .errors import PredictionError
from .logistic import cure_probability
from .model import ModelSpec


@dataclass
class History:
    """Observed state history up to a landmark time.

    ``path`` lists (state, entry_time) pairs; the initial state at time 0 is
    implied and may be omitted. Entry times must be strictly increasing and
    not exceed the landmark.
    """

    landmark: float
    covariates: dict
    path: list[tuple[int, float]] = field(default_factory=list)

    def normalized_path(self, spec: ModelSpec) -> list[tuple[int, float]]:
        path = [(int(s), float(t)) for s, t in self.path]
        if not path or path[0] != (spec.initial_state, 0.0):
            path = [(spec.initial_state, 0.0)] + path
        times = [t for _, t in path]
        if any(b <= a for a, b in zip(times[1:], times[2:])) or (
            len(times) > 1 and times[1] <= 0
        ):
            raise PredictionError("history entry times must be strictly increasing")
        if times[-1] > self.landmark:
            raise PredictionError(
                f"history event at t={times[-1]} lies after the landmark s={self.landmark}"
            )
        for (a, _), (b, _) in zip(path, path[1:]):
            if spec.transition_between(a, b) is None:
                raise PredictionError(f"history step {a}->{b} is not on the transition diagram")
        return path

    def current_state(self, spec: ModelSpec) -> int:
        return self.normalized_path(spec)[-1][0]


def _survival_design_row(model: FittedModel, covariates: dict) -> np.ndarray:
    frame = pd.DataFrame([covariates])
    z, _ = model.spec.survival_design(frame)
    return z[0]


def _cure_design_row(model: FittedModel, covariates: dict) -> np.ndarray:
    frame = pd.DataFrame([covariates])
    z, _ = model.spec.cure_design(frame)
    return z[0]


def _branch_increments(model: FittedModel, z: np.ndarray, g: int):
    """Per-transition (times, scaled increments); empty for transitions a cured subject cannot take."""
    spec = model.spec
    out = {}
    for tr in spec.transitions:
        if g == 1 and tr.id in spec.noncure_only_transitions:
            continue
        tf = model.cox[tr.id]
        base = model.baseline[tr.id]
        if tf.skipped or len(base.times) == 0:
            continue
        eta = float(tf.linear_predictor(np.atleast_2d(z), g)[0])
        out[tr.id] = (base.times, base.increments * np.exp(eta))
    return out


def _aj_steps(model: FittedModel, incs: dict, s: float, t: float):
    """Yield (time, I + dA) factors over fitted event times in (s, t]."""
    spec = model.spec
    times = np.unique(np.concatenate(
        [tm[(tm > s) & (tm <= t)] for tm, _ in incs.values()] or [np.empty(0)]
    ))
    n = spec.n_states
    for u in times:
        da = np.zeros((n, n))
        for tid, (tm, inc) in incs.items():
            j = np.searchsorted(tm, u)
            if j < len(tm) and tm[j] == u and inc[j] != 0.0:
                tr = spec.transition(tid)
                da[tr.from_state - 1, tr.to_state - 1] += inc[j]
        rowsum = da.sum(axis=1)
        if np.any(rowsum > 1.0):
            k = int(np.argmax(rowsum))
            raise PredictionError(
                f"hazard increment sum {rowsum[k]:.4f} > 1 out of state {k + 1} at t={u}; "
                f"the product-integral factor would have a negative diagonal - "
                f"consider a model with smaller per-time increments"
            )
        da[np.diag_indices(n)] -= rowsum
        yield u, np.eye(n) + da


def transition_probability_matrix(model: FittedModel, covariates: dict, g: int, s: float, t: float) -> np.ndarray:
    """Aalen-Johansen P(s, t) for one cure branch; rows sum to 1."""
    if t < s:
        raise PredictionError(f"need s <= t, got s={s}, t={t}")
    z = _survival_design_row(model, covariates)
    incs = _branch_increments(model, z, int(g))
    p = np.eye(model.spec.n_states)
    for _, factor in _aj_steps(model, incs, s, t):
        p = p @ factor
    return p


def posterior_cure_given_history(history: History, model: FittedModel) -> float:
    """P(cured | history up to s, covariates) under the fitted parameters.

    A history that occupies a non-cure state identifies the subject as
    non-cured (returns exactly 0). Otherwise the observed path, censored at
    the landmark, is laid out in extended-long form and the posterior is one
    Bayes-rule evaluation; with no events and s at baseline this reduces to
    the fitted cure probability.
    """
    spec = model.spec
    path = history.normalized_path(spec)
    if any(state in spec.non_cure_states for state, _ in path):
        return 0.0
    z_surv = _survival_design_row(model, history.covariates)
    z_cure = _cure_design_row(model, history.covariates)
    pi = float(cure_probability(z_cure, model.alpha))

    log_lc = 0.0
    log_lnc = 0.0
    for i, (state, t_entry) in enumerate(path):
        later = path[i + 1] if i + 1 < len(path) else None
        t_exit = later[1] if later is not None else float(history.landmark)
        next_state = later[0] if later is not None else None
        if t_exit == t_entry:
            continue
        for tr in spec.transitions_from(state):
            status = int(next_state == tr.to_state)
            tf = model.cox[tr.id]
            base = model.baseline[tr.id]
            _, _, ll0 = evaluate_interval(tf, base, z_surv, 0, t_entry, t_exit, status)
            log_lnc += ll0
            if tr.id in spec.split_transitions:
                _, _, ll1 = evaluate_interval(tf, base, z_surv, 1, t_entry, t_exit, status)
                log_lc += ll1
    return float(_posterior_weight_log(pi, log_lc, log_lnc))


@dataclass
class PredictionCurve:
    landmark: float
    current_state: int
    times: np.ndarray
    probabilities: np.ndarray   # (len(times), n_states)
    p_cured: float
    states: list[int]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for i, t in enumerate(self.times):
            for j, state in enumerate(self.states):
                rows.append(
                    {
                        "time": t,
                        "state": state,
                        "probability": self.probabilities[i, j],
                        "p_cured": self.p_cured,
                        "landmark_s": self.landmark,
                    }
                )
        return pd.DataFrame(rows)


def dynamic_predict(
    history: History,
    model: FittedModel,
    grid=None,
    *,
    horizon: float | None = None,
    p_cured: float | None = None,
) -> PredictionCurve:
    """State-occupancy probabilities over time, mixed over the cure posterior.

    ``grid`` defaults to the fitted event times in (s, horizon] plus both
    endpoints; occupancy mass only moves at fitted event times, so arbitrary
    grid points are evaluated as a step function. ``p_cured`` overrides the
    posterior (useful for sensitivity analysis); a degenerate posterior
    reproduces the matching single-branch curve exactly.
    """
    spec = model.spec
    s = float(history.landmark)
    state = history.current_state(spec)
    if p_cured is None:
        p_cured = posterior_cure_given_history(history, model)

    z = _survival_design_row(model, history.covariates)
    incs = {g: _branch_increments(model, z, g) for g in (0, 1)}
    if grid is None:
        if horizon is None:
            raise PredictionError("dynamic_predict needs a grid or a horizon")
        event_times = np.unique(np.concatenate(
            [tm[(tm > s) & (tm <= horizon)] for g in (0, 1) for tm, _ in incs[g].values()]
            or [np.empty(0)]
        ))
        grid = np.unique(np.concatenate([[s], event_times, [float(horizon)]]))
    grid = np.asarray(sorted(float(g) for g in grid), dtype=float)
    if len(grid) == 0 or grid[0] < s:
        raise PredictionError("prediction grid times must all be >= the landmark")

    n = spec.n_states
    rows = {g: np.zeros((len(grid), n)) for g in (0, 1)}
    for g in (0, 1):
        steps = _aj_steps(model, incs[g], s, grid[-1])
        # accumulate the full matrix product in the same operation order as
        # transition_probability_matrix, so a degenerate posterior reproduces
        # that branch bit for bit
        p = np.eye(n)
        gi = 0
        for u, factor in steps:
            while gi < len(grid) and grid[gi] < u:
                rows[g][gi] = p[state - 1]
                gi += 1
            p = p @ factor
        while gi < len(grid):
            rows[g][gi] = p[state - 1]
            gi += 1

    if p_cured == 0.0:
        probs = rows[0]
    elif p_cured == 1.0:
        probs = rows[1]
    else:
        probs = (1.0 - p_cured) * rows[0] + p_cured * rows[1]
    return PredictionCurve(
        landmark=s,
        current_state=state,
        times=grid,
        probabilities=probs,
        p_cured=float(p_cured),
        states=list(spec.states),
    )
