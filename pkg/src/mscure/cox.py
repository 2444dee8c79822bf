"""Weighted, transition-stratified Cox fitting with Breslow baseline hazards.

Each transition stratum is an independent Cox problem on start-stop risk
intervals; on split transitions the latent cure flag enters as one extra
covariate sharing the stratum baseline. Ties are handled with the Breslow
approximation throughout, matching the Breslow baseline estimator.

Risk-set sums over event times are computed with suffix sums over event-time
bins (a row is at risk at event time t iff Tstart < t <= Tstop), so one
Newton iteration costs O((rows + events) * p^2) per stratum.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import ConvergenceError, FitError
from .model import ModelSpec

_TINY = 1e-300


class _GammaDiverged(Exception):
    """Internal: the cure coefficient ran away (monotone likelihood)."""


@dataclass
class StratumData:
    """Precomputed per-transition risk structure; time layout never changes."""

    tid: int
    rows: np.ndarray
    zmat: np.ndarray
    cure_col: np.ndarray
    weights_view: np.ndarray | None
    event_times: np.ndarray
    bin_stop: np.ndarray
    bin_start: np.ndarray
    event_rows: np.ndarray   # local indices of status-1 rows
    event_bin: np.ndarray    # 1-based event-time index per status-1 row

    @property
    def n_events(self) -> int:
        return len(self.event_times)


def build_strata(table, spec: ModelSpec) -> dict[int, StratumData]:
    strata = {}
    for tr in spec.transitions:
        rows = table.stratum_rows(tr.id)
        tstart = table.tstart[rows]
        tstop = table.tstop[rows]
        status = table.status[rows]
        ev_local = np.flatnonzero(status == 1)
        event_times = np.unique(tstop[ev_local])
        bin_stop = np.searchsorted(event_times, tstop, side="right")
        bin_start = np.searchsorted(event_times, tstart, side="right")
        event_bin = np.searchsorted(event_times, tstop[ev_local], side="right")
        strata[tr.id] = StratumData(
            tid=tr.id,
            rows=rows,
            zmat=table.z_surv[rows],
            cure_col=table.cure[rows].astype(float),
            weights_view=None,
            event_times=event_times,
            bin_stop=bin_stop,
            bin_start=bin_start,
            event_rows=ev_local,
            event_bin=event_bin,
        )
    return strata


def _risk_sums(values: np.ndarray, bin_stop: np.ndarray, bin_start: np.ndarray, m: int) -> np.ndarray:
    """Sum `values` over rows at risk at each of the m event times.

    Risk at time index j (1-based) means bin_start < j <= bin_stop, so the
    sum is a difference of two suffix-aggregated bin counts.
    """
    if values.ndim == 1:
        add = np.bincount(bin_stop, weights=values, minlength=m + 1)
        sub = np.bincount(bin_start, weights=values, minlength=m + 1)
        diff = add - sub
        return np.cumsum(diff[::-1])[::-1][1:]
    out = np.empty((m, values.shape[1]))
    for k in range(values.shape[1]):
        out[:, k] = _risk_sums(values[:, k], bin_stop, bin_start, m)
    return out


def _event_sums(values: np.ndarray, st: StratumData) -> np.ndarray:
    """Sum `values` (per status-1 row) at each event time."""
    if values.ndim == 1:
        return np.bincount(st.event_bin, weights=values, minlength=st.n_events + 1)[1:]
    out = np.empty((st.n_events, values.shape[1]))
    for k in range(values.shape[1]):
        out[:, k] = _event_sums(values[:, k], st)
    return out


def _partial_loglik(st: StratumData, x: np.ndarray, wts: np.ndarray, beta: np.ndarray) -> float:
    eta = x @ beta if x.shape[1] else np.zeros(len(wts))
    u = wts * np.exp(eta)
    m = st.n_events
    if m == 0:
        return 0.0
    s0 = _risk_sums(u, st.bin_stop, st.bin_start, m)
    d = _event_sums(wts[st.event_rows], st)
    ev_term = float(np.sum(wts[st.event_rows] * eta[st.event_rows]))
    log_s0 = np.log(np.maximum(s0, _TINY))
    return ev_term - float(np.sum(np.where(d > 0, d * log_s0, 0.0)))


def _grad_hess(st: StratumData, x: np.ndarray, wts: np.ndarray, beta: np.ndarray):
    p = x.shape[1]
    eta = x @ beta
    u = wts * np.exp(eta)
    m = st.n_events
    s0 = _risk_sums(u, st.bin_stop, st.bin_start, m)
    s1 = _risk_sums(u[:, None] * x, st.bin_stop, st.bin_start, m)
    # distinct covariate products for the upper triangle of S2
    iu, ju = np.triu_indices(p)
    xx = x[:, iu] * x[:, ju]
    s2_flat = _risk_sums(u[:, None] * xx, st.bin_stop, st.bin_start, m)
    d = _event_sums(wts[st.event_rows], st)
    zd = _event_sums(wts[st.event_rows, None] * x[st.event_rows], st)

    pos = d > 0
    s0p = np.maximum(s0[pos], _TINY)
    mean = s1[pos] / s0p[:, None]
    grad = zd[pos].sum(axis=0) - (d[pos, None] * mean).sum(axis=0)
    hess = np.zeros((p, p))
    m2 = (d[pos, None] * s2_flat[pos] / s0p[:, None]).sum(axis=0)
    hess[iu, ju] = m2
    hess[ju, iu] = m2
    hess -= (d[pos, None, None] * mean[:, :, None] * mean[:, None, :]).sum(axis=0)
    return grad, -hess


@dataclass
class TransitionCox:
    """Fitted coefficients for one transition stratum."""

    tid: int
    names: list[str]
    beta: np.ndarray
    has_gamma: bool
    gamma_dropped: bool = False
    iterations: int = 0
    skipped: bool = False

    @property
    def gamma(self) -> float | None:
        return float(self.beta[-1]) if self.has_gamma else None

    def linear_predictor(self, z: np.ndarray, cure) -> np.ndarray:
        """eta = z' beta (+ cure * gamma on split strata with gamma kept)."""
        z = np.atleast_2d(z)
        if self.skipped or len(self.beta) == 0:
            base = np.zeros(len(z))
        elif self.has_gamma:
            base = z @ self.beta[:-1] + np.asarray(cure, dtype=float) * self.beta[-1]
        else:
            base = z @ self.beta
        return base


@dataclass
class CoxCoefficients:
    per_transition: dict[int, TransitionCox] = field(default_factory=dict)

    def __getitem__(self, tid: int) -> TransitionCox:
        return self.per_transition[tid]

    def __contains__(self, tid: int) -> bool:
        return tid in self.per_transition


@dataclass
class TransitionBaseline:
    """Breslow baseline: increments at sorted distinct event times."""

    times: np.ndarray
    increments: np.ndarray

    def cumulative_between(self, tstart, tstop) -> np.ndarray:
        """Baseline cumulative hazard mass on (tstart, tstop]."""
        cum = np.concatenate([[0.0], np.cumsum(self.increments)])
        hi = np.searchsorted(self.times, tstop, side="right")
        lo = np.searchsorted(self.times, tstart, side="right")
        return cum[hi] - cum[lo]

    def increment_at(self, t: float) -> float | None:
        j = np.searchsorted(self.times, t)
        if j < len(self.times) and self.times[j] == t:
            return float(self.increments[j])
        return None


@dataclass
class BaselineHazard:
    per_transition: dict[int, TransitionBaseline] = field(default_factory=dict)

    def __getitem__(self, tid: int) -> TransitionBaseline:
        return self.per_transition[tid]


def _design(st: StratumData, surv_names: list[str], with_gamma: bool):
    if with_gamma:
        return np.column_stack([st.zmat, st.cure_col]), list(surv_names) + ["cure"]
    return st.zmat, list(surv_names)


def _newton(st: StratumData, x, wts, init, tol, max_iter, gamma_idx, gamma_cap):
    beta = init.copy()
    ll = _partial_loglik(st, x, wts, beta)
    grad = np.zeros(len(beta))
    for it in range(1, max_iter + 1):
        grad, hess = _grad_hess(st, x, wts, beta)
        gnorm = float(np.linalg.norm(grad))
        if gnorm < tol:
            return beta, ll, it, True
        try:
            delta = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError:
            if gamma_idx is not None:
                raise _GammaDiverged()
            raise FitError(
                f"singular Hessian in transition stratum {st.tid}; check for collinear covariates"
            )
        step = 1.0
        while True:
            cand = beta + step * delta
            if gamma_idx is not None and abs(cand[gamma_idx]) > gamma_cap:
                raise _GammaDiverged()
            ll_new = _partial_loglik(st, x, wts, cand)
            if ll_new >= ll - 1e-12 or step < 1e-10:
                break
            step *= 0.5
        beta = cand
        if abs(ll_new - ll) < tol * (abs(ll) + 1.0):
            return beta, ll_new, it, True
        ll = ll_new
    raise ConvergenceError(
        f"Cox fit for stratum {st.tid} did not converge in {max_iter} iterations "
        f"(|grad| = {float(np.linalg.norm(grad)):.3e})",
        last_iterate=beta,
        gradient_norm=float(np.linalg.norm(grad)),
    )


def fit_weighted_cox(
    table,
    spec: ModelSpec,
    *,
    weights: np.ndarray | None = None,
    strata: dict[int, StratumData] | None = None,
    tids=None,
    warm: CoxCoefficients | None = None,
    dropped_gammas: set[int] | None = None,
) -> CoxCoefficients:
    """Maximize the weighted Breslow partial likelihood per transition stratum.

    The cure flag is an extra covariate on split transitions unless its
    coefficient is inestimable (diverges past ``gamma_drop_threshold`` or one
    cure side has no weighted events), in which case gamma is dropped for
    that transition with a warning. Strata without weighted events are
    skipped with a warning and contribute zero hazard.
    """
    weights = table.row_weights() if weights is None else weights
    strata = build_strata(table, spec) if strata is None else strata
    dropped = set() if dropped_gammas is None else dropped_gammas
    cfg = spec.fit
    out = CoxCoefficients()
    for tr in spec.transitions:
        if tids is not None and tr.id not in tids:
            continue
        st = strata[tr.id]
        wts = weights[st.rows]
        ev_weight = float(np.sum(wts[st.event_rows])) if len(st.event_rows) else 0.0
        if st.n_events == 0 or ev_weight <= 0.0:
            warnings.warn(
                f"transition {tr.from_state}->{tr.to_state}: no weighted events; stratum skipped"
            )
            out.per_transition[tr.id] = TransitionCox(
                tid=tr.id, names=list(table.surv_names), beta=np.zeros(table.z_surv.shape[1]),
                has_gamma=False, skipped=True,
            )
            continue

        want_gamma = spec.is_split(tr.id) and tr.id not in dropped
        if want_gamma:
            ev_c = st.event_rows[st.cure_col[st.event_rows] == 1.0]
            ev_n = st.event_rows[st.cure_col[st.event_rows] == 0.0]
            w_cured = float(np.sum(wts[ev_c]))
            w_noncured = float(np.sum(wts[ev_n]))
            if min(w_cured, w_noncured) < 1e-12:
                dropped.add(tr.id)
                want_gamma = False
                warnings.warn(
                    f"transition {tr.from_state}->{tr.to_state}: a cure stratum has no "
                    f"weighted events; cure effect dropped"
                )

        while True:
            x, names = _design(st, table.surv_names, want_gamma)
            gamma_idx = len(names) - 1 if want_gamma else None
            init = np.zeros(x.shape[1])
            if warm is not None and tr.id in warm:
                prev = warm[tr.id]
                if prev.names == names and not prev.skipped:
                    init = prev.beta.copy()
            if x.shape[1] == 0:
                out.per_transition[tr.id] = TransitionCox(
                    tid=tr.id, names=names, beta=init, has_gamma=False,
                    gamma_dropped=tr.id in dropped,
                )
                break
            try:
                beta, _, iters, _ = _newton(
                    st, x, wts, init, cfg.inner_tol, cfg.inner_max_iter,
                    gamma_idx, cfg.gamma_drop_threshold,
                )
            except _GammaDiverged:
                dropped.add(tr.id)
                want_gamma = False
                warnings.warn(
                    f"transition {tr.from_state}->{tr.to_state}: cure effect not estimable "
                    f"(|gamma| exceeded {cfg.gamma_drop_threshold}); dropped"
                )
                continue
            out.per_transition[tr.id] = TransitionCox(
                tid=tr.id, names=names, beta=beta, has_gamma=want_gamma,
                gamma_dropped=tr.id in dropped, iterations=iters,
            )
            break
    return out


def breslow_baseline(
    table,
    coefs: CoxCoefficients,
    *,
    weights: np.ndarray | None = None,
    strata: dict[int, StratumData] | None = None,
    tids=None,
) -> BaselineHazard:
    """Breslow increments: weighted events over risk-weighted exposure per event time."""
    weights = table.row_weights() if weights is None else weights
    strata = build_strata(table, table.spec) if strata is None else strata
    out = BaselineHazard()
    for tid, st in strata.items():
        if tids is not None and tid not in tids:
            continue
        if tid not in coefs:
            continue
        tfit = coefs[tid]
        if st.n_events == 0 or tfit.skipped:
            out.per_transition[tid] = TransitionBaseline(
                times=st.event_times, increments=np.zeros(st.n_events)
            )
            continue
        wts = weights[st.rows]
        eta = tfit.linear_predictor(st.zmat, st.cure_col)
        u = wts * np.exp(eta)
        s0 = _risk_sums(u, st.bin_stop, st.bin_start, st.n_events)
        d = _event_sums(wts[st.event_rows], st)
        if np.any((d > 0) & (s0 <= 0)):
            raise FitError(f"empty risk set at an event time in stratum {tid}")
        inc = np.where(d > 0, d / np.maximum(s0, _TINY), 0.0)
        out.per_transition[tid] = TransitionBaseline(times=st.event_times, increments=inc)
    return out


def cumulative_hazard(tstart, tstop, z, cure, tfit: TransitionCox, base: TransitionBaseline):
    """Cumulative hazard over (tstart, tstop] for given covariates and cure flag."""
    eta = tfit.linear_predictor(z, cure)
    mass = base.cumulative_between(np.asarray(tstart, dtype=float), np.asarray(tstop, dtype=float))
    return mass * np.exp(eta)


def row_likelihood(cum_haz, status, hazard=None):
    """Per-row likelihood contribution exp(-cumHaz) * hazard^status.

    For censored rows the hazard factor is 1 and ``hazard`` is ignored.
    """
    cum_haz = np.asarray(cum_haz, dtype=float)
    status = np.asarray(status)
    out = np.exp(-cum_haz)
    if np.any(status == 1):
        hz = np.asarray(hazard, dtype=float)
        if np.any((status == 1) & ~np.isfinite(hz)):
            raise FitError("status=1 row without a hazard value at Tstop")
        out = np.where(status == 1, out * hz, out)
    return out


def update_hazard_columns(
    table,
    coefs: CoxCoefficients,
    baseline: BaselineHazard,
    strata: dict[int, StratumData],
) -> None:
    """Refresh cum_haz / hazard / loglik table columns at the given parameters.

    Log-likelihood contributions are accumulated in log space
    (loglik = -cumHaz + status * log hazard) to avoid underflow on long paths.
    """
    for tid, st in strata.items():
        if tid not in coefs:
            continue
        tfit = coefs[tid]
        rows = st.rows
        if st.n_events == 0 or tfit.skipped:
            table.cum_haz[rows] = 0.0
            table.hazard[rows] = np.nan
            table.loglik[rows] = 0.0
            continue
        base = baseline[tid]
        eta = tfit.linear_predictor(st.zmat, st.cure_col)
        expeta = np.exp(eta)
        cum = np.concatenate([[0.0], np.cumsum(base.increments)])
        ch = (cum[st.bin_stop] - cum[st.bin_start]) * expeta
        table.cum_haz[rows] = ch
        hz = np.full(len(rows), np.nan)
        ll = -ch
        if len(st.event_rows):
            lam = base.increments[st.event_bin - 1]
            hz[st.event_rows] = lam * expeta[st.event_rows]
            with np.errstate(divide="ignore"):
                ll[st.event_rows] += np.log(hz[st.event_rows])
        table.hazard[rows] = hz
        table.loglik[rows] = ll


def evaluate_interval(tfit: TransitionCox, base: TransitionBaseline, z, cure, tstart, tstop, status):
    """(cum_haz, hazard, loglik) for a single out-of-table risk interval.

    A status-1 interval must end exactly at a fitted event time of the
    stratum; the nonparametric baseline has no hazard mass elsewhere.
    """
    eta = float(tfit.linear_predictor(np.atleast_2d(z), cure)[0])
    ch = float(base.cumulative_between(tstart, tstop)) * np.exp(eta)
    hz = np.nan
    ll = -ch
    if status == 1:
        inc = base.increment_at(float(tstop))
        if inc is None:
            raise FitError(
                f"event at t={tstop} is not an event time of the fitted stratum; "
                f"the baseline hazard has no mass there"
            )
        hz = inc * np.exp(eta)
        ll += np.log(hz) if hz > 0 else -np.inf
    return ch, hz, ll
