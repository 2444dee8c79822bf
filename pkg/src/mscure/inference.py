"""Standard errors: subject-resampling bootstrap and the Oakes observed information.

The observed information of the EM estimate is the complete-data curvature of
the expected log-likelihood minus a correction that propagates how the
posterior weights respond to the parameters. Both pieces are assembled from
the fitted columns: the weight derivative with respect to any parameter block
is w(1-w) times the difference of the two branch score vectors (the cure
design vector for the logistic block), so the correction is a weighted sum of
per-subject outer products. The baseline-hazard sub-block of the result is not
diagonal, so the (alpha, beta, gamma) covariance is taken from the inverse of
the full matrix.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import cox as cox_mod
from .cox import build_strata
from .dataprep import ExtendedTable, prepare_tables
from .em import FittedModel, em_fit
from .errors import EstimationError, MscureError
from .model import ModelSpec


@dataclass
class ParameterIndex:
    """Flat layout of (alpha, all transition coefficients, all baseline increments)."""

    names: list[str]
    alpha_slice: slice
    b_slices: dict[int, slice]
    lambda_slices: dict[int, slice]

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def n_alpha(self) -> int:
        return self.alpha_slice.stop

    @property
    def ab_indices(self) -> np.ndarray:
        """Indices of the alpha/beta/gamma coordinates (excluding baselines)."""
        idx = list(range(self.alpha_slice.stop))
        for sl in self.b_slices.values():
            idx.extend(range(sl.start, sl.stop))
        return np.asarray(idx, dtype=int)


def build_parameter_index(fitted: FittedModel) -> ParameterIndex:
    names = [f"alpha:{nm}" for nm in fitted.alpha.names]
    alpha_slice = slice(0, len(names))
    b_slices, lambda_slices = {}, {}
    for tr in fitted.spec.transitions:
        tf = fitted.cox[tr.id]
        if tf.skipped:
            continue
        lo = len(names)
        names.extend(f"b[{tr.from_state}->{tr.to_state}]:{nm}" for nm in tf.names)
        b_slices[tr.id] = slice(lo, len(names))
    for tr in fitted.spec.transitions:
        tf = fitted.cox[tr.id]
        if tf.skipped:
            continue
        base = fitted.baseline[tr.id]
        lo = len(names)
        names.extend(
            f"lambda[{tr.from_state}->{tr.to_state}]:{j + 1}" for j in range(len(base.times))
        )
        lambda_slices[tr.id] = slice(lo, len(names))
    return ParameterIndex(
        names=names, alpha_slice=alpha_slice, b_slices=b_slices, lambda_slices=lambda_slices
    )


def _stratum_design(fitted: FittedModel, st, tid: int) -> np.ndarray:
    tf = fitted.cox[tid]
    if tf.has_gamma:
        return np.column_stack([st.zmat, st.cure_col])
    return st.zmat


def score_components(fitted: FittedModel, table: ExtendedTable, index: ParameterIndex | None = None):
    """Per-subject branch score vectors of the two conditional path likelihoods.

    Returns ``(index, s_cured, s_noncured)`` where the matrices have one row
    per subject over the full parameter layout; the alpha block is
    structurally zero (the branch likelihoods do not involve alpha). The
    derivative w.r.t. a transition coefficient block is
    (status - cumhaz) * x summed over the subject's rows of that branch; the
    derivative w.r.t. a baseline increment is dN/lambda - exp(eta) over the
    at-risk window.
    """
    index = build_parameter_index(fitted) if index is None else index
    n = table.n_subjects
    strata = build_strata(table, fitted.spec)
    s_f = np.zeros((n, index.size))
    s_h = np.zeros((n, index.size))
    for tid, st in strata.items():
        tf = fitted.cox[tid]
        if tf.skipped or tid not in index.b_slices:
            continue
        base = fitted.baseline[tid]
        if np.any((base.increments == 0) & (np.bincount(st.event_bin, minlength=st.n_events + 1)[1:] > 0)):
            raise EstimationError(
                f"baseline increment is zero at an observed event time in stratum {tid}"
            )
        x = _stratum_design(fitted, st, tid)
        eta = tf.linear_predictor(st.zmat, st.cure_col)
        expeta = np.exp(eta)
        subj = table.subj_idx[st.rows]
        status = table.status[st.rows].astype(float)
        cumhaz = table.cum_haz[st.rows]
        cured_rows = st.cure_col == 1.0

        bsl = index.b_slices[tid]
        contrib = (status - cumhaz)[:, None] * x
        for k in range(x.shape[1]):
            np.add.at(s_f[:, bsl.start + k], subj[cured_rows], contrib[cured_rows, k])
            np.add.at(s_h[:, bsl.start + k], subj[~cured_rows], contrib[~cured_rows, k])

        lsl = index.lambda_slices[tid]
        m = st.n_events
        if m == 0:
            continue
        for target, mask in ((s_f, cured_rows), (s_h, ~cured_rows)):
            if not np.any(mask):
                continue
            diff = np.zeros((n, m + 1))
            np.add.at(diff, (subj[mask], st.bin_start[mask]), -expeta[mask])
            np.add.at(diff, (subj[mask], st.bin_stop[mask]), expeta[mask])
            target[:, lsl] += np.cumsum(diff, axis=1)[:, :m]
            ev = st.event_rows[mask[st.event_rows]]
            if len(ev):
                ev_bin = st.bin_stop[ev] - 1
                lam = base.increments[ev_bin]
                np.add.at(target[:, lsl.start:lsl.stop], (subj[ev], ev_bin), 1.0 / lam)
    return index, s_f, s_h


def weight_derivatives(fitted: FittedModel, table: ExtendedTable, index: ParameterIndex | None = None):
    """Gradients of the posterior cure weights w.r.t. (alpha, phi).

    Both follow the same pattern w(1-w) * (difference of score vectors); for
    alpha the "score difference" is the cure design vector itself. Known
    non-cured subjects have w pinned at 0, so their derivatives vanish.
    """
    index, s_f, s_h = score_components(fitted, table, index)
    scale = table.w * (1.0 - table.w)
    dw_alpha = scale[:, None] * table.z_cure
    dw_phi = scale[:, None] * (s_f - s_h)[:, index.n_alpha:]
    return index, dw_alpha, dw_phi


@dataclass
class InformationMatrix:
    index: ParameterIndex
    matrix: np.ndarray
    covariance_ab: np.ndarray = None
    se: dict[str, float] = field(default_factory=dict)

    @property
    def ab_names(self) -> list[str]:
        return [self.index.names[i] for i in self.index.ab_indices]


def assemble_information(fitted: FittedModel, table: ExtendedTable, index: ParameterIndex | None = None):
    """Assemble the observed-information matrix without inverting it.

    Complete-data blocks: logistic curvature in alpha; per-stratum blocks
    sum(w * cumhaz * x x') in the coefficients, weighted events over
    squared increments on the baseline diagonal, and the at-risk moment
    sum(w * exp(eta) * x) coupling each coefficient block to its own baseline
    increments. The correction subtracts the per-subject outer products of the
    weight gradients against the Q-derivative sensitivities.
    """
    spec = fitted.spec
    index = build_parameter_index(fitted) if index is None else index
    p = index.size
    info = np.zeros((p, p))

    # complete-data curvature: logistic block
    prob = table.pi
    wlog = prob * (1.0 - prob)
    asl = index.alpha_slice
    info[asl, asl] += (table.z_cure * wlog[:, None]).T @ table.z_cure

    strata = build_strata(table, spec)
    row_w = table.row_weights()
    for tid, st in strata.items():
        if tid not in index.b_slices:
            continue
        tf = fitted.cox[tid]
        base = fitted.baseline[tid]
        x = _stratum_design(fitted, st, tid)
        wts = row_w[st.rows]
        eta = tf.linear_predictor(st.zmat, st.cure_col)
        u = wts * np.exp(eta)
        cumhaz = table.cum_haz[st.rows]
        bsl, lsl = index.b_slices[tid], index.lambda_slices[tid]

        info[bsl, bsl] += (x * (wts * cumhaz)[:, None]).T @ x

        m = st.n_events
        if m == 0:
            continue
        d = cox_mod._event_sums(wts[st.event_rows], st)
        lam = base.increments
        info[lsl, lsl][np.diag_indices(m)] += np.where(lam > 0, d / np.maximum(lam, 1e-300) ** 2, 0.0)
        s1 = cox_mod._risk_sums(u[:, None] * x, st.bin_stop, st.bin_start, m)
        info[bsl, lsl] += s1.T
        info[lsl, bsl] += s1

    # cross-term correction via the weight derivatives
    idx2, s_f, s_h = score_components(fitted, table, index)
    v = s_f - s_h
    v[:, asl] = table.z_cure
    scale = table.w * (1.0 - table.w)
    u_mat = v * scale[:, None]
    info -= v.T @ u_mat
    return index, info


def oakes_information(fitted: FittedModel, table: ExtendedTable | None = None) -> InformationMatrix:
    """Observed information at the EM estimate, with cross terms.

    The baseline-increment sub-block is not diagonal once the correction is
    applied, so the (alpha, beta, gamma) covariance is the corresponding
    sub-block of the full matrix inverse; the naive complete-data block would
    understate it.
    """
    table = fitted.table if table is None else table
    if table is None:
        raise EstimationError("oakes_information needs the prepared table of the fit")
    index, info = assemble_information(fitted, table)
    cov_ab, se = _invert_information(info, index)
    return InformationMatrix(index=index, matrix=info, covariance_ab=cov_ab, se=se)


def _invert_information(info: np.ndarray, index: ParameterIndex):
    sym = 0.5 * (info + info.T)
    eigval, eigvec = np.linalg.eigh(sym)
    tol = max(1e-10 * float(np.max(np.abs(eigval))), 1e-300)
    if np.any(eigval <= tol):
        bad = np.flatnonzero(eigval <= tol)
        directions = []
        for b in bad[:3]:
            comp = np.argsort(-np.abs(eigvec[:, b]))[:3]
            directions.append(
                "[" + ", ".join(f"{index.names[c]}:{eigvec[c, b]:+.3f}" for c in comp) + "]"
            )
        raise EstimationError(
            "observed information matrix is singular or not positive definite; "
            "near-null directions: " + "; ".join(directions)
        )
    cov = np.linalg.inv(sym)
    ab = index.ab_indices
    cov_ab = cov[np.ix_(ab, ab)]
    diag = np.diag(cov_ab)
    if np.any(diag <= 0):
        raise EstimationError("information-based variance is not positive for some parameter")
    se = {index.names[i]: float(np.sqrt(cov[i, i])) for i in ab}
    return cov_ab, se


# -- bootstrap ---------------------------------------------------------------


@dataclass
class BootstrapResult:
    B: int
    estimates: pd.DataFrame      # one row per replicate, NaN where a parameter was absent
    se: dict[str, float]
    failures: int
    nonconverged: int
    seed: int


def coefficient_vector(fitted: FittedModel) -> dict[str, float]:
    """Flat (alpha, beta, gamma) estimates keyed by canonical parameter names."""
    out = {f"alpha:{nm}": float(v) for nm, v in zip(fitted.alpha.names, fitted.alpha.alpha)}
    for tr in fitted.spec.transitions:
        tf = fitted.cox[tr.id]
        if tf.skipped:
            continue
        for nm, v in zip(tf.names, tf.beta):
            out[f"b[{tr.from_state}->{tr.to_state}]:{nm}"] = float(v)
    return out


def _fit_replicate(args):
    wide_dict, spec, indices, epsilon, max_iter = args
    wide = pd.DataFrame(wide_dict)
    sample = wide.iloc[indices].reset_index(drop=True)
    sample = sample.drop(columns=["id"]).assign(id=np.arange(1, len(sample) + 1))
    try:
        import warnings as _w

        with _w.catch_warnings():
            _w.simplefilter("ignore")
            fitted = em_fit(sample, spec, epsilon=epsilon, max_iter=max_iter)
    except MscureError as exc:
        return {"__failed__": str(exc)}
    est = coefficient_vector(fitted)
    est["__converged__"] = float(fitted.converged)
    return est


def bootstrap_se(
    wide: pd.DataFrame,
    spec: ModelSpec,
    B: int,
    seed: int,
    *,
    jobs: int | None = None,
    epsilon: float = 0.01,
    max_iter: int = 80,
    index_sampler=None,
) -> BootstrapResult:
    """Non-parametric bootstrap over subjects.

    Each replicate resamples n subjects with replacement (the subject's whole
    wide record is the resampling unit, unstratified) and refits under the
    loosened threshold / iteration cap; replicates that hit the cap still
    contribute. Replicate r draws from a generator seeded with seed XOR r, so
    runs are reproducible and parallelizable. Failed replicates are recorded;
    more than 50% failures aborts.
    """
    if B < 1:
        raise EstimationError("bootstrap needs B >= 1")
    n = len(wide)
    if jobs is None:
        jobs = int(os.environ.get("MSCURE_JOBS", "1"))
    tasks = []
    wide_dict = {c: wide[c].to_numpy() for c in wide.columns}
    for r in range(1, B + 1):
        rng = np.random.default_rng(np.uint64(seed) ^ np.uint64(r))
        if index_sampler is not None:
            indices = np.asarray(index_sampler(rng, n), dtype=int)
        else:
            indices = rng.integers(0, n, size=n)
        tasks.append((wide_dict, spec, indices, epsilon, max_iter))

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fit_replicate, tasks, chunksize=max(1, B // (4 * jobs))))
    else:
        results = [_fit_replicate(t) for t in tasks]

    rows, failures, nonconverged = [], 0, 0
    for est in results:
        if "__failed__" in est:
            failures += 1
            continue
        if est.pop("__converged__") == 0.0:
            nonconverged += 1
        rows.append(est)
    if failures > B / 2:
        raise EstimationError(
            f"bootstrap aborted: {failures}/{B} replicate fits failed"
        )
    estimates = pd.DataFrame(rows)
    se = {}
    for col in estimates.columns:
        vals = estimates[col].to_numpy(dtype=float)
        vals = vals[np.isfinite(vals)]
        se[col] = float(np.std(vals, ddof=1)) if len(vals) > 1 else float("nan")
    return BootstrapResult(
        B=B, estimates=estimates, se=se, failures=failures,
        nonconverged=nonconverged, seed=seed,
    )
