"""Event-history data preparation: wide records to long and extended long tables.

The extended long format duplicates each risk row of a split transition per
hypothetical baseline cure status (column ``cure``), carrying per-row analysis
columns (cumulative hazard, hazard, likelihood) and per-subject posterior
weights. Subjects observed in a non-cure state are known non-cured: their rows
are emitted single-sided with weight pinned to 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import DataError
from .model import ModelSpec

LONG_COLUMNS = ["id", "from", "to", "trans", "Tstart", "Tstop", "status"]
EXTENDED_COLUMNS = [
    "id", "from", "to", "trans", "cure", "Tstart", "Tstop", "status",
    "cumHaz", "hazard", "likelihood", "pi", "weight",
]


def reconstruct_path(wide, spec: ModelSpec):
    """Rebuild a subject's state path from per-event (time, status) columns.

    Returns ``(path, end_time, absorbed)`` where ``path`` is a list of
    (state, entry_time) pairs starting at the initial state. Composite event
    columns (an event already implied by a later composite state, sharing its
    time) are consumed silently; anything else that cannot be walked on the
    diagram raises :class:`DataError` naming the subject.
    """
    sid = wide.get("id", "?")
    entry_states = sorted({t.to_state for t in spec.transitions})
    events = []
    all_times = []
    for state in entry_states:
        tcol, scol = spec.event_columns(state)
        if tcol not in wide or scol not in wide:
            raise DataError(f"subject {sid}: missing wide columns '{tcol}'/'{scol}'")
        time = float(wide[tcol])
        status = int(wide[scol])
        if time < 0:
            raise DataError(f"subject {sid}: negative event time in '{tcol}'")
        if status not in (0, 1):
            raise DataError(f"subject {sid}: status '{scol}' must be 0 or 1")
        all_times.append(time)
        if status == 1:
            events.append((time, state))

    end_time = max(all_times)
    current = spec.initial_state
    t_now = 0.0
    path = [(current, 0.0)]
    remaining = sorted(events)
    pairs = {t.pair for t in spec.transitions}

    while remaining:
        # consume component events already subsumed by a composite move
        remaining = [
            (tm, st) for tm, st in remaining
            if not (tm <= t_now and (current, st) not in pairs)
        ]
        if not remaining:
            break
        tmin = remaining[0][0]
        if tmin < t_now:
            raise DataError(
                f"subject {sid}: event ordering implies a transition missing from the "
                f"diagram (event at t={tmin} before current time {t_now})"
            )
        candidates = [st for tm, st in remaining if tm == tmin and (current, st) in pairs]
        if not candidates:
            states_at_t = sorted(st for tm, st in remaining if tm == tmin)
            raise DataError(
                f"subject {sid}: path not representable on the diagram: no transition "
                f"from state {current} into {states_at_t} at t={tmin}"
            )
        if len(candidates) > 1:
            raise DataError(
                f"subject {sid}: ambiguous simultaneous events at t={tmin} into "
                f"states {candidates}"
            )
        current = candidates[0]
        t_now = tmin
        path.append((current, t_now))
        remaining = [(tm, st) for tm, st in remaining if (tm, st) != (tmin, current)]

    absorbed = current in spec.absorbing
    if absorbed and end_time > t_now:
        raise DataError(
            f"subject {sid}: event time {end_time} after absorbing state entry at {t_now}"
        )
    return path, end_time, absorbed


def determine_known_noncured(wide, spec: ModelSpec) -> bool:
    """True iff the subject's observed path occupies any non-cure state."""
    path, _, _ = reconstruct_path(wide, spec)
    return any(state in spec.non_cure_states for state, _ in path)


def wide_to_long(wide, spec: ModelSpec) -> pd.DataFrame:
    """Expand one wide record into conventional long-format risk rows.

    One row per (visited state, outgoing transition) with the sojourn as the
    risk interval on the clock-forward scale; zero-length intervals are
    dropped.
    """
    sid = wide.get("id", "?")
    path, end_time, _ = reconstruct_path(wide, spec)
    rows = []
    for i, (state, t_entry) in enumerate(path):
        later = path[i + 1] if i + 1 < len(path) else None
        t_exit = later[1] if later is not None else end_time
        next_state = later[0] if later is not None else None
        if t_exit == t_entry:
            continue
        for tr in spec.transitions_from(state):
            rows.append(
                {
                    "id": sid,
                    "from": state,
                    "to": tr.to_state,
                    "trans": tr.id,
                    "Tstart": t_entry,
                    "Tstop": t_exit,
                    "status": int(next_state == tr.to_state),
                }
            )
    return pd.DataFrame(rows, columns=LONG_COLUMNS)


def long_to_extended(long_rows: pd.DataFrame, known_noncured: bool, spec: ModelSpec) -> pd.DataFrame:
    """Duplicate split-transition rows per cure status for one subject.

    Unknown-status subjects get a (cure=0, cure=1) pair on every split
    transition and a single cure=0 row on noncure-only transitions; known
    non-cured subjects keep single cure=0 rows with weight preset to 1.
    """
    out = []
    for _, row in long_rows.iterrows():
        tid = int(row["trans"])
        noncure_only = tid in spec.noncure_only_transitions
        if not known_noncured and noncure_only:
            from_nc = int(row["from"]) in spec.non_cure_states
            if row["status"] == 1 or from_nc:
                raise DataError(
                    f"subject {row['id']}: internal inconsistency: unknown cure status "
                    f"but realized non-cure transition {row['from']}->{row['to']}"
                )
        cure_flags = [0] if (known_noncured or noncure_only) else [0, 1]
        for flag in cure_flags:
            rec = dict(row)
            rec["cure"] = flag
            rec["cumHaz"] = 0.0
            rec["hazard"] = np.nan
            rec["likelihood"] = 1.0
            rec["pi"] = 0.5
            if known_noncured:
                rec["weight"] = 1.0
            else:
                rec["weight"] = 0.5
            out.append(rec)
    frame = pd.DataFrame(out, columns=EXTENDED_COLUMNS)
    return frame.sort_values(["Tstart", "trans", "cure"], kind="stable").reset_index(drop=True)


@dataclass
class ExtendedTable:
    """Vectorized extended-long table plus per-subject cure bookkeeping.

    Row arrays are aligned; ``subj_idx`` indexes the subject-level arrays.
    Only the analysis columns (``cum_haz``, ``hazard``, ``loglik``) and the
    subject columns (``pi``, ``w``) are mutated, by the EM driver.
    """

    spec: ModelSpec
    # subject level
    subject_ids: np.ndarray
    known_noncured: np.ndarray
    z_cure: np.ndarray
    cure_names: list[str]
    covariates: pd.DataFrame
    pi: np.ndarray
    w: np.ndarray
    noncure_risk_end: np.ndarray
    t_max_noncure: float
    # row level
    subj_idx: np.ndarray
    trans: np.ndarray
    from_state: np.ndarray
    to_state: np.ndarray
    cure: np.ndarray
    tstart: np.ndarray
    tstop: np.ndarray
    status: np.ndarray
    z_surv: np.ndarray
    surv_names: list[str]
    cum_haz: np.ndarray = field(default=None)
    hazard: np.ndarray = field(default=None)
    loglik: np.ndarray = field(default=None)

    def __post_init__(self):
        n = len(self.trans)
        if self.cum_haz is None:
            self.cum_haz = np.zeros(n)
        if self.hazard is None:
            self.hazard = np.full(n, np.nan)
        if self.loglik is None:
            self.loglik = np.zeros(n)

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    @property
    def n_rows(self) -> int:
        return len(self.trans)

    def row_weights(self) -> np.ndarray:
        """Posterior row weights: w on cured rows, 1-w on non-cured rows.

        Known non-cured subjects carry w = 0, so their single-sided rows get
        weight exactly 1.
        """
        ws = self.w[self.subj_idx]
        return np.where(self.cure == 1, ws, 1.0 - ws)

    def stratum_rows(self, tid: int) -> np.ndarray:
        return np.flatnonzero(self.trans == tid)

    def to_frame(self) -> pd.DataFrame:
        """Export with the canonical column set; cured rows render trans as '<id>.2'."""
        trans_disp = [
            f"{t}.2" if c == 1 else str(t) for t, c in zip(self.trans, self.cure)
        ]
        frame = pd.DataFrame(
            {
                "id": self.subject_ids[self.subj_idx],
                "from": self.from_state,
                "to": self.to_state,
                "trans": trans_disp,
                "cure": self.cure,
                "Tstart": self.tstart,
                "Tstop": self.tstop,
                "status": self.status,
                "cumHaz": self.cum_haz,
                "hazard": np.where(self.status == 1, self.hazard, np.nan),
                "likelihood": np.exp(self.loglik),
                "pi": self.pi[self.subj_idx],
                "weight": self.row_weights(),
            }
        )
        cov = self.covariates.iloc[self.subj_idx].reset_index(drop=True)
        return pd.concat([frame, cov], axis=1)


def prepare_tables(wide: pd.DataFrame, spec: ModelSpec) -> ExtendedTable:
    """Build the extended table for a cohort of wide records."""
    if "id" not in wide.columns:
        raise DataError("wide data needs an 'id' column")
    if wide["id"].duplicated().any():
        dup = wide.loc[wide["id"].duplicated(), "id"].iloc[0]
        raise DataError(f"duplicate subject id {dup!r} in wide data")
    cov_names = list(dict.fromkeys(list(spec.cure_covariates) + list(spec.survival_covariates)))
    missing = [c for c in cov_names if c not in wide.columns]
    if missing:
        raise DataError(f"wide data lacks covariate column(s) {missing}")

    frames = []
    known = []
    nc_risk_end = []
    t_max = -np.inf
    for _, rec in wide.iterrows():
        path, end_time, _ = reconstruct_path(rec, spec)
        is_known = any(s in spec.non_cure_states for s, _ in path)
        for s, t_entry in path:
            if s in spec.non_cure_states:
                t_max = max(t_max, t_entry)
        long_rows = wide_to_long(rec, spec)
        frames.append(long_to_extended(long_rows, is_known, spec))
        known.append(is_known)
        if is_known:
            nc_risk_end.append(np.nan)
        else:
            to_nc = long_rows["to"].isin(spec.non_cure_states)
            nc_risk_end.append(long_rows.loc[to_nc, "Tstop"].max() if to_nc.any() else np.nan)

    ext = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=EXTENDED_COLUMNS)
    subject_ids = wide["id"].to_numpy()
    id_pos = {sid: i for i, sid in enumerate(subject_ids)}
    covariates = wide[cov_names].reset_index(drop=True)

    z_cure, cure_names = spec.cure_design(covariates)
    z_surv_subj, surv_names = spec.survival_design(covariates)

    subj_idx = np.array([id_pos[s] for s in ext["id"]], dtype=np.int64)
    known = np.asarray(known, dtype=bool)
    w0 = np.where(known, 0.0, 0.5)

    return ExtendedTable(
        spec=spec,
        subject_ids=subject_ids,
        known_noncured=known,
        z_cure=z_cure,
        cure_names=cure_names,
        covariates=covariates,
        pi=np.full(len(subject_ids), 0.5),
        w=w0,
        noncure_risk_end=np.asarray(nc_risk_end, dtype=float),
        t_max_noncure=t_max if np.isfinite(t_max) else np.inf,
        subj_idx=subj_idx,
        trans=ext["trans"].to_numpy(dtype=np.int64),
        from_state=ext["from"].to_numpy(dtype=np.int64),
        to_state=ext["to"].to_numpy(dtype=np.int64),
        cure=ext["cure"].to_numpy(dtype=np.int64),
        tstart=ext["Tstart"].to_numpy(dtype=float),
        tstop=ext["Tstop"].to_numpy(dtype=float),
        status=ext["status"].to_numpy(dtype=np.int64),
        z_surv=z_surv_subj[subj_idx] if len(subj_idx) else np.empty((0, z_surv_subj.shape[1])),
        surv_names=surv_names,
    )


def build_q2_table(table: ExtendedTable) -> pd.DataFrame:
    """Cure-outcome table for the weighted logistic sub-fit.

    Two complementary-weight rows per unknown-status subject (cure 0 then
    cure 1, per the display convention), one weight-1 cure=0 row per known
    non-cured subject.
    """
    if np.any((table.w < 0) | (table.w > 1)):
        bad = table.subject_ids[np.flatnonzero((table.w < 0) | (table.w > 1))[0]]
        raise DataError(f"subject {bad!r}: weight outside [0, 1]")
    rows = []
    for i, sid in enumerate(table.subject_ids):
        cov = table.covariates.iloc[i].to_dict()
        if table.known_noncured[i]:
            rows.append({"id": sid, "weight": 1.0, "cure": 0, **cov})
        else:
            w = float(table.w[i])
            rows.append({"id": sid, "weight": 1.0 - w, "cure": 0, **cov})
            rows.append({"id": sid, "weight": w, "cure": 1, **cov})
    return pd.DataFrame(rows, columns=["id", "weight", "cure"] + list(table.covariates.columns))
