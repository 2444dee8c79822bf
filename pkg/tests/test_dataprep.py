"""Wide-to-long-to-extended transformations against the worked six-state examples."""

import numpy as np
import pandas as pd
import pytest

from mscure import (
    build_q2_table,
    determine_known_noncured,
    long_to_extended,
    prepare_tables,
    wide_to_long,
)
from mscure.errors import DataError


class TestKnownNoncured:
    def test_subject_with_relapse_is_known(self, example_subjects, sixstate_spec):
        assert determine_known_noncured(example_subjects.iloc[1], sixstate_spec) is True

    def test_subject_without_relapse_is_latent(self, example_subjects, sixstate_spec):
        assert determine_known_noncured(example_subjects.iloc[0], sixstate_spec) is False
        assert determine_known_noncured(example_subjects.iloc[2], sixstate_spec) is False

    def test_all_censored_subject_is_latent(self, example_subjects, sixstate_spec):
        rec = example_subjects.iloc[2].copy()
        rec["ae.s"] = 0
        assert determine_known_noncured(rec, sixstate_spec) is False


class TestWideToLong:
    def test_subject_1_rows(self, example_subjects, sixstate_spec):
        long = wide_to_long(example_subjects.iloc[0], sixstate_spec)
        # at risk from state 1 over (0, 60] then from state 3 over (60, 143]
        from1 = long[long["from"] == 1]
        assert sorted(from1["to"]) == [2, 3, 5, 6]
        assert (from1["Tstart"] == 0).all() and (from1["Tstop"] == 60).all()
        assert from1.loc[from1["to"] == 3, "status"].item() == 1
        assert from1.loc[from1["to"] != 3, "status"].sum() == 0
        from3 = long[long["from"] == 3]
        assert sorted(from3["to"]) == [4, 5, 6]
        assert (from3["Tstart"] == 60).all() and (from3["Tstop"] == 143).all()
        assert from3.loc[from3["to"] == 6, "status"].item() == 1
        assert len(long) == 7

    def test_subject_2_ten_rows_ending_in_relapse_death(self, example_subjects, sixstate_spec):
        long = wide_to_long(example_subjects.iloc[1], sixstate_spec)
        assert len(long) == 10
        last = long.iloc[-1]
        assert (last["from"], last["to"]) == (5, 6)
        assert (last["Tstart"], last["Tstop"], last["status"]) == (422, 579, 1)
        # the composite recovery event is consumed by the 3->4 move
        assert not ((long["from"] == 1) & (long["to"] == 2) & (long["status"] == 1)).any()

    def test_zero_length_sojourn_rows_dropped(self, example_subjects, sixstate_spec):
        rec = example_subjects.iloc[0].copy()
        rec["ae"] = 0  # enters state 3 on day 0: the state-1 sojourn has zero length
        long = wide_to_long(rec, sixstate_spec)
        assert (long["from"] == 1).sum() == 0
        assert (long["from"] == 3).all()

    def test_unrepresentable_path_raises_with_subject_id(self, example_subjects, sixstate_spec):
        rec = example_subjects.iloc[0].copy()
        rec["recae"], rec["recae.s"] = 30, 1  # both-event state before any single event
        with pytest.raises(DataError, match="subject 1"):
            wide_to_long(rec, sixstate_spec)


class TestLongToExtended:
    def test_subject_1_extended_structure(self, example_subjects, sixstate_spec):
        long = wide_to_long(example_subjects.iloc[0], sixstate_spec)
        ext = long_to_extended(long, False, sixstate_spec)
        assert len(ext) == 12
        counts = ext.groupby(["from", "to"]).size().to_dict()
        assert counts == {
            (1, 2): 2, (1, 3): 2, (1, 5): 1, (1, 6): 2,
            (3, 4): 2, (3, 5): 1, (3, 6): 2,
        }
        pair_rows = ext[(ext["from"] == 1) & (ext["to"] == 2)]
        assert sorted(pair_rows["cure"]) == [0, 1]
        assert (ext.loc[ext["to"] == 5, "cure"] == 0).all()

    def test_known_noncured_subject_keeps_single_rows_weight_one(
        self, example_subjects, sixstate_spec
    ):
        long = wide_to_long(example_subjects.iloc[1], sixstate_spec)
        ext = long_to_extended(long, True, sixstate_spec)
        assert len(ext) == 10
        assert (ext["cure"] == 0).all()
        assert (ext["weight"] == 1.0).all()

    def test_subject_3_mirrors_subject_1_structure(self, example_subjects, sixstate_spec):
        ext1 = long_to_extended(
            wide_to_long(example_subjects.iloc[0], sixstate_spec), False, sixstate_spec
        )
        ext3 = long_to_extended(
            wide_to_long(example_subjects.iloc[2], sixstate_spec), False, sixstate_spec
        )
        assert len(ext3) == 12
        key = ["from", "to", "cure"]
        assert ext1[key].value_counts().to_dict() == ext3[key].value_counts().to_dict()

    def test_unknown_subject_with_realized_noncure_transition_is_inconsistent(
        self, example_subjects, sixstate_spec
    ):
        long = wide_to_long(example_subjects.iloc[1], sixstate_spec)
        with pytest.raises(DataError, match="internal inconsistency"):
            long_to_extended(long, False, sixstate_spec)


class TestPreparedTable:
    def test_row_count_formula(self, example_subjects, sixstate_spec):
        table = prepare_tables(example_subjects, sixstate_spec)
        for i in range(table.n_subjects):
            rows = table.subj_idx == i
            long_rows = wide_to_long(example_subjects.iloc[i], sixstate_spec)
            n_split = long_rows["trans"].isin(sixstate_spec.split_transitions).sum()
            n_nc = len(long_rows) - n_split
            expected = len(long_rows) if table.known_noncured[i] else 2 * n_split + n_nc
            assert rows.sum() == expected

    def test_weight_complementarity(self, example_subjects, sixstate_spec):
        table = prepare_tables(example_subjects, sixstate_spec)
        rng = np.random.default_rng(5)
        table.w[~table.known_noncured] = rng.uniform(0, 1, (~table.known_noncured).sum())
        wrow = table.row_weights()
        for i in np.flatnonzero(~table.known_noncured):
            for tid in np.unique(table.trans[table.subj_idx == i]):
                sel = (table.subj_idx == i) & (table.trans == tid)
                if sel.sum() == 2:
                    assert abs(wrow[sel].sum() - 1.0) < 1e-12

    def test_round_trip_event_times(self, example_subjects, sixstate_spec):
        """Aggregating long rows recovers each subject's event times and statuses."""
        for i in range(len(example_subjects)):
            rec = example_subjects.iloc[i]
            long = wide_to_long(rec, sixstate_spec)
            hits = long[long["status"] == 1]
            for _, row in hits.iterrows():
                tcol, scol = sixstate_spec.event_columns(int(row["to"]))
                assert rec[scol] == 1
                assert float(rec[tcol]) == row["Tstop"]
            # censoring/terminal time bounds every interval
            assert (long["Tstop"] <= max(rec[c] for c in ("rec", "ae", "recae", "rel", "srv"))).all()

    def test_competing_risk_exclusivity(self, toy3_cohort, toy3_spec):
        table = prepare_tables(toy3_cohort, toy3_spec)
        frame = pd.DataFrame(
            {
                "subj": table.subj_idx,
                "from": table.from_state,
                "tstart": table.tstart,
                "cure": table.cure,
                "status": table.status,
            }
        )
        per_sojourn = frame.groupby(["subj", "from", "tstart", "cure"])["status"].sum()
        assert (per_sojourn <= 1).all()

    def test_export_columns_and_trans_rendering(self, example_subjects, sixstate_spec):
        table = prepare_tables(example_subjects, sixstate_spec)
        frame = table.to_frame()
        assert list(frame.columns[:13]) == [
            "id", "from", "to", "trans", "cure", "Tstart", "Tstop", "status",
            "cumHaz", "hazard", "likelihood", "pi", "weight",
        ]
        sub1 = frame[frame["id"] == 1]
        assert "8.2" in set(sub1["trans"])
        assert "8" in set(sub1["trans"])
        sub2 = frame[frame["id"] == 2]
        assert set(sub2["trans"]) == {"1", "2", "3", "4", "8", "9", "10", "11", "12", "13"}


class TestQ2Table:
    def test_two_rows_per_unknown_one_per_known(self, example_subjects, sixstate_spec):
        table = prepare_tables(example_subjects, sixstate_spec)
        table.w[0] = 0.877
        q2 = build_q2_table(table)
        sub1 = q2[q2["id"] == 1]
        assert len(sub1) == 2
        assert sub1.loc[sub1["cure"] == 0, "weight"].item() == pytest.approx(0.123)
        assert sub1.loc[sub1["cure"] == 1, "weight"].item() == pytest.approx(0.877)
        sub2 = q2[q2["id"] == 2]
        assert len(sub2) == 1
        assert sub2["cure"].item() == 0 and sub2["weight"].item() == 1.0

    def test_symmetric_initialization(self, example_subjects, sixstate_spec):
        table = prepare_tables(example_subjects, sixstate_spec)
        q2 = build_q2_table(table)
        sub3 = q2[q2["id"] == 3]
        assert list(sub3["weight"]) == [0.5, 0.5]

    def test_weight_outside_unit_interval_rejected(self, example_subjects, sixstate_spec):
        table = prepare_tables(example_subjects, sixstate_spec)
        table.w[0] = 1.2
        with pytest.raises(DataError, match="outside"):
            build_q2_table(table)
