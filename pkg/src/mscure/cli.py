"""Command-line pipeline: validate, prep, fit, se, predict, simulate.

Every command that writes results puts them in an output directory together
with exactly one ``manifest.json`` recording input hashes, the seed, and the
hashes of the files produced, so identical (config, data, seed) runs can be
verified byte-for-byte. On any module error the partial outputs are removed
and a machine-readable error JSON is printed to stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .dataprep import build_q2_table, prepare_tables
from .em import FittedModel, em_fit
from .errors import MscureError
from .inference import bootstrap_se, coefficient_vector, oakes_information
from .model import load_model_spec
from .predict import History, dynamic_predict, posterior_cure_given_history
from .simulate import load_true_model, simulate_cohort


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


_ACTIVE_OUTPUT: "_OutputDir | None" = None


class _OutputDir:
    """Tracks files written to the output directory so failures can clean up."""

    def __init__(self, path: Path):
        global _ACTIVE_OUTPUT
        self.root = Path(path)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []
        _ACTIVE_OUTPUT = self

    def file(self, name: str) -> Path:
        p = self.root / name
        self.files.append(p)
        return p

    def cleanup(self) -> None:
        for p in self.files:
            if p.exists():
                p.unlink()

    def write_manifest(self, command: str, inputs: dict, seed, summary: dict) -> Path:
        manifest = {
            "command": command,
            "tool": "mscure",
            "version": __version__,
            "inputs": {
                name: {"path": str(p), "sha256": _sha256(Path(p))} for name, p in inputs.items()
            },
            "seed": seed,
            "started_utc": self._started,
            "finished_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "summary": summary,
            "outputs": {p.name: _sha256(p) for p in self.files if p.exists()},
        }
        path = self.root / "manifest.json"
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    def start_clock(self):
        self._started = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        return self


def _read_data(path) -> pd.DataFrame:
    return pd.read_csv(path)


def _coefficient_frame(fitted: FittedModel, se: dict | None = None) -> pd.DataFrame:
    rows = []
    for nm, val in zip(fitted.alpha.names, fitted.alpha.alpha):
        key = f"alpha:{nm}"
        rows.append({"analysis": "cure", "transition": "", "term": nm, "estimate": float(val),
                     "se": (se or {}).get(key, np.nan)})
    for tr in fitted.spec.transitions:
        tf = fitted.cox[tr.id]
        if tf.skipped:
            continue
        label = f"{tr.from_state}->{tr.to_state}"
        for nm, val in zip(tf.names, tf.beta):
            key = f"b[{label}]:{nm}"
            rows.append({"analysis": "survival", "transition": label, "term": nm,
                         "estimate": float(val), "se": (se or {}).get(key, np.nan)})
    return pd.DataFrame(rows, columns=["analysis", "transition", "term", "estimate", "se"])


def _report_frame(coef: pd.DataFrame) -> pd.DataFrame:
    """Human-readable wide report: one row for the cure analysis, one per transition.

    Cells hold 'estimate (se)' rounded to 3 decimals; machine precision lives
    in the coefficient CSV.
    """
    def cell(row):
        if np.isfinite(row["se"]):
            return f"{row['estimate']:.3f} ({row['se']:.3f})"
        return f"{row['estimate']:.3f}"

    cure_terms = coef.loc[coef["analysis"] == "cure", "term"].tolist()
    surv_terms = []
    for t in coef.loc[coef["analysis"] == "survival", "term"]:
        if t not in surv_terms:
            surv_terms.append(t)
    columns = ["analysis", "transition"] + list(dict.fromkeys(cure_terms + surv_terms))
    out_rows = []
    cure = {"analysis": "cure", "transition": ""}
    for _, row in coef[coef["analysis"] == "cure"].iterrows():
        cure[row["term"]] = cell(row)
    out_rows.append(cure)
    for label in coef.loc[coef["analysis"] == "survival", "transition"].unique():
        rec = {"analysis": "survival", "transition": label}
        sub = coef[(coef["analysis"] == "survival") & (coef["transition"] == label)]
        for _, row in sub.iterrows():
            rec[row["term"]] = cell(row)
        out_rows.append(rec)
    return pd.DataFrame(out_rows, columns=columns)


def _baseline_frame(fitted: FittedModel) -> pd.DataFrame:
    rows = []
    for tr in fitted.spec.transitions:
        base = fitted.baseline[tr.id]
        cum = np.cumsum(base.increments)
        for t, inc, c in zip(base.times, base.increments, cum):
            rows.append({"trans": tr.id, "time": t, "increment": inc, "cumhaz": c})
    return pd.DataFrame(rows, columns=["trans", "time", "increment", "cumhaz"])


def _fit_outputs(out: _OutputDir, fitted: FittedModel, se: dict | None = None) -> dict:
    fitted.save(out.file("model.json"))
    coef = _coefficient_frame(fitted, se)
    coef.to_csv(out.file("coefficients.csv"), index=False)
    _report_frame(coef).to_csv(out.file("report.csv"), index=False)
    pd.DataFrame(
        {
            "id": fitted.subject_ids,
            "pi": fitted.pi,
            "weight": fitted.weights,
            "known_noncured": fitted.known_noncured.astype(int),
        }
    ).to_csv(out.file("cure_probabilities.csv"), index=False)
    pd.DataFrame(
        {"iteration": np.arange(1, len(fitted.loglik_trace) + 1), "loglik": fitted.loglik_trace}
    ).to_csv(out.file("loglik_trace.csv"), index=False)
    _baseline_frame(fitted).to_csv(out.file("baselines.csv"), index=False)
    return {
        "converged": fitted.converged,
        "iterations": fitted.iterations,
        "loglik": fitted.loglik,
        "dropped_gammas": sorted(fitted.dropped_gammas),
    }


def _cmd_validate(args) -> int:
    spec = load_model_spec(args.config)
    print(f"states: {len(spec.states)} (absorbing: {sorted(spec.absorbing)})")
    print(
        f"transitions: {len(spec.transitions)} "
        f"({len(spec.split_transitions)} split, "
        f"{len(spec.noncure_only_transitions)} non-cure)"
    )
    print(f"non-cure states: {sorted(spec.non_cure_states)}")
    print(f"cure covariates: {list(spec.cure_covariates)}")
    print(f"survival covariates: {list(spec.survival_covariates)}")
    print("ok")
    return 0


def _cmd_prep(args) -> int:
    spec = load_model_spec(args.config)
    wide = _read_data(args.data)
    out = _OutputDir(args.out).start_clock()
    table = prepare_tables(wide, spec)
    table.to_frame().to_csv(out.file("extended_long.csv"), index=False)
    build_q2_table(table).to_csv(out.file("q2.csv"), index=False)
    out.write_manifest(
        "prep", {"config": args.config, "data": args.data}, None,
        {"subjects": int(table.n_subjects), "rows": int(table.n_rows)},
    )
    return 0


def _cmd_fit(args) -> int:
    spec = load_model_spec(args.config)
    wide = _read_data(args.data)
    out = _OutputDir(args.out).start_clock()
    fitted = em_fit(wide, spec)
    summary = _fit_outputs(out, fitted)
    out.write_manifest("fit", {"config": args.config, "data": args.data}, spec.fit.seed, summary)
    return 0


def _cmd_se(args) -> int:
    spec = load_model_spec(args.config)
    wide = _read_data(args.data)
    out = _OutputDir(args.out).start_clock()
    fitted = em_fit(wide, spec)
    if args.method == "bootstrap":
        result = bootstrap_se(wide, spec, B=args.B, seed=args.seed, jobs=args.jobs)
        se = result.se
        result.estimates.to_csv(out.file("bootstrap_estimates.csv"), index=False)
        extra = {"B": args.B, "failures": result.failures, "nonconverged": result.nonconverged}
    else:
        info = oakes_information(fitted)
        se = info.se
        extra = {"parameters": len(info.index.names)}
    summary = _fit_outputs(out, fitted, se)
    summary["se_method"] = args.method
    summary.update(extra)
    out.write_manifest("se", {"config": args.config, "data": args.data}, args.seed, summary)
    return 0


def _cmd_predict(args) -> int:
    fitted = FittedModel.load(args.model)
    raw = json.loads(Path(args.history).read_text(encoding="utf-8"))
    history = History(
        landmark=float(args.landmark),
        covariates=dict(raw.get("covariates", {})),
        path=[(int(s), float(t)) for s, t in raw.get("path", [])],
    )
    out = _OutputDir(args.out).start_clock()
    curve = dynamic_predict(history, fitted, horizon=float(args.horizon))
    curve.to_frame().to_csv(out.file("prediction.csv"), index=False)
    out.write_manifest(
        "predict", {"model": args.model, "history": args.history}, None,
        {
            "landmark": float(args.landmark),
            "horizon": float(args.horizon),
            "current_state": curve.current_state,
            "p_cured": curve.p_cured,
        },
    )
    return 0


def _cmd_simulate(args) -> int:
    truth = load_true_model(args.truth)
    out = _OutputDir(args.out).start_clock()
    cohort = simulate_cohort(truth, n=args.n, seed=args.seed)
    cohort.to_csv(out.file("cohort.csv"), index=False)
    out.write_manifest(
        "simulate", {"truth": args.truth}, args.seed, {"n": args.n}
    )
    return 0


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mscure",
        description="Fit multistate cure models, estimate standard errors, and predict state occupancy.",
    )
    sub = p.add_subparsers(dest="cmd", required=True)

    v = sub.add_parser("validate", help="Check a model configuration file.")
    v.add_argument("--config", required=True, help="Model configuration JSON.")
    v.set_defaults(func=_cmd_validate)

    pr = sub.add_parser("prep", help="Write the extended-long and cure tables for a cohort.")
    pr.add_argument("--config", required=True)
    pr.add_argument("--data", required=True, help="Wide-format CSV.")
    pr.add_argument("--out", required=True, help="Output directory.")
    pr.set_defaults(func=_cmd_prep)

    f = sub.add_parser("fit", help="Fit the model by EM.")
    f.add_argument("--config", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=_cmd_fit)

    s = sub.add_parser("se", help="Standard errors by bootstrap or observed information.")
    s.add_argument("--config", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--method", choices=("bootstrap", "information"), default="bootstrap")
    s.add_argument("--B", type=int, default=1000, help="Bootstrap replicates.")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument(
        "--jobs", type=int, default=int(os.environ.get("MSCURE_JOBS", "1")),
        help="Parallel bootstrap workers (env MSCURE_JOBS).",
    )
    s.set_defaults(func=_cmd_se)

    pd_ = sub.add_parser("predict", help="Dynamic state-occupancy prediction.")
    pd_.add_argument("--model", required=True, help="Fitted model JSON from 'fit'.")
    pd_.add_argument("--history", required=True, help="History JSON: covariates + path.")
    pd_.add_argument("--landmark", type=float, required=True)
    pd_.add_argument("--horizon", type=float, required=True)
    pd_.add_argument("--out", required=True)
    pd_.set_defaults(func=_cmd_predict)

    sim = sub.add_parser("simulate", help="Generate a synthetic wide-format cohort.")
    sim.add_argument("--truth", required=True, help="True-model configuration JSON.")
    sim.add_argument("--n", type=int, required=True)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=_cmd_simulate)
    return p


def main(argv=None) -> int:
    global _ACTIVE_OUTPUT
    args = _build_parser().parse_args(argv)
    _ACTIVE_OUTPUT = None
    try:
        return args.func(args)
    except (MscureError, OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        if _ACTIVE_OUTPUT is not None:
            _ACTIVE_OUTPUT.cleanup()
        print(
            json.dumps({"error": type(exc).__name__, "message": str(exc)}),
            file=sys.stderr,
        )
        return 1


if __name__ == "__main__":
    sys.exit(main())
