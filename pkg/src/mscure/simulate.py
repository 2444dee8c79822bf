"""Synthetic wide-format cohorts from a fully specified true model.

Subjects walk the transition diagram by competing-risks inverse-transform
sampling on piecewise-constant baseline hazards; cured subjects have zero
hazard on every transition touching a non-cure state. Per-subject RNG streams
make generation deterministic given the seed and order-independent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import SpecificationError
from .logistic import expit
from .model import ModelSpec, validate_model_spec


@dataclass(frozen=True)
class PiecewiseHazard:
    """Piecewise-constant rate: rates[i] applies on [breakpoints[i-1], breakpoints[i])."""

    breakpoints: tuple[float, ...]
    rates: tuple[float, ...]

    def __post_init__(self):
        if len(self.rates) != len(self.breakpoints) + 1:
            raise SpecificationError("piecewise hazard needs len(rates) == len(breakpoints) + 1")
        if any(r < 0 for r in self.rates):
            raise SpecificationError("hazard rates must be >= 0")
        bp = list(self.breakpoints)
        if bp != sorted(bp) or len(set(bp)) != len(bp) or (bp and bp[0] <= 0):
            raise SpecificationError("breakpoints must be positive and strictly increasing")

    def cumulative(self, t: float) -> float:
        total = 0.0
        prev = 0.0
        for b, r in zip(self.breakpoints, self.rates):
            if t <= b:
                return total + r * (t - prev)
            total += r * (b - prev)
            prev = b
        return total + self.rates[-1] * (t - prev)

    def invert_from(self, t0: float, extra: float) -> float:
        """Smallest t > t0 with cumulative(t) - cumulative(t0) = extra (inf if never)."""
        target = self.cumulative(t0) + extra
        total = 0.0
        prev = 0.0
        for b, r in zip(self.breakpoints, self.rates):
            seg = r * (b - prev)
            if total + seg >= target and r > 0:
                return prev + (target - total) / r
            total += seg
            prev = b
        r = self.rates[-1]
        if r > 0:
            return prev + (target - total) / r
        return np.inf


@dataclass(frozen=True)
class TrueModel:
    """Generative parameter set: realizes the cure-mixture multistate model."""

    spec: ModelSpec
    alpha: np.ndarray                       # aligned with spec.cure_design names
    betas: dict[int, np.ndarray]            # per transition id, aligned with survival design
    gammas: dict[int, float]                # split transitions only
    baselines: dict[int, PiecewiseHazard]
    censoring_kind: str                     # "uniform" or "administrative"
    c_max: float
    covariate_gens: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        for tid in self.gammas:
            if tid in self.spec.noncure_only_transitions:
                tr = self.spec.transition(tid)
                raise SpecificationError(
                    f"cure effect configured on transition {tr.from_state}->{tr.to_state}, "
                    f"which touches a non-cure state; cured subjects must have zero hazard there"
                )
        if self.censoring_kind not in ("uniform", "administrative"):
            raise SpecificationError(
                f"censoring type must be 'uniform' or 'administrative', got '{self.censoring_kind}'"
            )
        if not self.c_max > 0:
            raise SpecificationError("censoring horizon c_max must be > 0")


def _design_names(spec: ModelSpec):
    dummy = pd.DataFrame({name: [_dummy_value(spec, name)] for name in
                          dict.fromkeys(list(spec.cure_covariates) + list(spec.survival_covariates))})
    _, cure_names = spec.cure_design(dummy)
    _, surv_names = spec.survival_design(dummy)
    return cure_names, surv_names


def _dummy_value(spec: ModelSpec, name: str):
    enc = spec.encodings.get(name)
    if enc is not None and enc.kind == "factor":
        return enc.levels[0]
    return 0.0


def _vector_from_mapping(mapping: dict, names: list[str], context: str) -> np.ndarray:
    unknown = set(mapping) - set(names)
    if unknown:
        raise SpecificationError(f"{context}: unknown coefficient name(s) {sorted(unknown)}")
    return np.array([float(mapping.get(nm, 0.0)) for nm in names])


def load_true_model(source) -> TrueModel:
    """Build a TrueModel from a configuration tree or JSON file."""
    if isinstance(source, (str, Path)):
        raw = json.loads(Path(source).read_text(encoding="utf-8"))
    else:
        raw = source
    spec = validate_model_spec(raw["model"])
    cure_names, surv_names = _design_names(spec)
    alpha = _vector_from_mapping(dict(raw.get("alpha", {})), cure_names, "alpha")

    betas, gammas, baselines = {}, {}, {}
    for key, tdef in raw.get("transitions", {}).items():
        f, t = (int(v) for v in key.replace("->", "-").split("-"))
        tr = spec.transition_between(f, t)
        if tr is None:
            raise SpecificationError(f"truth config references unknown transition {f}->{t}")
        betas[tr.id] = _vector_from_mapping(dict(tdef.get("beta", {})), surv_names, f"beta[{key}]")
        if "gamma" in tdef and tdef["gamma"] is not None:
            gammas[tr.id] = float(tdef["gamma"])
        b = tdef.get("baseline", {})
        baselines[tr.id] = PiecewiseHazard(
            breakpoints=tuple(float(v) for v in b.get("breakpoints", ())),
            rates=tuple(float(v) for v in b.get("rates", (0.0,))),
        )
    for tr in spec.transitions:
        betas.setdefault(tr.id, np.zeros(len(surv_names)))
        baselines.setdefault(tr.id, PiecewiseHazard(breakpoints=(), rates=(0.0,)))

    cens = raw.get("censoring", {"type": "administrative", "c_max": np.inf})
    return TrueModel(
        spec=spec,
        alpha=alpha,
        betas=betas,
        gammas=gammas,
        baselines=baselines,
        censoring_kind=str(cens.get("type", "administrative")),
        c_max=float(cens.get("c_max", np.inf)),
        covariate_gens={k: dict(v) for k, v in raw.get("covariates", {}).items()},
    )


def _draw_covariates(tm: TrueModel, rng: np.random.Generator) -> dict:
    values = {}
    names = dict.fromkeys(list(tm.spec.cure_covariates) + list(tm.spec.survival_covariates))
    for name in names:
        gen = tm.covariate_gens.get(name, {"type": "bernoulli", "p": 0.5})
        kind = gen.get("type", "bernoulli")
        if kind == "bernoulli":
            values[name] = float(rng.random() < float(gen.get("p", 0.5)))
        elif kind == "categorical":
            levels = list(gen["levels"])
            probs = gen.get("probs")
            probs = np.full(len(levels), 1.0 / len(levels)) if probs is None else np.asarray(probs, dtype=float)
            values[name] = levels[int(rng.choice(len(levels), p=probs / probs.sum()))]
        else:
            raise SpecificationError(f"covariate '{name}': unknown generator type '{kind}'")
    return values


def _walk(tm: TrueModel, z_surv: np.ndarray, g: int, censor: float, rng: np.random.Generator):
    spec = tm.spec
    state = spec.initial_state
    t = 0.0
    path = [(state, 0.0)]
    while state not in spec.absorbing:
        candidates = []
        for tr in spec.transitions_from(state):
            if g == 1 and tr.id in spec.noncure_only_transitions:
                continue
            eta = float(z_surv @ tm.betas[tr.id])
            if g == 1 and tr.id in tm.gammas:
                eta += tm.gammas[tr.id]
            t_next = tm.baselines[tr.id].invert_from(t, rng.exponential() * np.exp(-eta))
            candidates.append((t_next, tr.to_state))
        if not candidates:
            break
        t_next, nxt = min(candidates)
        if t_next > censor:
            break
        state, t = nxt, t_next
        path.append((state, t))
    end = min(t, censor) if state in spec.absorbing else censor
    return path, end, state in spec.absorbing


def simulate_cohort(true_model: TrueModel, n: int, seed: int) -> pd.DataFrame:
    """Generate n wide records; deterministic given (true_model, n, seed)."""
    if n < 1:
        raise SpecificationError("cohort size must be >= 1")
    spec = true_model.spec
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]
    entry_states = sorted({t.to_state for t in spec.transitions})
    records = []
    for i, rng in enumerate(streams):
        cov = _draw_covariates(true_model, rng)
        frame = pd.DataFrame([cov])
        z_cure, _ = spec.cure_design(frame)
        z_surv, _ = spec.survival_design(frame)
        pi = float(expit(z_cure[0] @ true_model.alpha))
        g = int(rng.random() < pi)
        if true_model.censoring_kind == "uniform":
            censor = float(rng.uniform(0.0, true_model.c_max))
        else:
            censor = float(true_model.c_max)
        path, end, absorbed = _walk(true_model, z_surv[0], g, censor, rng)
        entered = {state: tt for state, tt in path[1:]}
        rec = {"id": i + 1}
        for state in entry_states:
            tcol, scol = spec.event_columns(state)
            if state in entered:
                rec[tcol], rec[scol] = entered[state], 1
            else:
                rec[tcol], rec[scol] = end, 0
        rec.update(cov)
        records.append(rec)
    return pd.DataFrame(records)
