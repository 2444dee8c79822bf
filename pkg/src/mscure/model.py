"""Model specification: state space, transition diagram, cure structure, covariates.

A validated :class:`ModelSpec` is immutable and safe to share across threads.
Transitions are classified once at validation time: a transition whose source
or target state belongs to the non-cure set can only be taken by non-cured
subjects ("noncure-only"); every other transition is duplicated per latent
cure status in the extended data layout ("split").
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import SpecificationError

ZERO_TAIL_MODES = ("off", "cure_censored_after_tmax", "noncure_censored_after_tmax")


@dataclass(frozen=True)
class Transition:
    id: int
    from_state: int
    to_state: int

    @property
    def pair(self) -> tuple[int, int]:
        return (self.from_state, self.to_state)


@dataclass(frozen=True)
class Encoding:
    """Covariate encoding: plain numeric, or factor expanded to dummy columns.

    Factor encodings produce one column per non-reference level, named
    ``<covariate>=<level>``; the reference level is excluded.
    """

    kind: str = "numeric"
    levels: tuple[str, ...] = ()
    reference: str | None = None

    def column_names(self, name: str) -> list[str]:
        if self.kind == "numeric":
            return [name]
        return [f"{name}={lvl}" for lvl in self.levels if lvl != self.reference]

    def expand(self, name: str, values) -> np.ndarray:
        """Expand raw covariate values into design columns (n x k)."""
        values = np.asarray(values, dtype=object)
        if self.kind == "numeric":
            try:
                col = values.astype(float)
            except (TypeError, ValueError):
                raise SpecificationError(
                    f"covariate '{name}' is encoded as numeric but holds non-numeric values"
                )
            return col.reshape(-1, 1)
        cols = []
        known = set(self.levels)
        seen = {str(v) for v in values}
        unknown = seen - known
        if unknown:
            raise SpecificationError(
                f"covariate '{name}' has unknown factor level(s) {sorted(unknown)}"
            )
        for lvl in self.levels:
            if lvl == self.reference:
                continue
            cols.append((values.astype(str) == lvl).astype(float))
        return np.column_stack(cols) if cols else np.empty((len(values), 0))


@dataclass(frozen=True)
class FitConfig:
    epsilon: float = 1e-4
    max_iter: int = 500
    inner_tol: float = 1e-9
    inner_max_iter: int = 50
    zero_tail: str = "off"
    gamma_drop_threshold: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise SpecificationError("fit.epsilon must be > 0")
        if not self.inner_tol > 0:
            raise SpecificationError("fit.inner_tol must be > 0")
        if self.max_iter < 1 or self.inner_max_iter < 1:
            raise SpecificationError("iteration caps must be >= 1")
        if self.zero_tail not in ZERO_TAIL_MODES:
            raise SpecificationError(
                f"fit.zero_tail must be one of {ZERO_TAIL_MODES}, got '{self.zero_tail}'"
            )
        if not self.gamma_drop_threshold > 0:
            raise SpecificationError("fit.gamma_drop_threshold must be > 0")


@dataclass(frozen=True)
class ModelSpec:
    """Validated multistate cure model structure.

    ``split_transitions`` and ``noncure_only_transitions`` partition the
    transition ids; ``noncure_exit_transitions`` (source state in the non-cure
    set) is the subset whose strata can be fitted once outside the EM loop.
    """

    states: tuple[int, ...]
    absorbing: frozenset[int]
    transitions: tuple[Transition, ...]
    non_cure_states: frozenset[int]
    cure_covariates: tuple[str, ...]
    survival_covariates: tuple[str, ...]
    encodings: dict[str, Encoding]
    fit: FitConfig = field(default_factory=FitConfig)
    labels: dict[int, str] = field(default_factory=dict)
    data_columns: dict[int, tuple[str, str]] = field(default_factory=dict)
    split_transitions: frozenset[int] = frozenset()
    noncure_only_transitions: frozenset[int] = frozenset()
    noncure_exit_transitions: frozenset[int] = frozenset()

    # -- structure lookups ------------------------------------------------

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def initial_state(self) -> int:
        return 1

    def transition(self, tid: int) -> Transition:
        return self._by_id()[tid]

    def transition_between(self, from_state: int, to_state: int) -> Transition | None:
        return self._by_pair().get((from_state, to_state))

    def transitions_from(self, state: int) -> list[Transition]:
        return [t for t in self.transitions if t.from_state == state]

    def is_split(self, tid: int) -> bool:
        return tid in self.split_transitions

    def _by_id(self) -> dict[int, Transition]:
        return {t.id: t for t in self.transitions}

    def _by_pair(self) -> dict[tuple[int, int], Transition]:
        return {t.pair: t for t in self.transitions}

    def event_columns(self, state: int) -> tuple[str, str]:
        """Wide-format (time, status) column names for entry into ``state``."""
        if state in self.data_columns:
            return self.data_columns[state]
        return (f"st{state}", f"st{state}.s")

    # -- design matrices ---------------------------------------------------

    def _design(self, frame, names: tuple[str, ...]) -> tuple[np.ndarray, list[str]]:
        blocks, colnames = [], []
        n = len(frame)
        for name in names:
            enc = self.encodings.get(name, Encoding())
            blocks.append(enc.expand(name, frame[name]))
            colnames.extend(enc.column_names(name))
        if blocks:
            return np.column_stack(blocks), colnames
        return np.empty((n, 0)), colnames

    def survival_design(self, frame) -> tuple[np.ndarray, list[str]]:
        return self._design(frame, self.survival_covariates)

    def cure_design(self, frame) -> tuple[np.ndarray, list[str]]:
        """Cure-model design matrix; the intercept column is always included."""
        x, names = self._design(frame, self.cure_covariates)
        return np.column_stack([np.ones(len(x)), x]), ["intercept"] + names

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        enc = {}
        for name, e in self.encodings.items():
            if e.kind == "numeric":
                enc[name] = {"type": "numeric"}
            else:
                enc[name] = {"type": "factor", "levels": list(e.levels), "reference": e.reference}
        out = {
            "states": list(self.states),
            "absorbing": sorted(self.absorbing),
            "transitions": [[t.from_state, t.to_state] for t in self.transitions],
            "non_cure_states": sorted(self.non_cure_states),
            "covariates": {
                "cure": list(self.cure_covariates),
                "survival": list(self.survival_covariates),
                "encodings": enc,
            },
            "fit": {
                "epsilon": self.fit.epsilon,
                "max_iter": self.fit.max_iter,
                "inner_tol": self.fit.inner_tol,
                "inner_max_iter": self.fit.inner_max_iter,
                "zero_tail": self.fit.zero_tail,
                "gamma_drop_threshold": self.fit.gamma_drop_threshold,
                "seed": self.fit.seed,
            },
        }
        if self.labels:
            out["labels"] = {str(k): v for k, v in self.labels.items()}
        if self.data_columns:
            out["data_columns"] = {
                str(k): {"time": v[0], "status": v[1]} for k, v in self.data_columns.items()
            }
        return out


def _parse_encoding(name: str, raw: dict) -> Encoding:
    kind = raw.get("type", "numeric")
    if kind == "numeric":
        return Encoding()
    if kind != "factor":
        raise SpecificationError(f"covariate '{name}': unknown encoding type '{kind}'")
    levels = tuple(str(v) for v in raw.get("levels", ()))
    if len(levels) < 2:
        raise SpecificationError(f"covariate '{name}': factor encoding needs >= 2 levels")
    if len(set(levels)) != len(levels):
        raise SpecificationError(f"covariate '{name}': duplicate factor levels")
    reference = str(raw.get("reference", levels[0]))
    if reference not in levels:
        raise SpecificationError(
            f"covariate '{name}': reference level '{reference}' not among levels"
        )
    return Encoding(kind="factor", levels=levels, reference=reference)


def validate_model_spec(raw_spec) -> ModelSpec:
    """Validate a raw configuration tree (or re-validate a ModelSpec).

    Derives the cure structure (split vs noncure-only transition partition)
    and checks every structural invariant, raising
    :class:`~mscure.errors.SpecificationError` naming the offending element.
    """
    if isinstance(raw_spec, ModelSpec):
        return validate_model_spec(raw_spec.to_dict())
    if not isinstance(raw_spec, dict):
        raise SpecificationError("model configuration must be a mapping")

    states = tuple(int(s) for s in raw_spec.get("states", ()))
    if not states:
        raise SpecificationError("no states declared")
    if sorted(states) != list(range(1, len(states) + 1)):
        raise SpecificationError("state ids must be unique and contiguous from 1")

    state_set = set(states)
    absorbing = frozenset(int(s) for s in raw_spec.get("absorbing", ()))
    unknown = absorbing - state_set
    if unknown:
        raise SpecificationError(f"absorbing set references unknown state(s) {sorted(unknown)}")

    raw_trans = raw_spec.get("transitions", ())
    transitions = []
    seen_pairs = set()
    for i, pair in enumerate(raw_trans):
        f, t = int(pair[0]), int(pair[1])
        if f not in state_set or t not in state_set:
            raise SpecificationError(f"transition {f}->{t} references an unknown state")
        if f == t:
            raise SpecificationError(f"self-transition {f}->{t} is not allowed")
        if (f, t) in seen_pairs:
            raise SpecificationError(f"duplicate transition {f}->{t}")
        if f in absorbing:
            raise SpecificationError(
                f"absorbing state {f} has an outgoing transition {f}->{t}"
            )
        seen_pairs.add((f, t))
        transitions.append(Transition(id=i + 1, from_state=f, to_state=t))
    if not transitions:
        raise SpecificationError("no transitions declared")

    non_cure = frozenset(int(s) for s in raw_spec.get("non_cure_states", ()))
    if not non_cure:
        raise SpecificationError(
            "cure structure degenerate: non_cure_states must be a non-empty subset of states"
        )
    unknown = non_cure - state_set
    if unknown:
        raise SpecificationError(f"non_cure_states references unknown state(s) {sorted(unknown)}")

    noncure_only = frozenset(
        t.id for t in transitions if t.from_state in non_cure or t.to_state in non_cure
    )
    split = frozenset(t.id for t in transitions) - noncure_only
    noncure_exit = frozenset(t.id for t in transitions if t.from_state in non_cure)

    cov = raw_spec.get("covariates", {})
    cure_cov = tuple(cov.get("cure", ()))
    surv_cov = tuple(cov.get("survival", ()))
    encodings = {
        name: _parse_encoding(name, enc) for name, enc in cov.get("encodings", {}).items()
    }
    for name in set(cure_cov) | set(surv_cov):
        encodings.setdefault(name, Encoding())

    fit_raw = dict(raw_spec.get("fit", {}))
    fit = FitConfig(
        epsilon=float(fit_raw.get("epsilon", 1e-4)),
        max_iter=int(fit_raw.get("max_iter", 500)),
        inner_tol=float(fit_raw.get("inner_tol", 1e-9)),
        inner_max_iter=int(fit_raw.get("inner_max_iter", 50)),
        zero_tail=str(fit_raw.get("zero_tail", "off")),
        gamma_drop_threshold=float(fit_raw.get("gamma_drop_threshold", 10.0)),
        seed=int(fit_raw.get("seed", 0)),
    )

    labels = {int(k): str(v) for k, v in raw_spec.get("labels", {}).items()}
    data_columns = {}
    for k, v in raw_spec.get("data_columns", {}).items():
        state = int(k)
        if state not in state_set:
            raise SpecificationError(f"data_columns references unknown state {state}")
        data_columns[state] = (str(v["time"]), str(v["status"]))

    return ModelSpec(
        states=states,
        absorbing=absorbing,
        transitions=tuple(transitions),
        non_cure_states=non_cure,
        cure_covariates=cure_cov,
        survival_covariates=surv_cov,
        encodings=encodings,
        fit=fit,
        labels=labels,
        data_columns=data_columns,
        split_transitions=split,
        noncure_only_transitions=noncure_only,
        noncure_exit_transitions=noncure_exit,
    )


def load_model_spec(path) -> ModelSpec:
    """Load and validate a model specification from a JSON file."""
    with open(Path(path), "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    return validate_model_spec(raw)
