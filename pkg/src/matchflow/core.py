"""Core types and invariants for sequential matched-allocation trials.

A trial enrolls subjects one at a time. Each subject carries a covariate
vector, receives a binary assignment (1 = treatment, 0 = control) and later a
real-valued response. Assigned subjects live either in the reservoir
(randomized singletons) or in exactly one matched pair, so with m pairs and
n_R reservoir subjects the assigned count is always 2m + n_R.

All randomness anywhere in the engine flows through `derive_seed`, which maps
(master_seed, purpose_tag, step) to an independent 64-bit stream seed. Streams
are keyed by purpose so that, e.g., bootstrap pair draws never depend on the
realized assignments; that independence is what makes the conditional
randomization test exact.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

DESIGN_KINDS = (
    "bernoulli",
    "biased_coin",
    "minimization",
    "kk14",
    "cara_naive",
    "cara_stepwise",
)
# designs that run the sequential matching algorithm
MATCHING_KINDS = ("kk14", "cara_naive", "cara_stepwise")

ESTIMATOR_KINDS = ("classic", "ols", "combined_classic", "combined_ols")
TEST_KINDS = ("wald", "randomization")

PURPOSE_TAGS = frozenset(
    {"alloc-coin", "boot-pairs", "null-draw", "scenario", "tiebreak"}
)

SCHEMA_VERSION = 1


class EngineError(Exception):
    """Base class for engine-level failures (as opposed to bad arguments)."""


class InsufficientHistory(EngineError):
    """Not enough responded subjects to fit the requested quantity."""


class DegenerateCovariance(EngineError):
    """Sample covariance is singular even after the one-shot ridge retry."""


class Inestimable(EngineError):
    """The requested estimator has no usable component on this state."""


def derive_seed(master_seed: int, purpose_tag: str, t: int) -> int:
    """Derive a 64-bit stream seed from (master_seed, purpose_tag, t).

    Deterministic across platforms and processes. Distinct tags or step
    indices give independent streams; unknown tags are rejected so that a
    typo cannot silently alias two streams.
    """
    if purpose_tag not in PURPOSE_TAGS:
        raise ValueError(f"unknown purpose tag: {purpose_tag!r}")
    digest = hashlib.blake2b(
        f"{master_seed}|{purpose_tag}|{t}".encode(), digest_size=8
    ).digest()
    return int.from_bytes(digest, "big")


def canonical_json(obj: Any) -> str:
    """Serialize to the canonical JSON form used for state comparison.

    Sorted keys, no whitespace, NaN/Inf rejected. Two states are equal iff
    their canonical JSON strings are byte-identical.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


@dataclass
class SubjectRecord:
    entry_index: int  # 1-based arrival order
    covariates: np.ndarray
    assignment: Optional[int] = None  # 1 = treatment, 0 = control
    response: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "entry_index": self.entry_index,
            "covariates": [float(v) for v in np.asarray(self.covariates)],
            "assignment": self.assignment,
            "response": self.response,
        }

    @staticmethod
    def from_dict(d: dict) -> "SubjectRecord":
        return SubjectRecord(
            entry_index=int(d["entry_index"]),
            covariates=np.asarray(d["covariates"], dtype=float),
            assignment=None if d["assignment"] is None else int(d["assignment"]),
            response=None if d["response"] is None else float(d["response"]),
        )


@dataclass
class MatchPair:
    first_index: int  # reservoir partner, entered earlier
    second_index: int  # matched entrant

    def to_dict(self) -> dict:
        return {"first_index": self.first_index, "second_index": self.second_index}


@dataclass
class DesignConfig:
    """Allocation design settings.

    t0 defaults to ceil(0.35 * planned_n): the burn-in prefix that is
    randomized into the reservoir before matching can start. lam is the
    quantile level of the match threshold (F quantile for kk14, bootstrap
    quantile for the weighted designs). coin_bias is the biased-coin /
    minimization preference probability.
    """

    design_kind: str
    planned_n: int
    t0: Optional[int] = None
    lam: float = 0.10
    bootstrap_resamples: int = 500
    coin_bias: float = 2.0 / 3.0

    def __post_init__(self):
        if self.t0 is None and self.planned_n >= 1:
            self.t0 = math.ceil(0.35 * self.planned_n)

    def validate(self) -> list[str]:
        problems = []
        if self.design_kind not in DESIGN_KINDS:
            problems.append(f"unknown design_kind {self.design_kind!r}")
        if self.planned_n < 1:
            problems.append("planned_n must be >= 1")
        if self.t0 is None or self.t0 < 1:
            problems.append("t0 must be >= 1")
        if not (0.0 < self.lam < 1.0):
            problems.append("lam must lie in (0, 1)")
        if self.bootstrap_resamples < 1:
            problems.append("bootstrap_resamples must be >= 1")
        if not (0.5 < self.coin_bias <= 0.99):
            problems.append("coin_bias must lie in (0.5, 0.99]")
        return problems

    def to_dict(self) -> dict:
        return {
            "design_kind": self.design_kind,
            "planned_n": self.planned_n,
            "t0": self.t0,
            "lam": self.lam,
            "bootstrap_resamples": self.bootstrap_resamples,
            "coin_bias": self.coin_bias,
        }

    @staticmethod
    def from_dict(d: dict) -> "DesignConfig":
        return DesignConfig(
            design_kind=d["design_kind"],
            planned_n=int(d["planned_n"]),
            t0=int(d["t0"]),
            lam=float(d["lam"]),
            bootstrap_resamples=int(d["bootstrap_resamples"]),
            coin_bias=float(d["coin_bias"]),
        )


@dataclass
class TrialState:
    """Full trial history: subjects in arrival order plus match structure.

    Append-only by convention; helpers never rewrite past entries. The
    reservoir and matches lists hold 1-based entry indices.
    """

    config: DesignConfig
    master_seed: int
    subjects: list[SubjectRecord] = field(default_factory=list)
    reservoir: list[int] = field(default_factory=list)
    matches: list[MatchPair] = field(default_factory=list)

    @property
    def n_entered(self) -> int:
        return len(self.subjects)

    @property
    def p(self) -> Optional[int]:
        return len(self.subjects[0].covariates) if self.subjects else None

    def covariate_matrix(self) -> np.ndarray:
        return np.array([s.covariates for s in self.subjects], dtype=float)

    def assignments(self) -> np.ndarray:
        """Assignment vector with -1 for not-yet-assigned subjects."""
        return np.array(
            [-1 if s.assignment is None else s.assignment for s in self.subjects],
            dtype=np.int64,
        )

    def responses(self) -> np.ndarray:
        """Response vector with NaN for not-yet-recorded responses."""
        return np.array(
            [np.nan if s.response is None else s.response for s in self.subjects],
            dtype=float,
        )

    def arm_counts(self) -> tuple[int, int]:
        w = self.assignments()
        return int(np.sum(w == 1)), int(np.sum(w == 0))

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "master_seed": self.master_seed,
            "config": self.config.to_dict(),
            "subjects": [s.to_dict() for s in self.subjects],
            "reservoir": list(self.reservoir),
            "matches": [m.to_dict() for m in self.matches],
        }

    @staticmethod
    def from_dict(d: dict) -> "TrialState":
        state = TrialState(
            config=DesignConfig.from_dict(d["config"]),
            master_seed=int(d["master_seed"]),
        )
        state.subjects = [SubjectRecord.from_dict(s) for s in d["subjects"]]
        state.reservoir = [int(i) for i in d["reservoir"]]
        state.matches = [
            MatchPair(int(m["first_index"]), int(m["second_index"]))
            for m in d["matches"]
        ]
        return state


@dataclass
class AllocationDecision:
    """Outcome of one enrollment step, as appended to the trial event log."""

    entry_index: int
    assignment: int
    matched_with: Optional[int] = None  # reservoir partner if matched
    randomized: bool = True
    weights_used: Optional[list[float]] = None
    threshold_used: Optional[float] = None
    min_distance: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "entry_index": self.entry_index,
            "assignment": self.assignment,
            "matched_with": self.matched_with,
            "randomized": self.randomized,
            "weights_used": self.weights_used,
            "threshold_used": self.threshold_used,
            "min_distance": self.min_distance,
        }


@dataclass
class EstimateReport:
    estimator_kind: str
    estimate: float
    variance_estimate: float
    components: dict = field(default_factory=dict)
    fallback_used: str = "none"  # none | pairs_only | reservoir_only
    df: Optional[int] = None  # Student-t df; None means normal reference
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "estimator_kind": self.estimator_kind,
            "estimate": self.estimate,
            "variance_estimate": self.variance_estimate,
            "components": self.components,
            "fallback_used": self.fallback_used,
            "df": self.df,
            "notes": self.notes,
        }


@dataclass
class TestReport:
    test_kind: str
    p_value: float
    level: float
    beta0: float = 0.0
    statistic: Optional[float] = None
    interval: Optional[tuple[float, float]] = None
    interval_unbounded: tuple[bool, bool] = (False, False)
    n_draws: Optional[int] = None  # randomization draws actually used
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "test_kind": self.test_kind,
            "p_value": self.p_value,
            "level": self.level,
            "beta0": self.beta0,
            "statistic": self.statistic,
            "interval": None if self.interval is None else list(self.interval),
            "interval_unbounded": list(self.interval_unbounded),
            "n_draws": self.n_draws,
            "notes": self.notes,
        }


def validate_state(state: TrialState) -> list[str]:
    """Check every structural invariant; return one message per defect.

    An empty list means the state is internally consistent. Never raises on
    malformed states: the validator is what the service runs after replaying
    an event log, so it has to name problems rather than die on them.
    """
    problems: list[str] = []
    problems.extend(state.config.validate())

    n = len(state.subjects)
    p = None
    for i, s in enumerate(state.subjects):
        if s.entry_index != i + 1:
            problems.append(
                f"subject at position {i} has entry_index {s.entry_index}, expected {i + 1}"
            )
        cov = np.asarray(s.covariates, dtype=float)
        if p is None:
            p = cov.shape[0]
        elif cov.shape[0] != p:
            problems.append(
                f"subject {s.entry_index} has {cov.shape[0]} covariates, expected {p}"
            )
        if cov.size and not np.all(np.isfinite(cov)):
            problems.append(f"subject {s.entry_index} has non-finite covariates")
        if s.assignment not in (None, 0, 1):
            problems.append(
                f"subject {s.entry_index} has assignment {s.assignment!r} outside {{0,1}}"
            )
        if s.response is not None:
            if s.assignment is None:
                problems.append(
                    f"subject {s.entry_index} has a response but no assignment"
                )
            if not math.isfinite(s.response):
                problems.append(f"subject {s.entry_index} has non-finite response")

    valid_idx = set(range(1, n + 1))
    assigned = {
        s.entry_index for s in state.subjects if s.assignment in (0, 1)
    }

    seen_in_structure: dict[int, str] = {}

    def _claim(idx: int, where: str):
        if idx not in valid_idx:
            problems.append(f"{where} references unknown subject {idx}")
            return
        if idx not in assigned:
            problems.append(f"{where} contains unassigned subject {idx}")
        if idx in seen_in_structure:
            problems.append(
                f"subject {idx} appears in both {seen_in_structure[idx]} and {where}"
            )
        else:
            seen_in_structure[idx] = where

    for idx in state.reservoir:
        _claim(idx, "reservoir")
    for m in state.matches:
        _claim(m.first_index, f"match ({m.first_index},{m.second_index})")
        _claim(m.second_index, f"match ({m.first_index},{m.second_index})")
        if m.first_index >= m.second_index:
            problems.append(
                f"match ({m.first_index},{m.second_index}) is not in arrival order"
            )
        if (
            m.first_index in valid_idx
            and m.second_index in valid_idx
            and state.subjects[m.first_index - 1].assignment in (0, 1)
            and state.subjects[m.second_index - 1].assignment in (0, 1)
            and state.subjects[m.first_index - 1].assignment
            == state.subjects[m.second_index - 1].assignment
        ):
            problems.append(
                f"match ({m.first_index},{m.second_index}) arms are not opposite"
            )

    for idx in sorted(assigned):
        if idx not in seen_in_structure:
            problems.append(
                f"assigned subject {idx} is in neither reservoir nor any match"
            )

    m_count, n_r = len(state.matches), len(state.reservoir)
    if 2 * m_count + n_r != len(assigned):
        problems.append(
            f"structure counts disagree: 2*{m_count} + {n_r} != {len(assigned)} assigned"
        )
    return problems
