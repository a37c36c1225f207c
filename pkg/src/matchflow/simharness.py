"""Factorial simulation study and retrospective replay harness.

Two workflows live here. The factorial study runs designs x estimators x
tests over a synthetic response model Y = beta_T w + z + eps with
z = b1 x1 + b2 x2 + b3 x1^2, reporting rejection rates, MSE and Monte Carlo
error per cell. Subjects carry three covariates; the third never enters
the response, so it acts as a noise dimension that equal-weight matching
must spend distance budget on while the response-weighted designs learn to
ignore it. The regression estimators see the same three raw covariates,
leaving the quadratic term unexplained — the deliberate misspecification
that gives matching its edge over model adjustment. The replay protocol
re-runs an allocation design over permuted arrival orders of a completed
(historical) trial, retaining subjects whose proposed arm agrees with the
arm they actually received, and compares estimator variances on the
retained subset.

Replicates use common random numbers across designs: the data seed for
replicate r depends only on (master_seed, r), never on the design or
estimator, so design comparisons within a cell row share datasets.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .core import (
    DESIGN_KINDS,
    ESTIMATOR_KINDS,
    MATCHING_KINDS,
    TEST_KINDS,
    DesignConfig,
    EngineError,
    Inestimable,
    SubjectRecord,
    TrialState,
    derive_seed,
)
from .designs import apply_decision, run_design, step
from .inference import (
    classic_estimate,
    combined_classic_estimate,
    estimate,
    randomization_test,
    wald_test,
)

ALPHA = 0.05
NULL_DRAWS = 501

# Number of covariates each subject carries. The third is a pure noise
# dimension: designs match on it, estimators regress on it, but it never
# enters the response.
STUDY_P = 3

# response-surface slopes (b1, b2, b3) for z = b1 x1 + b2 x2 + b3 x1^2
BETA_SETS = {
    "uniform": (1.0, 1.0, 1.0),
    "varied": (6.0, 1.0, 2.0),
}

COVARIANCE_RHO = {"identity": 0.0, "rho075": 0.75}


@dataclass(frozen=True)
class ScenarioSpec:
    """One cell of the factorial study."""

    n: int
    treatment_effect: float
    covariance: str
    betas: str
    design_kind: str
    estimator_kind: str
    test_kind: str
    replicates: int = 1000
    master_seed: int = 0

    def validate(self) -> list[str]:
        problems = []
        if self.n not in (50, 100):
            problems.append(f"n must be 50 or 100, got {self.n}")
        if float(self.treatment_effect) not in (0.0, 1.0):
            problems.append("treatment_effect must be 0 or 1")
        if self.covariance not in COVARIANCE_RHO:
            problems.append(f"unknown covariance {self.covariance!r}")
        if self.betas not in BETA_SETS:
            problems.append(f"unknown betas {self.betas!r}")
        if self.design_kind not in DESIGN_KINDS:
            problems.append(f"unknown design_kind {self.design_kind!r}")
        if self.estimator_kind not in ESTIMATOR_KINDS:
            problems.append(f"unknown estimator_kind {self.estimator_kind!r}")
        if self.test_kind not in TEST_KINDS:
            problems.append(f"unknown test_kind {self.test_kind!r}")
        if self.replicates < 1:
            problems.append("replicates must be >= 1")
        if (
            self.design_kind in DESIGN_KINDS
            and self.estimator_kind in ESTIMATOR_KINDS
            and (self.design_kind in MATCHING_KINDS)
            != self.estimator_kind.startswith("combined")
        ):
            problems.append(
                "combined estimators pair with matching designs and plain "
                "estimators with plain designs"
            )
        return problems


@dataclass(frozen=True)
class CellResult:
    rejection_rate: float
    mse: float
    mean_estimate: float
    mc_standard_error: float
    replicates_used: int
    error_count: int
    rejection_count: int


def response_surface(X: np.ndarray, betas: Sequence[float]) -> np.ndarray:
    """Covariate contribution z = b1 x1 + b2 x2 + b3 x1^2.

    Only the first two covariate columns enter; any further columns are
    response-inert noise dimensions.
    """
    X = np.asarray(X, dtype=float)
    b1, b2, b3 = betas
    return b1 * X[:, 0] + b2 * X[:, 1] + b3 * X[:, 0] ** 2


def study_covariance(covariance: str) -> np.ndarray:
    """3x3 covariate covariance for a study setting.

    identity: three independent unit-variance covariates. rho075: the
    collinearity stress setting — the two response-relevant covariates
    (x1, x2) have correlation 0.75, while the response-inert x3 stays
    independent of both.
    """
    rho = COVARIANCE_RHO.get(covariance)
    if rho is None:
        raise ValueError(f"unknown covariance {covariance!r}")
    sigma = np.eye(STUDY_P)
    sigma[0, 1] = sigma[1, 0] = rho
    return sigma


def generate_subjects(
    spec: ScenarioSpec, replicate_seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw one replicate's covariates, z-values, and response noise.

    x ~ trivariate normal with unit variances and pairwise correlation 0
    (identity) or 0.75 (rho075); eps iid standard normal. The third
    covariate never enters the response. Depends only on the seed and the
    (n, covariance, betas) fields, so designs sharing a replicate seed see
    identical subjects.
    """
    sigma = study_covariance(spec.covariance)
    if spec.betas not in BETA_SETS:
        raise ValueError(f"unknown betas {spec.betas!r}")
    rng = np.random.default_rng(replicate_seed)
    raw = rng.standard_normal((spec.n, STUDY_P))
    X = raw @ np.linalg.cholesky(sigma).T
    z = response_surface(X, BETA_SETS[spec.betas])
    eps = rng.standard_normal(spec.n)
    return X, z, eps


def _replicate_run(spec: ScenarioSpec, r: int):
    """Run the design for replicate r: (state, randomization seed)."""
    rep_seed = derive_seed(spec.master_seed, "scenario", r)
    data_seed = derive_seed(rep_seed, "scenario", 1)
    design_seed = derive_seed(rep_seed, "scenario", 2)
    ran_seed = derive_seed(rep_seed, "null-draw", 0)
    X, z, eps = generate_subjects(spec, data_seed)
    shift = z + eps

    def respond(t: int, w: int) -> float:
        return spec.treatment_effect * w + shift[t - 1]

    config = DesignConfig(design_kind=spec.design_kind, planned_n=spec.n)
    state = run_design(X, respond, config, master_seed=design_seed)
    return state, ran_seed


def _design_runs(spec: ScenarioSpec, workers: int = 1) -> list:
    """All replicate runs for a cell's design factors; failed runs are None."""

    def one(r: int):
        try:
            return _replicate_run(spec, r)
        except EngineError:
            return None

    if workers <= 1:
        return [one(r) for r in range(spec.replicates)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, range(spec.replicates)))


def _cell_records(spec: ScenarioSpec, runs: list) -> list:
    """Per-replicate (estimate, rejected) records; errors become (None, None)."""
    records = []
    for run in runs:
        if run is None:
            records.append((None, None))
            continue
        state, ran_seed = run
        try:
            report = estimate(state, spec.estimator_kind)
            if spec.test_kind == "wald":
                test = wald_test(report)
            else:
                test = randomization_test(
                    state,
                    spec.estimator_kind,
                    beta0=0.0,
                    n_draws=NULL_DRAWS,
                    seed=ran_seed,
                )
            records.append((report.estimate, test.p_value <= ALPHA))
        except EngineError:
            records.append((None, None))
    return records


def _aggregate_cell(
    records: list, beta_t: float, max_error_fraction: float = 0.01
) -> CellResult:
    """Aggregate (estimate, rejected) records into a CellResult.

    Uses compensated summation in a fixed (replicate) order so results do not
    depend on how the replicates were scheduled. Errors beyond the budget
    fail the whole cell.
    """
    total = len(records)
    used = [(e, bool(rej)) for e, rej in records if e is not None]
    errors = total - len(used)
    if total == 0 or (errors > 0 and errors >= max_error_fraction * total):
        raise EngineError(
            f"{errors} of {total} replicates failed "
            f"(budget {max_error_fraction:.1%})"
        )
    n_used = len(used)
    mean_estimate = math.fsum(e for e, _ in used) / n_used
    mse = math.fsum((e - beta_t) ** 2 for e, _ in used) / n_used
    rejections = sum(1 for _, rej in used if rej)
    rate = rejections / n_used
    return CellResult(
        rejection_rate=rate,
        mse=mse,
        mean_estimate=mean_estimate,
        mc_standard_error=math.sqrt(rate * (1.0 - rate) / n_used),
        replicates_used=n_used,
        error_count=errors,
        rejection_count=rejections,
    )


def run_cell(spec: ScenarioSpec, workers: int = 1) -> CellResult:
    """Evaluate one factorial cell at significance level 0.05."""
    problems = spec.validate()
    if problems:
        raise ValueError("; ".join(problems))
    runs = _design_runs(spec, workers=workers)
    return _aggregate_cell(_cell_records(spec, runs), beta_t=spec.treatment_effect)


def _run_key(spec: ScenarioSpec) -> tuple:
    # everything the simulated trials depend on; estimator/test excluded
    return (
        spec.n,
        spec.treatment_effect,
        spec.covariance,
        spec.betas,
        spec.design_kind,
        spec.replicates,
        spec.master_seed,
    )


_CSV_COLUMNS = (
    "n",
    "treatment_effect",
    "covariance",
    "betas",
    "design_kind",
    "estimator_kind",
    "test_kind",
    "replicates",
    "master_seed",
    "rejection_rate",
    "mse",
    "mean_estimate",
    "mc_standard_error",
    "replicates_used",
    "error_count",
    "size_flag",
    "status",
)
_CSV_REALS = ("rejection_rate", "mse", "mean_estimate", "mc_standard_error")


def _size_flag(rejections: int, n_used: int) -> str:
    """Asterisk when an exact two-sided binomial test rejects size = 5%."""
    p = stats.binomtest(rejections, n_used, ALPHA).pvalue
    return "*" if p < ALPHA else ""


def _grid_row(spec: ScenarioSpec, result: Optional[CellResult], status: str) -> dict:
    row = {
        "n": spec.n,
        "treatment_effect": spec.treatment_effect,
        "covariance": spec.covariance,
        "betas": spec.betas,
        "design_kind": spec.design_kind,
        "estimator_kind": spec.estimator_kind,
        "test_kind": spec.test_kind,
        "replicates": spec.replicates,
        "master_seed": spec.master_seed,
        "rejection_rate": None,
        "mse": None,
        "mean_estimate": None,
        "mc_standard_error": None,
        "replicates_used": None,
        "error_count": None,
        "size_flag": "",
        "status": status,
    }
    if result is not None:
        row["rejection_rate"] = result.rejection_rate
        row["mse"] = result.mse
        row["mean_estimate"] = result.mean_estimate
        row["mc_standard_error"] = result.mc_standard_error
        row["replicates_used"] = result.replicates_used
        row["error_count"] = result.error_count
        # the size calibration flag only makes sense under the null
        if spec.treatment_effect == 0.0:
            row["size_flag"] = _size_flag(
                result.rejection_count, result.replicates_used
            )
    return row


def run_grid(cells: Sequence[ScenarioSpec], workers: int = 1) -> list[dict]:
    """Evaluate many cells; failing cells are flagged and the run continues.

    Cells that differ only in estimator/test share their simulated trials
    (same run key), so adding analysis columns to a grid costs no extra
    design runs.
    """
    rows: list[Optional[dict]] = [None] * len(cells)
    groups: dict[tuple, list[int]] = {}
    for i, spec in enumerate(cells):
        problems = spec.validate()
        if problems:
            rows[i] = _grid_row(spec, None, "failed: " + "; ".join(problems))
            continue
        groups.setdefault(_run_key(spec), []).append(i)
    for members in groups.values():
        runs = _design_runs(cells[members[0]], workers=workers)
        for i in members:
            spec = cells[i]
            try:
                result = _aggregate_cell(
                    _cell_records(spec, runs), beta_t=spec.treatment_effect
                )
                rows[i] = _grid_row(spec, result, "ok")
            except EngineError as exc:
                rows[i] = _grid_row(spec, None, f"failed: {exc}")
        del runs
    return rows  # type: ignore[return-value]


def to_csv(rows: Sequence[dict]) -> str:
    """Render grid rows as CSV with stable column order and formatting."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(_CSV_COLUMNS)
    for row in rows:
        record = []
        for col in _CSV_COLUMNS:
            value = row.get(col)
            if value is None:
                record.append("")
            elif col in _CSV_REALS:
                record.append(f"{value:.6f}")
            else:
                record.append(str(value))
        writer.writerow(record)
    return buffer.getvalue()


@dataclass
class ReplayDataset:
    """A completed trial: covariates, historical 0/1 assignments, responses."""

    covariates: np.ndarray
    assignments: np.ndarray
    responses: np.ndarray

    def __post_init__(self):
        self.covariates = np.asarray(self.covariates, dtype=float)
        self.assignments = np.asarray(self.assignments, dtype=int)
        self.responses = np.asarray(self.responses, dtype=float)
        if self.covariates.ndim != 2:
            raise ValueError("covariates must be a 2-d array")
        n = self.covariates.shape[0]
        if self.assignments.shape != (n,) or self.responses.shape != (n,):
            raise ValueError("assignments and responses need one row per subject")
        if not np.isin(self.assignments, (0, 1)).all():
            raise ValueError("assignments must be 0/1")
        if not (
            np.all(np.isfinite(self.covariates))
            and np.all(np.isfinite(self.responses))
        ):
            raise ValueError("covariates and responses must be finite")

    def __len__(self) -> int:
        return self.covariates.shape[0]


def _replay_once(
    dataset: ReplayDataset, config: DesignConfig, order: np.ndarray, master_seed: int
) -> TrialState:
    """One replay pass over a permuted arrival order.

    Burn-in and below-threshold entrants keep their historical arm (the coin
    is forced) and join the reservoir. A matched entrant is retained only
    when the proposed arm — the opposite of its partner's — coincides with
    its historical one; otherwise the entrant is discarded and the reservoir
    is left untouched.
    """
    state = TrialState(config=config, master_seed=master_seed)
    for pos in order:
        pos = int(pos)
        historical = int(dataset.assignments[pos])
        state.subjects.append(
            SubjectRecord(
                entry_index=state.n_entered + 1,
                covariates=np.array(dataset.covariates[pos], dtype=float),
            )
        )
        decision = step(state, forced=historical)
        if decision.matched_with is not None and decision.assignment != historical:
            state.subjects.pop()
            continue
        apply_decision(state, decision)
        state.subjects[-1].response = float(dataset.responses[pos])
    return state


def retrospective_replay(
    dataset: ReplayDataset,
    config: DesignConfig,
    replications: int,
    seed: int = 0,
) -> dict:
    """Replay a design over permuted arrivals of a completed trial.

    Per replication: permute the arrival order, retain the subjects whose
    proposed arm agrees with their historical one (see _replay_once), and
    compute the combined estimator on the retained subset. The comparison
    benchmark is the design the original trial actually ran — plain
    randomization analyzed by the naive difference in means — evaluated at
    the same effective sample size: a uniform random subset of n_rep
    subjects with their historical arms. efficiency = var(benchmark naive) /
    var(combined) across replications; > 1 means the matched design+analysis
    beats plain randomization at equal n.

    The naive difference in means computed on the retained subjects
    themselves is also reported (naive_variance / efficiency_retained). It
    conflates the estimator comparison with the replay's structural noise —
    which pairs form varies across permutations while retained subjects
    largely recur — so it systematically understates the matched analysis
    and is kept for diagnostics only.
    """
    problems = config.validate()
    if problems:
        raise ValueError("; ".join(problems))
    n = len(dataset)
    if config.planned_n != n:
        raise ValueError(
            f"config.planned_n = {config.planned_n} but the dataset has {n} subjects"
        )
    if config.t0 > 0.8 * n:
        # replay needs a real post-burn-in matching phase to say anything
        raise ValueError("dataset too small for the burn-in: t0 exceeds 80% of n")
    if replications < 2:
        raise ValueError("need at least 2 replications to compare variances")

    y = dataset.responses
    w = dataset.assignments
    naive_estimates: list[float] = []
    benchmark_estimates: list[float] = []
    combined_estimates: list[float] = []
    n_reps: list[int] = []
    errors = 0
    example: Optional[TrialState] = None
    for k in range(replications):
        rep_seed = derive_seed(seed, "scenario", k)
        order = np.random.default_rng(
            derive_seed(rep_seed, "scenario", 1)
        ).permutation(n)
        state = _replay_once(
            dataset, config, order, derive_seed(rep_seed, "scenario", 2)
        )
        if example is None:
            example = state
        n_reps.append(state.n_entered)
        subset = np.random.default_rng(derive_seed(rep_seed, "scenario", 3)).choice(
            n, size=state.n_entered, replace=False
        )
        y_sub, w_sub = y[subset], w[subset]
        try:
            if not (w_sub == 1).any() or not (w_sub == 0).any():
                raise Inestimable("benchmark subset has a single arm")
            benchmark = float(y_sub[w_sub == 1].mean() - y_sub[w_sub == 0].mean())
            combined = combined_classic_estimate(state).estimate
            naive = classic_estimate(state).estimate
        except Inestimable:
            errors += 1
            continue
        combined_estimates.append(combined)
        benchmark_estimates.append(benchmark)
        naive_estimates.append(naive)

    if len(combined_estimates) < 2:
        raise EngineError("too few estimable replications to compare variances")
    naive_variance = float(np.var(naive_estimates, ddof=1))
    benchmark_variance = float(np.var(benchmark_estimates, ddof=1))
    combined_variance = float(np.var(combined_estimates, ddof=1))
    if combined_variance > 0:
        efficiency = benchmark_variance / combined_variance
        efficiency_retained = naive_variance / combined_variance
    else:
        efficiency = math.inf
        efficiency_retained = math.inf
    return {
        "efficiency": efficiency,
        "efficiency_retained": efficiency_retained,
        "benchmark_variance": benchmark_variance,
        "naive_variance": naive_variance,
        "combined_variance": combined_variance,
        "mean_n_rep": float(np.mean(n_reps)),
        "min_n_rep": int(min(n_reps)),
        "replications_used": len(combined_estimates),
        "errors": errors,
        "example_state": example,
    }


def make_synthetic_cohort(
    n: int = 224, seed: int = 0, response: str = "dominant"
) -> ReplayDataset:
    """Synthetic completed trial shaped like a mid-size clinical cohort.

    19 baseline covariates: column 0 is a dominant predictor on a discrete
    0-17 symptom scale, leading a six-column collinear block (five binary
    siblings share its latent factor, pairwise correlations ~0.49-0.59); the
    rest mix independent continuous measurements (including a
    location-shifted and a skewed one) with binary flags. The discrete scale
    gives the matching algorithm many exact ties to pair on, the way scored
    clinical instruments do. Responses carry R^2 ~ 0.24 against the full
    covariate set, almost all of it through column 0. response="noise" keeps
    the covariates but makes responses pure noise.
    """
    if response not in ("dominant", "noise"):
        raise ValueError(f"unknown response mode {response!r}")
    rng = np.random.default_rng(seed)
    factor = rng.standard_normal(n)
    load = math.sqrt(0.70)
    resid = math.sqrt(0.30)
    latent = load * factor + resid * rng.standard_normal(n)
    dominant = np.clip(np.round(8.5 + 3.2 * latent), 0.0, 17.0)
    dominant_std = (dominant - dominant.mean()) / dominant.std()
    siblings = (
        load * factor[:, None] + resid * rng.standard_normal((n, 5)) > 0.0
    ).astype(float)
    cont_a = rng.standard_normal((n, 3))
    age = 52.0 + 11.0 * rng.standard_normal(n)
    lab = np.exp(0.5 * rng.standard_normal(n))
    flags = (rng.random((n, 3)) < np.array([0.3, 0.45, 0.6])).astype(float)
    marker = (rng.random(n) < 0.5).astype(float)
    cont_b = rng.standard_normal((n, 4))
    X = np.column_stack(
        [dominant, siblings, cont_a, age, lab, flags, marker, cont_b]
    )
    # signal variance 1 + 0.3^2 + 0.4^2/4 = 1.13; sigma targets R^2 = 0.24
    sigma = math.sqrt(1.13 / 0.24 - 1.13)
    noise = sigma * rng.standard_normal(n)
    if response == "dominant":
        y = dominant_std + 0.3 * cont_a[:, 0] + 0.4 * marker + noise
    else:
        y = noise
    assignments = rng.integers(0, 2, size=n)
    return ReplayDataset(covariates=X, assignments=assignments, responses=y)
