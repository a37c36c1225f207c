"""Sequential allocation designs.

Three classical designs (bernoulli, Efron's biased coin, marginal-imbalance
minimization) and three matching designs (kk14, cara_naive, cara_stepwise)
share one step interface: the state's last subject is the pending entrant,
a step function returns an AllocationDecision, and `apply_decision` commits
it to the state.

Matching designs work as follows. The first t0 entrants, and any entrant who
finds the reservoir empty, are randomized by a fair coin into the reservoir.
Every later entrant is compared against all reservoir subjects: kk14 uses the
scaled Mahalanobis distance with an F(p, t-p) quantile threshold, the CARA
variants use the covariate-weighted distance with weights re-estimated from
accrued responses and a bootstrap pair-quantile threshold. If the nearest
reservoir subject is at or below the threshold, the entrant takes the
opposite arm and the two leave as a matched pair; otherwise the entrant is
randomized into the reservoir.

Every random draw (coins, bootstrap pairs, tie-breaks) consumes a stream
derived from (master_seed, purpose, entry_index). None of those streams see
the realized assignments, so the match/reservoir structure is a function of
covariates and responses alone. The conditional randomization test in
`inference` relies on exactly that.
"""

from __future__ import annotations

import functools
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    MATCHING_KINDS,
    AllocationDecision,
    DegenerateCovariance,
    DesignConfig,
    InsufficientHistory,
    MatchPair,
    SubjectRecord,
    TrialState,
    derive_seed,
)
from .matching import (
    bootstrap_threshold,
    f_quantile_threshold,
    mahalanobis_distances,
)
from .weighting import HistoryView, naive_weights, standardize_columns, stepwise_weights


@functools.lru_cache(maxsize=None)
def _f_threshold(lam: float, p: int, t: int) -> float:
    return f_quantile_threshold(lam, p, t)


def _pending_entry(state: TrialState) -> SubjectRecord:
    if not state.subjects:
        raise ValueError("state has no subjects")
    entrant = state.subjects[-1]
    if entrant.assignment is not None:
        raise ValueError("last subject is already assigned; no pending entrant")
    return entrant


def _coin_assignment(state: TrialState, t: int, p_treat: float,
                     forced: Optional[int]) -> int:
    if forced is not None:
        return int(forced)
    u = np.random.default_rng(derive_seed(state.master_seed, "alloc-coin", t)).random()
    return 1 if u < p_treat else 0


def efron_treat_probability(n_treat: int, n_control: int, coin_bias: float) -> float:
    """Biased-coin rule: favor the lagging arm with probability coin_bias."""
    if n_treat == n_control:
        return 0.5
    return coin_bias if n_treat < n_control else 1.0 - coin_bias


def bernoulli_step(state: TrialState, forced: Optional[int] = None) -> AllocationDecision:
    entrant = _pending_entry(state)
    w = _coin_assignment(state, entrant.entry_index, 0.5, forced)
    return AllocationDecision(entry_index=entrant.entry_index, assignment=w)


def biased_coin_step(state: TrialState, forced: Optional[int] = None) -> AllocationDecision:
    entrant = _pending_entry(state)
    w_prev = state.assignments()[:-1]
    p_treat = efron_treat_probability(
        int(np.sum(w_prev == 1)), int(np.sum(w_prev == 0)), state.config.coin_bias
    )
    w = _coin_assignment(state, entrant.entry_index, p_treat, forced)
    return AllocationDecision(entry_index=entrant.entry_index, assignment=w)


def _bin_indices(column: np.ndarray, bins: int) -> np.ndarray:
    # equal-frequency boundaries over everything seen so far; a value equal
    # to a boundary falls in the lower bin
    boundaries = np.quantile(column, [k / bins for k in range(1, bins)])
    return np.searchsorted(boundaries, column, side="left")


def minimization_step(
    state: TrialState, bins_per_covariate: int = 2, forced: Optional[int] = None
) -> AllocationDecision:
    """Marginal-imbalance minimization with a biased coin.

    Covariates are discretized into equal-frequency bins over the subjects
    seen so far. For each hypothetical arm the score sums, over covariates,
    |n_T - n_C| among assigned subjects sharing the entrant's bin, counting
    the entrant itself. The lower-scoring arm is preferred with probability
    coin_bias; ties fall back to a fair coin.
    """
    if bins_per_covariate < 2:
        raise ValueError("bins_per_covariate must be >= 2")
    entrant = _pending_entry(state)
    t = entrant.entry_index
    w_prev = state.assignments()[:-1]
    assigned = w_prev >= 0
    if not assigned.any():
        p_treat = 0.5
    else:
        X = state.covariate_matrix()
        score = {1: 0, 0: 0}
        for j in range(X.shape[1]):
            bins_j = _bin_indices(X[:, j], bins_per_covariate)
            in_bin = (bins_j[:-1] == bins_j[-1]) & assigned
            n_t = int(np.sum(in_bin & (w_prev == 1)))
            n_c = int(np.sum(in_bin & (w_prev == 0)))
            score[1] += abs(n_t + 1 - n_c)
            score[0] += abs(n_t - (n_c + 1))
        if score[1] < score[0]:
            p_treat = state.config.coin_bias
        elif score[1] > score[0]:
            p_treat = 1.0 - state.config.coin_bias
        else:
            p_treat = 0.5
    w = _coin_assignment(state, t, p_treat, forced)
    return AllocationDecision(entry_index=t, assignment=w)


def _alpha_from_subjects(subjects, variant: str, p: int) -> np.ndarray:
    """Covariate weights from responded history; equal weights when thin.

    treatment_adjust stays off here: allocation-time weights must not read
    the realized assignments, or the match structure would stop being
    invariant across assignment draws.
    """
    rows = [
        s for s in subjects
        if s.assignment is not None and s.response is not None
    ]
    equal = np.full(p, 1.0 / p)
    if not rows:
        return equal
    history = HistoryView(
        X=np.array([s.covariates for s in rows], dtype=float),
        y=np.array([s.response for s in rows], dtype=float),
        w=np.array([s.assignment for s in rows], dtype=np.int64),
    )
    estimator = stepwise_weights if variant == "cara_stepwise" else naive_weights
    try:
        return estimator(history, treatment_adjust=False)
    except InsufficientHistory:
        return equal


def covariate_weights(state: TrialState, p: Optional[int] = None) -> Optional[list[float]]:
    """Weights the design would use for the next entrant, or None.

    Only the weighted matching designs carry covariate weights; for every
    other design kind this returns None. All currently enrolled subjects
    with recorded responses count as history, exactly as a new arrival
    would see them. Uniform weights until enough responses accumulate.
    """
    variant = state.config.design_kind
    if variant not in ("cara_naive", "cara_stepwise"):
        return None
    if p is None:
        p = state.p
    if p is None:
        return None
    alpha = _alpha_from_subjects(state.subjects, variant, p)
    return [float(a) for a in alpha]


def _randomized_decision(state: TrialState, t: int, forced: Optional[int],
                         **diagnostics) -> AllocationDecision:
    w = _coin_assignment(state, t, 0.5, forced)
    return AllocationDecision(entry_index=t, assignment=w, randomized=True,
                              **diagnostics)


def matching_step(
    state: TrialState, variant: Optional[str] = None, forced: Optional[int] = None
) -> AllocationDecision:
    variant = variant or state.config.design_kind
    if variant not in MATCHING_KINDS:
        raise ValueError(f"not a matching design: {variant!r}")
    entrant = _pending_entry(state)
    t = entrant.entry_index
    cfg = state.config
    if t <= cfg.t0 or not state.reservoir:
        return _randomized_decision(state, t, forced)

    X = state.covariate_matrix()
    p = X.shape[1]
    res_idx = np.asarray(state.reservoir, dtype=np.int64)
    alpha_list: Optional[list[float]] = None
    try:
        if variant == "kk14":
            if t <= p:
                # F(p, t-p) threshold undefined this early
                return _randomized_decision(state, t, forced)
            dists = mahalanobis_distances(X[-1], X[res_idx - 1], X)
            threshold = _f_threshold(cfg.lam, p, t)
        else:
            alpha = _alpha_from_subjects(state.subjects[:-1], variant, p)
            alpha_list = [float(a) for a in alpha]
            Z, _, _, _ = standardize_columns(X)
            diffs = Z[res_idx - 1] - Z[-1]
            dists = (diffs * diffs) @ alpha
            threshold = bootstrap_threshold(
                Z, alpha, cfg.lam, cfg.bootstrap_resamples,
                seed=derive_seed(state.master_seed, "boot-pairs", t),
            )
    except DegenerateCovariance:
        return _randomized_decision(state, t, forced)

    d_min = float(dists.min())
    ties = np.flatnonzero(dists == d_min)
    if ties.size > 1:
        rng = np.random.default_rng(derive_seed(state.master_seed, "tiebreak", t))
        pick = ties[int(rng.integers(ties.size))]
    else:
        pick = ties[0]
    partner = int(res_idx[pick])

    if d_min <= threshold:
        partner_arm = state.subjects[partner - 1].assignment
        return AllocationDecision(
            entry_index=t,
            assignment=1 - partner_arm,
            matched_with=partner,
            randomized=False,
            weights_used=alpha_list,
            threshold_used=float(threshold),
            min_distance=d_min,
        )
    return _randomized_decision(
        state, t, forced,
        weights_used=alpha_list,
        threshold_used=float(threshold),
        min_distance=d_min,
    )


_STEPPERS: dict[str, Callable] = {
    "bernoulli": bernoulli_step,
    "biased_coin": biased_coin_step,
    "minimization": minimization_step,
    "kk14": matching_step,
    "cara_naive": matching_step,
    "cara_stepwise": matching_step,
}


def step(state: TrialState, forced: Optional[int] = None) -> AllocationDecision:
    """Dispatch one allocation step for the pending entrant."""
    kind = state.config.design_kind
    stepper = _STEPPERS.get(kind)
    if stepper is None:
        raise ValueError(f"unknown design_kind {kind!r}")
    if kind == "minimization":
        return minimization_step(state, forced=forced)
    if kind in MATCHING_KINDS:
        return matching_step(state, variant=kind, forced=forced)
    return stepper(state, forced=forced)


def apply_decision(state: TrialState, decision: AllocationDecision) -> None:
    subject = state.subjects[decision.entry_index - 1]
    if subject.assignment is not None:
        raise ValueError(f"subject {decision.entry_index} already assigned")
    subject.assignment = int(decision.assignment)
    if decision.matched_with is None:
        state.reservoir.append(decision.entry_index)
    else:
        state.reservoir.remove(decision.matched_with)
        state.matches.append(
            MatchPair(first_index=decision.matched_with,
                      second_index=decision.entry_index)
        )


def advance(
    state: TrialState,
    covariates: np.ndarray,
    forced: Optional[int] = None,
    decision_sink: Optional[list] = None,
) -> AllocationDecision:
    """Enroll one subject: append, decide, commit."""
    covariates = np.asarray(covariates, dtype=float).reshape(-1)
    if not np.all(np.isfinite(covariates)):
        raise ValueError("covariates must be finite")
    if state.subjects and covariates.shape[0] != state.p:
        raise ValueError(
            f"expected {state.p} covariates, got {covariates.shape[0]}"
        )
    state.subjects.append(
        SubjectRecord(entry_index=state.n_entered + 1, covariates=covariates)
    )
    decision = step(state, forced=forced)
    apply_decision(state, decision)
    if decision_sink is not None:
        decision_sink.append(decision)
    return decision


def run_design(
    covariate_stream: Sequence[np.ndarray],
    response_oracle: Optional[Callable[[int, int], Optional[float]]],
    config: DesignConfig,
    master_seed: int,
    forced_assignments: Optional[Sequence[int]] = None,
    decision_sink: Optional[list] = None,
) -> TrialState:
    """Run a full trial over a covariate stream.

    response_oracle(entry_index, assignment) is called right after each
    allocation; returning None leaves the response unrecorded. Passing
    forced_assignments overrides every coin flip (matched entrants still take
    the arm opposite their partner), which is how assignment-invariance of
    the structure is exercised.
    """
    problems = config.validate()
    if problems:
        raise ValueError("; ".join(problems))
    stream = [np.asarray(x, dtype=float).reshape(-1) for x in covariate_stream]
    if forced_assignments is not None and len(forced_assignments) < len(stream):
        raise ValueError("forced_assignments shorter than the covariate stream")
    state = TrialState(config=config, master_seed=master_seed)
    for t, x in enumerate(stream, start=1):
        forced = None if forced_assignments is None else forced_assignments[t - 1]
        decision = advance(state, x, forced=forced, decision_sink=decision_sink)
        if response_oracle is not None:
            y = response_oracle(t, decision.assignment)
            if y is not None:
                state.subjects[-1].response = float(y)
    return state
