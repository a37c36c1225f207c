/** JSON payload types of the trial service, plus pure view-model helpers.
 *
 * The console holds no authoritative state: everything rendered about a
 * trial is derived from the latest GET /trials/{id}/state payload. The
 * helpers in this file are pure functions over those payloads so that the
 * browser app and the tests share one derivation path.
 */

export interface DesignConfig {
  design_kind: string;
  planned_n: number;
  t0: number;
  lam: number;
  bootstrap_resamples: number;
  coin_bias: number;
}

export interface SubjectView {
  entry_index: number;
  covariates: number[];
  assignment: number | null;
  response: number | null;
  matched_with: number | null;
}

export interface MatchPair {
  first_index: number;
  second_index: number;
}

export interface AllocationView {
  entry_index: number;
  assignment: number;
  matched_with: number | null;
  randomized: boolean;
  weights_used: number[] | null;
  threshold_used: number | null;
  min_distance: number | null;
}

export interface TrialStateView {
  trial_id: string;
  schema_version: number;
  config: DesignConfig;
  covariate_names: string[];
  master_seed: number;
  planned_n: number;
  t0: number;
  n_entered: number;
  closed: boolean;
  n_responses: number;
  arm_counts: { treatment: number; control: number };
  reservoir: number[];
  matches: MatchPair[];
  subjects: SubjectView[];
  covariate_weights: number[] | null;
  allocations: AllocationView[];
  n_events: number;
  n_analyses: number;
}

export interface CreatedTrial {
  trial_id: string;
  planned_n: number;
  t0: number;
  n_entered: number;
  covariate_names: string[];
}

export interface EnrollResult extends AllocationView {
  n_entered: number;
  closed: boolean;
}

export interface EstimateReport {
  estimator_kind: string;
  estimate: number;
  variance_estimate: number;
  components: Record<string, unknown>;
  fallback_used: string;
  df: number | null;
  notes: string[];
}

export interface TestReport {
  test_kind: string;
  p_value: number;
  level: number;
  beta0: number;
  statistic: number | null;
  interval: [number, number] | null;
  interval_unbounded: [boolean, boolean];
  n_draws: number | null;
  notes: string[];
}

export interface AnalysisResult {
  analysis_index: number;
  n_subjects: number;
  estimate: EstimateReport;
  test: TestReport;
}

/** The four inferential settings exposed by the analysis panel. */
export const ESTIMATOR_CHOICES = ["combined_classic", "combined_ols"] as const;
export const TEST_CHOICES = ["wald", "randomization"] as const;

export type EstimatorChoice = (typeof ESTIMATOR_CHOICES)[number];
export type TestChoice = (typeof TEST_CHOICES)[number];

export function analysisKey(estimator: string, test: string): string {
  return `${estimator}/${test}`;
}

/** One point of the weight-evolution series: weights in force at entry t. */
export interface WeightPoint {
  entry_index: number;
  weights: number[];
}

/**
 * Weight series for the chart, one point per allocation that carried
 * covariate weights, ending with the weights the design would use for the
 * next entrant (so the chart moves as responses come in, not only on
 * allocations). Burn-in allocations carry no weights and contribute the
 * uniform vector, which is exactly what the design uses there.
 */
export function weightSeries(state: TrialStateView): WeightPoint[] {
  const p = state.covariate_names.length;
  const uniform = new Array(p).fill(1 / p);
  const points: WeightPoint[] = [];
  for (const a of state.allocations) {
    points.push({
      entry_index: a.entry_index,
      weights: a.weights_used ?? uniform,
    });
  }
  if (state.covariate_weights) {
    points.push({
      entry_index: state.n_entered + 1,
      weights: state.covariate_weights,
    });
  }
  return points;
}

/** Subjects that have an assignment but no recorded response yet. */
export function awaitingResponse(state: TrialStateView): SubjectView[] {
  return state.subjects.filter(
    (s) => s.assignment !== null && s.response === null,
  );
}

/** Index of the heaviest covariate, or -1 when there are no weights. */
export function dominantCovariate(weights: number[] | null): number {
  if (!weights || weights.length === 0) return -1;
  let best = 0;
  for (let j = 1; j < weights.length; j += 1) {
    if (weights[j] > weights[best]) best = j;
  }
  return best;
}

export function formatNumber(x: number | null | undefined, digits = 4): string {
  if (x === null || x === undefined || Number.isNaN(x)) return "—";
  if (!Number.isFinite(x)) return x > 0 ? "∞" : "−∞";
  return x.toFixed(digits);
}
