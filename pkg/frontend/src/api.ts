/** Thin fetch client for the trial service's five JSON routes.
 *
 * Service errors carry their explanation in the JSON `detail` field; this
 * client surfaces that text verbatim so the UI can show exactly what the
 * service said.
 */

import type {
  AnalysisResult,
  CreatedTrial,
  EnrollResult,
  TrialStateView,
} from "./model.js";

export class ServiceRequestError extends Error {
  readonly status: number;

  constructor(status: number, detail: string) {
    super(detail);
    this.name = "ServiceRequestError";
    this.status = status;
  }
}

async function request<T>(
  baseUrl: string,
  path: string,
  init?: RequestInit,
): Promise<T> {
  const res = await fetch(baseUrl + path, {
    headers: { "content-type": "application/json" },
    ...init,
  });
  const text = await res.text();
  let body: unknown = null;
  try {
    body = text ? JSON.parse(text) : null;
  } catch {
    body = null;
  }
  if (!res.ok) {
    const detail =
      body && typeof body === "object" && "detail" in body
        ? String((body as { detail: unknown }).detail)
        : text || `HTTP ${res.status}`;
    throw new ServiceRequestError(res.status, detail);
  }
  return body as T;
}

export interface CreateTrialRequest {
  design_kind: string;
  planned_n: number;
  t0?: number;
  lam?: number;
  master_seed?: number;
  covariate_names: string[];
}

export class TrialServiceClient {
  constructor(readonly baseUrl: string = "") {}

  createTrial(req: CreateTrialRequest): Promise<CreatedTrial> {
    const { covariate_names, master_seed, ...config } = req;
    return request<CreatedTrial>(this.baseUrl, "/trials", {
      method: "POST",
      body: JSON.stringify({
        config,
        covariate_names,
        master_seed: master_seed ?? 0,
      }),
    });
  }

  enroll(trialId: string, covariates: number[]): Promise<EnrollResult> {
    return request<EnrollResult>(
      this.baseUrl,
      `/trials/${trialId}/subjects`,
      { method: "POST", body: JSON.stringify({ covariates }) },
    );
  }

  recordResponse(
    trialId: string,
    entryIndex: number,
    response: number,
  ): Promise<{ entry_index: number; n_responses: number }> {
    return request(this.baseUrl, `/trials/${trialId}/responses`, {
      method: "POST",
      body: JSON.stringify({ entry_index: entryIndex, response }),
    });
  }

  getState(trialId: string): Promise<TrialStateView> {
    return request<TrialStateView>(
      this.baseUrl,
      `/trials/${trialId}/state`,
    );
  }

  analyze(
    trialId: string,
    estimatorKind: string,
    testKind: string,
    options: { beta0?: number; level?: number; n_draws?: number } = {},
  ): Promise<AnalysisResult> {
    return request<AnalysisResult>(
      this.baseUrl,
      `/trials/${trialId}/analyze`,
      {
        method: "POST",
        body: JSON.stringify({
          estimator_kind: estimatorKind,
          test_kind: testKind,
          ...options,
        }),
      },
    );
  }
}
