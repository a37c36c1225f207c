/** Trial coordinator console.
 *
 * A single-page client of the trial service's five JSON routes. The page
 * never holds authoritative trial state: every roster, counter, and chart
 * is re-derived from GET /trials/{id}/state, polled once per second (plus
 * an immediate refresh after each successful mutation). The only local
 * state is form input, the latest allocation decision (for the badge), and
 * analysis results, which the service reports per request.
 */

import { ServiceRequestError, TrialServiceClient } from "./api.js";
import { WeightChart } from "./chart.js";
import type {
  AnalysisResult,
  EnrollResult,
  TrialStateView,
} from "./model.js";
import {
  ESTIMATOR_CHOICES,
  TEST_CHOICES,
  analysisKey,
  awaitingResponse,
  formatNumber,
  weightSeries,
} from "./model.js";

const POLL_INTERVAL_MS = 1000;

type Attrs = Record<string, string | boolean | undefined>;

function h<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Attrs = {},
  ...children: (Node | string)[]
): HTMLElementTagNameMap[K] {
  const el = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    if (value === undefined || value === false) continue;
    if (key === "className") el.className = String(value);
    else if (value === true) el.setAttribute(key, "");
    else el.setAttribute(key, value);
  }
  el.append(...children);
  return el;
}

function card(title: string, testid: string, ...children: (Node | string)[]) {
  return h(
    "section",
    { className: "card", "data-testid": testid },
    h("h2", {}, title),
    ...children,
  );
}

export interface AppHandle {
  client: TrialServiceClient;
  root: HTMLElement;
  getTrialId(): string | null;
  getState(): TrialStateView | null;
  refreshNow(): Promise<void>;
  stop(): void;
}

export function mountApp(root: HTMLElement, baseUrl = ""): AppHandle {
  const client = new TrialServiceClient(baseUrl);
  let trialId: string | null = null;
  let lastState: TrialStateView | null = null;
  let covariateNames: string[] = [];
  let pollTimer: ReturnType<typeof setInterval> | null = null;
  const analysisResults = new Map<string, AnalysisResult>();

  root.innerHTML = "";
  root.append(
    h(
      "header",
      { className: "masthead" },
      h("h1", {}, "Sequential trial console"),
      h("div", { className: "status-strip", "data-testid": "status-strip" }),
      h("div", { className: "errorbar", "data-testid": "error-bar" }),
    ),
  );
  const statusStrip = root.querySelector<HTMLElement>(".status-strip")!;
  const errorBar = root.querySelector<HTMLElement>(".errorbar")!;

  function showError(err: unknown): void {
    const msg =
      err instanceof ServiceRequestError
        ? `service: ${err.message}`
        : err instanceof Error
          ? err.message
          : String(err);
    errorBar.textContent = msg;
    errorBar.style.display = "block";
  }

  function clearError(): void {
    errorBar.textContent = "";
    errorBar.style.display = "none";
  }
  clearError();

  // ---------------------------------------------------------------- setup
  const designSelect = h("select", { "data-testid": "setup-design" });
  for (const kind of [
    "cara_stepwise",
    "cara_naive",
    "kk14",
    "bernoulli",
    "biased_coin",
    "minimization",
  ]) {
    designSelect.append(h("option", { value: kind }, kind));
  }
  const plannedInput = h("input", {
    value: "50",
    size: "5",
    "data-testid": "setup-planned-n",
  });
  const seedInput = h("input", {
    value: "0",
    size: "8",
    "data-testid": "setup-seed",
  });
  const namesInput = h("input", {
    value: "severity, age, marker",
    size: "40",
    "data-testid": "setup-covariate-names",
  });
  const setupMessage = h("p", {
    className: "inline-error",
    "data-testid": "setup-error",
  });
  const setupForm = h(
    "form",
    { "data-testid": "setup-form" },
    h("label", {}, "design ", designSelect),
    h("label", {}, "planned subjects ", plannedInput),
    h("label", {}, "master seed ", seedInput),
    h("label", {}, "covariates (comma-separated) ", namesInput),
    h("button", { type: "submit" }, "Create trial"),
    setupMessage,
  );
  const setupCard = card("New trial", "setup-card", setupForm);

  // --------------------------------------------------------------- enroll
  const enrollFields = h("div", { className: "field-row" });
  const enrollMessage = h("p", {
    className: "inline-error",
    "data-testid": "enroll-error",
  });
  const enrollButton = h(
    "button",
    { type: "submit", "data-testid": "enroll-submit" },
    "Enroll & allocate",
  );
  const enrollForm = h(
    "form",
    { "data-testid": "enroll-form" },
    enrollFields,
    enrollButton,
    enrollMessage,
  );
  const badge = h("div", {
    className: "allocation-badge",
    "data-testid": "allocation-badge",
  });
  const enrollCard = card(
    "Enroll next subject",
    "enroll-card",
    enrollForm,
    badge,
  );

  // ------------------------------------------------------------ responses
  const responseEntry = h("select", { "data-testid": "response-entry" });
  const responseValue = h("input", {
    size: "10",
    "data-testid": "response-value",
  });
  const responseMessage = h("p", {
    className: "inline-error",
    "data-testid": "response-error",
  });
  const responseForm = h(
    "form",
    { "data-testid": "response-form" },
    h("label", {}, "subject ", responseEntry),
    h("label", {}, "response ", responseValue),
    h("button", { type: "submit" }, "Record response"),
    responseMessage,
  );
  const responseCard = card("Record response", "response-card", responseForm);

  // -------------------------------------------------------------- rosters
  const reservoirList = h("div", { "data-testid": "reservoir-roster" });
  const matchList = h("div", { "data-testid": "match-list" });
  const historyTable = h("div", { "data-testid": "allocation-history" });
  const rosterCard = card(
    "Reservoir, matches, history",
    "roster-card",
    h("h3", {}, "Reservoir"),
    reservoirList,
    h("h3", {}, "Matched pairs"),
    matchList,
    h("h3", {}, "Allocation history"),
    historyTable,
  );

  // ---------------------------------------------------------------- chart
  const chartCard = card("Covariate weights", "chart-card");
  const chart = new WeightChart(chartCard);

  // ------------------------------------------------------------- analysis
  const estimatorChoice = h("div", { className: "choice-row" });
  for (const est of ESTIMATOR_CHOICES) {
    estimatorChoice.append(
      h(
        "label",
        {},
        h("input", {
          type: "radio",
          name: "estimator",
          value: est,
          "data-testid": `analysis-estimator-${est}`,
          ...(est === ESTIMATOR_CHOICES[0] ? { checked: true } : {}),
        }),
        ` ${est}`,
      ),
    );
  }
  const testChoice = h("div", { className: "choice-row" });
  for (const t of TEST_CHOICES) {
    testChoice.append(
      h(
        "label",
        {},
        h("input", {
          type: "radio",
          name: "test",
          value: t,
          "data-testid": `analysis-test-${t}`,
          ...(t === TEST_CHOICES[0] ? { checked: true } : {}),
        }),
        ` ${t}`,
      ),
    );
  }
  const analysisButton = h(
    "button",
    { type: "submit", "data-testid": "analysis-run" },
    "Run analysis",
  );
  const analysisForm = h(
    "form",
    { "data-testid": "analysis-form" },
    h("fieldset", {}, h("legend", {}, "estimator"), estimatorChoice),
    h("fieldset", {}, h("legend", {}, "test"), testChoice),
    analysisButton,
  );
  const analysisGrid = h("div", {
    className: "analysis-grid",
    "data-testid": "analysis-grid",
  });
  const analysisCard = card(
    "Analysis",
    "analysis-card",
    analysisForm,
    analysisGrid,
  );

  const main = h(
    "main",
    {},
    setupCard,
    enrollCard,
    responseCard,
    rosterCard,
    chartCard,
    analysisCard,
  );
  root.append(main);

  for (const el of [enrollCard, responseCard, rosterCard, chartCard, analysisCard]) {
    el.style.display = "none";
  }

  // ------------------------------------------------------------ rendering

  function renderStatus(state: TrialStateView): void {
    statusStrip.textContent =
      `trial ${state.trial_id} · ${state.config.design_kind} · ` +
      `enrolled ${state.n_entered}/${state.planned_n}` +
      `${state.closed ? " (complete)" : ""} · burn-in through ${state.t0} · ` +
      `T ${state.arm_counts.treatment} / C ${state.arm_counts.control} · ` +
      `reservoir ${state.reservoir.length} · pairs ${state.matches.length} · ` +
      `responses ${state.n_responses}`;
  }

  function covariateLine(values: number[]): string {
    return values
      .map((v, j) => `${covariateNames[j] ?? `x${j + 1}`}=${formatNumber(v, 2)}`)
      .join(", ");
  }

  function renderRosters(state: TrialStateView): void {
    reservoirList.innerHTML = "";
    if (state.reservoir.length === 0) {
      reservoirList.append(h("p", { className: "placeholder" }, "empty"));
    } else {
      const ul = h("ul", {});
      for (const idx of state.reservoir) {
        const s = state.subjects[idx - 1];
        ul.append(
          h(
            "li",
            { id: `subject-${idx}`, "data-testid": `reservoir-${idx}` },
            `#${idx} — ${s.assignment === 1 ? "T" : "C"} — ${covariateLine(
              s.covariates,
            )}${s.response === null ? " — awaiting response" : ""}`,
          ),
        );
      }
      reservoirList.append(ul);
    }

    matchList.innerHTML = "";
    if (state.matches.length === 0) {
      matchList.append(h("p", { className: "placeholder" }, "no pairs yet"));
    } else {
      const ul = h("ul", {});
      for (const m of state.matches) {
        const li = h(
          "li",
          { "data-testid": `match-${m.second_index}` },
          h(
            "a",
            { href: `#subject-${m.first_index}` },
            `#${m.first_index}`,
          ),
          " ↔ ",
          h(
            "a",
            { href: `#subject-${m.second_index}` },
            `#${m.second_index}`,
          ),
        );
        ul.append(li);
      }
      matchList.append(ul);
    }

    historyTable.innerHTML = "";
    if (state.allocations.length === 0) {
      historyTable.append(
        h("p", { className: "placeholder" }, "no allocations yet"),
      );
      return;
    }
    const table = h(
      "table",
      {},
      h(
        "thead",
        {},
        h(
          "tr",
          {},
          ...["entry", "arm", "matched with", "min distance", "threshold", "via"].map(
            (t) => h("th", {}, t),
          ),
        ),
      ),
    );
    const tbody = h("tbody", {});
    for (const a of [...state.allocations].reverse()) {
      tbody.append(
        h(
          "tr",
          { "data-testid": `allocation-row-${a.entry_index}` },
          h("td", {}, `#${a.entry_index}`),
          h("td", {}, a.assignment === 1 ? "T" : "C"),
          h("td", {}, a.matched_with === null ? "—" : `#${a.matched_with}`),
          h("td", {}, formatNumber(a.min_distance, 3)),
          h("td", {}, formatNumber(a.threshold_used, 3)),
          h("td", {}, a.matched_with !== null ? "match" : a.randomized ? "coin" : "rule"),
        ),
      );
    }
    table.append(tbody);
    historyTable.append(table);
  }

  function renderResponseChoices(state: TrialStateView): void {
    const open = awaitingResponse(state);
    const current = responseEntry.value;
    responseEntry.innerHTML = "";
    for (const s of open) {
      responseEntry.append(
        h("option", { value: String(s.entry_index) }, `#${s.entry_index}`),
      );
    }
    if (open.some((s) => String(s.entry_index) === current)) {
      responseEntry.value = current;
    }
    responseForm
      .querySelectorAll("button, select, input")
      .forEach((el) => ((el as HTMLButtonElement).disabled = open.length === 0));
  }

  function renderAnalyses(): void {
    analysisGrid.innerHTML = "";
    for (const est of ESTIMATOR_CHOICES) {
      for (const t of TEST_CHOICES) {
        const key = analysisKey(est, t);
        const result = analysisResults.get(key);
        const cell = h("div", {
          className: "analysis-cell",
          "data-testid": `analysis-result-${est}-${t}`,
        });
        cell.append(h("h4", {}, key));
        if (!result) {
          cell.append(h("p", { className: "placeholder" }, "not run"));
        } else {
          const { estimate, test } = result;
          const lines = [
            `estimate ${formatNumber(estimate.estimate)} (variance ${formatNumber(
              estimate.variance_estimate,
            )})`,
            `p = ${formatNumber(test.p_value)}`,
          ];
          if (test.interval) {
            lines.push(
              `${Math.round(test.level * 100)}% interval [${formatNumber(
                test.interval[0],
                3,
              )}, ${formatNumber(test.interval[1], 3)}]`,
            );
          }
          if (test.n_draws) lines.push(`${test.n_draws} null draws`);
          if (estimate.fallback_used !== "none") {
            lines.push(`fallback: ${estimate.fallback_used}`);
          }
          lines.push(`on ${result.n_subjects} subjects`);
          for (const line of lines) cell.append(h("p", {}, line));
        }
        analysisGrid.append(cell);
      }
    }
  }

  function renderBadge(result: EnrollResult): void {
    badge.innerHTML = "";
    badge.append(
      h(
        "span",
        {
          className: `arm arm-${result.assignment === 1 ? "t" : "c"}`,
          "data-testid": "badge-arm",
        },
        result.assignment === 1 ? "T" : "C",
      ),
    );
    const detail =
      result.matched_with !== null
        ? `entry #${result.entry_index}: matched with #${result.matched_with}` +
          ` — distance ${formatNumber(result.min_distance, 3)} ≤ threshold ${formatNumber(
            result.threshold_used,
            3,
          )}`
        : result.min_distance !== null
          ? `entry #${result.entry_index}: into reservoir by coin — min distance ${formatNumber(
              result.min_distance,
              3,
            )} > threshold ${formatNumber(result.threshold_used, 3)}`
          : `entry #${result.entry_index}: into reservoir by coin`;
    badge.append(h("span", { "data-testid": "badge-detail" }, detail));
  }

  function render(state: TrialStateView): void {
    lastState = state;
    renderStatus(state);
    renderRosters(state);
    renderResponseChoices(state);
    chart.update(weightSeries(state), state.covariate_names);
    enrollButton.disabled = state.closed;
    enrollForm
      .querySelectorAll("input")
      .forEach((el) => (el.disabled = state.closed));
  }

  async function refreshNow(): Promise<void> {
    if (!trialId) return;
    try {
      render(await client.getState(trialId));
    } catch (err) {
      showError(err);
    }
  }

  function startPolling(): void {
    if (pollTimer !== null) return;
    pollTimer = setInterval(() => {
      void refreshNow();
    }, POLL_INTERVAL_MS);
  }

  // ------------------------------------------------------------- handlers

  setupForm.addEventListener("submit", (ev) => {
    ev.preventDefault();
    setupMessage.textContent = "";
    const names = namesInput.value
      .split(",")
      .map((s) => s.trim())
      .filter((s) => s.length > 0);
    const plannedN = Number(plannedInput.value);
    const seed = Number(seedInput.value);
    if (names.length === 0) {
      setupMessage.textContent = "need at least one covariate name";
      return;
    }
    if (new Set(names).size !== names.length) {
      setupMessage.textContent = "covariate names must be distinct";
      return;
    }
    if (!Number.isInteger(plannedN) || plannedN < 2) {
      setupMessage.textContent = "planned subjects must be an integer ≥ 2";
      return;
    }
    if (!Number.isInteger(seed)) {
      setupMessage.textContent = "master seed must be an integer";
      return;
    }
    void (async () => {
      try {
        const created = await client.createTrial({
          design_kind: designSelect.value,
          planned_n: plannedN,
          master_seed: seed,
          covariate_names: names,
        });
        clearError();
        trialId = created.trial_id;
        covariateNames = created.covariate_names;
        enrollFields.innerHTML = "";
        for (const name of covariateNames) {
          enrollFields.append(
            h(
              "label",
              {},
              `${name} `,
              h("input", {
                size: "8",
                inputmode: "decimal",
                "data-testid": `covariate-input-${name}`,
              }),
            ),
          );
        }
        setupForm
          .querySelectorAll("button, input, select")
          .forEach((el) => ((el as HTMLInputElement).disabled = true));
        for (const el of [enrollCard, responseCard, rosterCard, chartCard, analysisCard]) {
          el.style.display = "";
        }
        await refreshNow();
        startPolling();
      } catch (err) {
        showError(err);
      }
    })();
  });

  enrollForm.addEventListener("submit", (ev) => {
    ev.preventDefault();
    if (!trialId) return;
    enrollMessage.textContent = "";
    const inputs = [...enrollFields.querySelectorAll("input")];
    const values: number[] = [];
    for (const input of inputs) {
      const value = Number(input.value.trim());
      const bad = input.value.trim() === "" || !Number.isFinite(value);
      input.classList.toggle("invalid", bad);
      if (bad) {
        enrollMessage.textContent =
          "every covariate needs a numeric value — nothing was sent";
        return;
      }
      values.push(value);
    }
    void (async () => {
      try {
        const result = await client.enroll(trialId!, values);
        clearError();
        renderBadge(result);
        for (const input of inputs) input.value = "";
        await refreshNow();
      } catch (err) {
        showError(err);
      }
    })();
  });

  responseForm.addEventListener("submit", (ev) => {
    ev.preventDefault();
    if (!trialId) return;
    responseMessage.textContent = "";
    const entry = Number(responseEntry.value);
    const value = Number(responseValue.value.trim());
    if (responseValue.value.trim() === "" || !Number.isFinite(value)) {
      responseMessage.textContent = "response must be numeric";
      return;
    }
    void (async () => {
      try {
        await client.recordResponse(trialId!, entry, value);
        clearError();
        responseValue.value = "";
        await refreshNow();
      } catch (err) {
        showError(err);
      }
    })();
  });

  analysisForm.addEventListener("submit", (ev) => {
    ev.preventDefault();
    if (!trialId) return;
    const est = (
      analysisForm.querySelector(
        'input[name="estimator"]:checked',
      ) as HTMLInputElement
    ).value;
    const test = (
      analysisForm.querySelector(
        'input[name="test"]:checked',
      ) as HTMLInputElement
    ).value;
    analysisButton.disabled = true;
    void (async () => {
      try {
        const result = await client.analyze(trialId!, est, test);
        clearError();
        analysisResults.set(analysisKey(est, test), result);
        renderAnalyses();
      } catch (err) {
        showError(err);
      } finally {
        analysisButton.disabled = false;
      }
    })();
  });

  renderAnalyses();

  return {
    client,
    root,
    getTrialId: () => trialId,
    getState: () => lastState,
    refreshNow,
    stop: () => {
      if (pollTimer !== null) clearInterval(pollTimer);
      pollTimer = null;
    },
  };
}

declare global {
  interface Window {
    __consoleApp?: AppHandle;
  }
}

if (typeof document !== "undefined") {
  const rootEl = document.getElementById("app");
  if (rootEl) {
    window.__consoleApp = mountApp(rootEl);
  }
}
