/** End-to-end console test against a live trial service.
 *
 * Spawns the real `matchflow serve` process, mounts the real console app
 * into the test DOM, and drives a complete 50-subject trial through the
 * form exactly as a coordinator would: enroll each arrival, record its
 * response, watch the weight chart move, and run all four analysis
 * settings. Network traffic is real HTTP against the spawned service; the
 * only simulated part is the DOM host (jsdom stands in for a browser
 * window, since this environment cannot download browser binaries).
 */

import { spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { mountApp, type AppHandle } from "../src/app.js";

const PORT = 18731 + (process.pid % 500);
const BASE = `http://127.0.0.1:${PORT}`;

let service: ChildProcess;
let dataDir: string;
let app: AppHandle;

/** Deterministic 32-bit PRNG so the subject stream is reproducible. */
function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

function gaussianPair(rand: () => number): [number, number] {
  const u = Math.max(rand(), 1e-12);
  const v = rand();
  const r = Math.sqrt(-2 * Math.log(u));
  return [r * Math.cos(2 * Math.PI * v), r * Math.sin(2 * Math.PI * v)];
}

async function waitFor(
  cond: () => boolean | Promise<boolean>,
  what: string,
  timeoutMs = 15_000,
): Promise<void> {
  const start = Date.now();
  for (;;) {
    if (await cond()) return;
    if (Date.now() - start > timeoutMs) {
      throw new Error(`timed out waiting for ${what}`);
    }
    await new Promise((r) => setTimeout(r, 25));
  }
}

function setInput(el: HTMLInputElement, value: string): void {
  el.value = value;
  el.dispatchEvent(new Event("input", { bubbles: true }));
}

function byTestId<T extends Element>(testid: string): T {
  const el = document.querySelector(`[data-testid="${testid}"]`);
  if (!el) throw new Error(`no element with data-testid=${testid}`);
  return el as T;
}

beforeAll(async () => {
  dataDir = mkdtempSync(join(tmpdir(), "console-e2e-"));
  service = spawn(
    "matchflow",
    ["serve", "--data-dir", dataDir, "--host", "127.0.0.1", "--port", String(PORT)],
    { stdio: ["ignore", "pipe", "pipe"] },
  );
  let serviceLog = "";
  service.stdout?.on("data", (chunk) => (serviceLog += chunk));
  service.stderr?.on("data", (chunk) => (serviceLog += chunk));
  service.on("exit", (code) => {
    if (code !== null && code !== 0) {
      // surfaced by the readiness timeout below
      serviceLog += `\n[service exited with code ${code}]`;
    }
  });
  await waitFor(
    async () => {
      try {
        const res = await fetch(`${BASE}/`);
        return res.ok;
      } catch {
        return false;
      }
    },
    `service readiness on ${BASE} (log so far: ${serviceLog.slice(-400)})`,
    30_000,
  );

  document.body.innerHTML = '<div id="app"></div>';
  app = mountApp(document.getElementById("app")!, BASE);
});

afterAll(() => {
  app?.stop();
  service?.kill("SIGTERM");
  rmSync(dataDir, { recursive: true, force: true });
});

describe("trial console against a live service", () => {
  const N = 50;
  const rand = mulberry32(20240816);
  const noise = mulberry32(97);
  let matchedEntries: number[] = [];

  it("creates a weighted-matching trial from the setup form", async () => {
    const design = byTestId<HTMLSelectElement>("setup-design");
    design.value = "cara_stepwise";
    setInput(byTestId<HTMLInputElement>("setup-planned-n"), String(N));
    setInput(byTestId<HTMLInputElement>("setup-seed"), "1");
    setInput(
      byTestId<HTMLInputElement>("setup-covariate-names"),
      "severity, age, marker",
    );
    byTestId<HTMLFormElement>("setup-form").requestSubmit();
    await waitFor(() => app.getTrialId() !== null, "trial creation");
    await waitFor(() => app.getState() !== null, "first state poll");
    expect(app.getState()!.config.design_kind).toBe("cara_stepwise");
    expect(app.getState()!.t0).toBe(18); // ceil(0.35 * 50)
    expect(
      document.querySelectorAll('[data-testid^="covariate-input-"]').length,
    ).toBe(3);
  });

  it("blocks a non-numeric covariate client-side", async () => {
    const before = app.getState()!.n_entered;
    setInput(byTestId<HTMLInputElement>("covariate-input-severity"), "abc");
    setInput(byTestId<HTMLInputElement>("covariate-input-age"), "1.0");
    setInput(byTestId<HTMLInputElement>("covariate-input-marker"), "0");
    byTestId<HTMLFormElement>("enroll-form").requestSubmit();
    await waitFor(
      () => byTestId<HTMLElement>("enroll-error").textContent!.length > 0,
      "inline validation message",
    );
    expect(byTestId<HTMLElement>("enroll-error").textContent).toContain(
      "numeric",
    );
    await app.refreshNow();
    expect(app.getState()!.n_entered).toBe(before); // nothing was sent
  });

  it("enrolls 50 subjects, recording a response for each", async () => {
    for (let t = 1; t <= N; t += 1) {
      const [g1, g2] = gaussianPair(rand);
      const [g3] = gaussianPair(rand);
      const severity = g1;
      const age = g2;
      const marker = g3 > 0 ? 1 : 0;

      setInput(
        byTestId<HTMLInputElement>("covariate-input-severity"),
        severity.toFixed(4),
      );
      setInput(byTestId<HTMLInputElement>("covariate-input-age"), age.toFixed(4));
      setInput(
        byTestId<HTMLInputElement>("covariate-input-marker"),
        String(marker),
      );
      byTestId<HTMLFormElement>("enroll-form").requestSubmit();
      await waitFor(
        () =>
          byTestId<HTMLElement>("allocation-badge").textContent!.includes(
            `entry #${t}:`,
          ),
        `allocation badge for entry ${t}`,
      );

      await app.refreshNow();
      const state = app.getState()!;
      expect(state.n_entered).toBe(t);
      const subject = state.subjects[t - 1];
      expect(subject.assignment === 0 || subject.assignment === 1).toBe(true);

      // check burn-in weights exactly once, early in the trial
      if (t === 4) {
        const weights = [
          ...document.querySelectorAll('[data-testid^="weight-bar-"]'),
        ].map((el) => Number(el.getAttribute("data-weight")));
        expect(weights).toHaveLength(3);
        for (const w of weights) expect(w).toBeCloseTo(1 / 3, 6);
      }

      // coordinator records the response right away
      const w = subject.assignment!;
      const [eps] = gaussianPair(noise);
      const y = 2.5 * severity + 0.3 * age + 1.0 * w + 0.3 * eps;
      byTestId<HTMLSelectElement>("response-entry").value = String(t);
      setInput(byTestId<HTMLInputElement>("response-value"), y.toFixed(4));
      byTestId<HTMLFormElement>("response-form").requestSubmit();
      await waitFor(async () => {
        return app.getState()!.n_responses === t;
      }, `response ${t} recorded`);
    }

    const state = app.getState()!;
    expect(state.n_entered).toBe(N);
    expect(state.closed).toBe(true);
    expect(state.n_responses).toBe(N);
    // structural invariant surfaced in the UI status strip
    expect(2 * state.matches.length + state.reservoir.length).toBe(N);
  }, 120_000);

  it("observed at least one matched allocation after burn-in", () => {
    const state = app.getState()!;
    matchedEntries = state.allocations
      .filter((a) => a.matched_with !== null && a.entry_index > state.t0)
      .map((a) => a.entry_index);
    expect(matchedEntries.length).toBeGreaterThan(0);

    // the badge explained the most recent decision; the match list links
    // both partners of every pair
    const lastMatched = state.allocations
      .filter((a) => a.matched_with !== null)
      .at(-1)!;
    const row = byTestId<HTMLElement>(`match-${lastMatched.entry_index}`);
    const hrefs = [...row.querySelectorAll("a")].map((a) =>
      a.getAttribute("href"),
    );
    expect(hrefs).toContain(`#subject-${lastMatched.matched_with}`);
    // every matched allocation carries its evidence: distance ≤ threshold
    expect(lastMatched.min_distance!).toBeLessThanOrEqual(
      lastMatched.threshold_used!,
    );
  });

  it("shows the dominant covariate leading the weight chart", () => {
    const state = app.getState()!;
    expect(state.covariate_weights).not.toBeNull();
    const bySize = new Map(
      [...document.querySelectorAll('[data-testid^="weight-bar-"]')].map(
        (el) => [
          el.getAttribute("data-testid")!.replace("weight-bar-", ""),
          Number(el.getAttribute("data-weight")),
        ],
      ),
    );
    const severity = bySize.get("severity")!;
    expect(severity).toBeGreaterThanOrEqual(0.5);
    for (const [name, w] of bySize) {
      if (name !== "severity") expect(severity).toBeGreaterThan(w);
    }
    // dominant bar is visually flagged
    const dominant = document.querySelector(".bar-dominant");
    expect(dominant?.getAttribute("data-testid")).toBe("weight-bar-severity");
  });

  it("runs all four analysis settings from the 2x2 selector", async () => {
    for (const est of ["combined_classic", "combined_ols"]) {
      for (const test of ["wald", "randomization"]) {
        byTestId<HTMLInputElement>(`analysis-estimator-${est}`).checked = true;
        byTestId<HTMLInputElement>(`analysis-test-${test}`).checked = true;
        byTestId<HTMLFormElement>("analysis-form").requestSubmit();
        await waitFor(
          () =>
            byTestId<HTMLElement>(
              `analysis-result-${est}-${test}`,
            ).textContent!.includes("estimate"),
          `analysis ${est}/${test}`,
          30_000,
        );
        const text = byTestId<HTMLElement>(
          `analysis-result-${est}-${test}`,
        ).textContent!;
        const p = Number(/p = ([0-9.]+)/.exec(text)?.[1]);
        expect(p).toBeGreaterThanOrEqual(0);
        expect(p).toBeLessThanOrEqual(1);
        expect(text).toContain(`on ${N} subjects`);
        if (test === "randomization") expect(text).toContain("null draws");
      }
    }
    // all four cells are filled in
    const cells = [
      ...document.querySelectorAll('[data-testid^="analysis-result-"]'),
    ];
    expect(cells).toHaveLength(4);
    for (const cell of cells) {
      expect(cell.textContent).toContain("estimate");
    }
  });

  it("surfaces service errors verbatim", async () => {
    // recording a second response for entry 1 is a service-side conflict
    byTestId<HTMLSelectElement>("response-entry").append(
      new Option("#1", "1"),
    );
    byTestId<HTMLSelectElement>("response-entry").value = "1";
    setInput(byTestId<HTMLInputElement>("response-value"), "0.5");
    const form = byTestId<HTMLFormElement>("response-form");
    [...form.querySelectorAll("button, select, input")].forEach(
      (el) => ((el as HTMLButtonElement).disabled = false),
    );
    form.requestSubmit();
    await waitFor(
      () =>
        byTestId<HTMLElement>("error-bar").textContent!.includes(
          "already has a recorded response",
        ),
      "verbatim service error",
    );
  });
});
