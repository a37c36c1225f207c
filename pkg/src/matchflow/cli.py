"""Command-line interface for the sequential experiment engine.

Subcommands:

- ``simulate``  run a factorial simulation grid described by a JSON config
                file and emit one CSV row per cell;
- ``replay``    rearrival-replay a completed trial from a CSV file and report
                the efficiency of the matched design against a randomized
                benchmark of the same size;
- ``serve``     run the HTTP trial service;
- ``analyze``   estimate and test on a stored trial event log;
- ``demo``      run a scripted live trial end to end through the service
                layer and print every allocation and the final analyses.

CSV ingestion: the header row names the covariates; the column names ``y``
(response) and ``w`` (assignment) are reserved. Exit codes: 0 success,
1 validation problem, 2 computation failure.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
from pathlib import Path

import numpy as np

from .core import (
    DESIGN_KINDS,
    ESTIMATOR_KINDS,
    MATCHING_KINDS,
    TEST_KINDS,
    DesignConfig,
    EngineError,
)
from .designs import run_design
from .service import (
    DEFAULT_NULL_DRAWS,
    ServiceError,
    TrialStore,
    ValidationFailure,
    create_app,
)
from .simharness import (
    ReplayDataset,
    ScenarioSpec,
    make_synthetic_cohort,
    retrospective_replay,
    run_grid,
    to_csv,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_COMPUTATION = 2

RESERVED_COLUMNS = ("y", "w")

# the demo enrolls a slice of the synthetic cohort under clinical-ish names
_DEMO_COLUMNS = (0, 1, 6, 9, 14)
_DEMO_NAMES = ("symptom_score", "symptom_flag", "biomarker_a", "age", "genetic_marker")
_DEMO_EFFECT = 1.0


class _Parser(argparse.ArgumentParser):
    """argparse that exits with the CLI's validation code, not its default 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


def load_replay_csv(path) -> tuple[ReplayDataset, list[str]]:
    """Read a completed trial: covariate columns plus reserved y and w."""
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ValidationFailure(f"{path}: empty CSV")
        names = [c.strip() for c in header]
        for reserved in RESERVED_COLUMNS:
            if reserved not in names:
                raise ValidationFailure(
                    f"{path}: missing reserved column {reserved!r} "
                    "(y = response, w = assignment)"
                )
        if len(set(names)) != len(names):
            raise ValidationFailure(f"{path}: duplicate column names")
        covariate_names = [c for c in names if c not in RESERVED_COLUMNS]
        if not covariate_names:
            raise ValidationFailure(f"{path}: no covariate columns")
        y_col = names.index("y")
        w_col = names.index("w")
        x_cols = [i for i, c in enumerate(names) if c not in RESERVED_COLUMNS]

        covariates, responses, assignments = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(names):
                raise ValidationFailure(
                    f"{path}:{lineno}: expected {len(names)} fields, got {len(row)}"
                )
            try:
                covariates.append([float(row[i]) for i in x_cols])
                responses.append(float(row[y_col]))
                assignments.append(float(row[w_col]))
            except ValueError:
                raise ValidationFailure(
                    f"{path}:{lineno}: non-numeric value"
                ) from None
    if not covariates:
        raise ValidationFailure(f"{path}: no data rows")
    try:
        dataset = ReplayDataset(
            covariates=np.asarray(covariates),
            assignments=np.asarray(assignments),
            responses=np.asarray(responses),
        )
    except ValueError as exc:
        raise ValidationFailure(f"{path}: {exc}") from None
    return dataset, covariate_names


def write_replay_csv(path, dataset: ReplayDataset, covariate_names) -> None:
    """Write a completed trial in the format load_replay_csv reads."""
    names = list(covariate_names)
    if len(names) != dataset.covariates.shape[1]:
        raise ValidationFailure(
            f"{len(names)} names for {dataset.covariates.shape[1]} covariate columns"
        )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names + ["y", "w"])
        for x, y, w in zip(dataset.covariates, dataset.responses, dataset.assignments):
            writer.writerow(
                [f"{v:.10g}" for v in x] + [f"{y:.10g}", str(int(w))]
            )


# ---------------------------------------------------------------------------
# weight-evolution plot
# ---------------------------------------------------------------------------


def plot_weight_evolution(weight_series, covariate_names, out_path) -> None:
    """SVG of per-covariate allocation weights over entry index.

    weight_series: iterable of (entry_index, weights) points, typically one
    per post-burn-in enrollment of a weighted matching design.
    """
    points = [(t, w) for t, w in weight_series if w is not None]
    if not points:
        raise ValidationFailure(
            "no covariate weights to plot: the design never produced any "
            "(burn-in only, or a design without covariate weights)"
        )
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ts = [t for t, _ in points]
    W = np.asarray([w for _, w in points], dtype=float)
    order = np.argsort(-W[-1])  # legend sorted by final weight
    fig, ax = plt.subplots(figsize=(8.0, 4.5))
    for j in order:
        ax.plot(ts, W[:, j], label=covariate_names[j], linewidth=1.4)
    ax.set_xlabel("entry index")
    ax.set_ylabel("normalized covariate weight")
    ax.set_ylim(0.0, 1.0)
    ax.set_title("allocation weight evolution")
    ax.legend(loc="upper left", fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def _forced_pass_weights(dataset: ReplayDataset, config: DesignConfig):
    """One pass over the dataset in arrival order, collecting weight snapshots."""
    sink: list = []
    run_design(
        covariate_stream=dataset.covariates,
        response_oracle=lambda t, w: float(dataset.responses[t - 1]),
        config=config,
        master_seed=0,
        forced_assignments=dataset.assignments,
        decision_sink=sink,
    )
    return [(d.entry_index, d.weights_used) for d in sink]


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _expand_grid(grid: dict) -> list[dict]:
    keys = list(grid)
    values = []
    for k in keys:
        v = grid[k]
        values.append(v if isinstance(v, list) else [v])
    return [dict(zip(keys, combo)) for combo in itertools.product(*values)]


def _compatible(design_kind: str, estimator_kind: str) -> bool:
    return (design_kind in MATCHING_KINDS) == estimator_kind.startswith("combined")


def _load_grid_config(path) -> tuple[list[ScenarioSpec], int]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ValidationFailure(f"cannot read config: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ValidationFailure(f"{path}: not valid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ValidationFailure(f"{path}: config must be a JSON object")
    workers = int(doc.get("workers", 1))
    raw_cells = list(doc.get("cells", []))
    if "grid" in doc:
        # full product; design/estimator pairs that do not apply are dropped
        expanded = _expand_grid(doc["grid"])
        raw_cells.extend(
            c for c in expanded
            if _compatible(c.get("design_kind", ""), c.get("estimator_kind", ""))
        )
    if not raw_cells:
        raise ValidationFailure(f"{path}: no cells (use \"cells\" and/or \"grid\")")
    cells = []
    for i, raw in enumerate(raw_cells):
        if not isinstance(raw, dict):
            raise ValidationFailure(f"{path}: cell {i} must be an object")
        try:
            cells.append(ScenarioSpec(**raw))
        except TypeError as exc:
            raise ValidationFailure(f"{path}: cell {i}: {exc}") from None
    return cells, workers


def _cmd_simulate(args) -> int:
    cells, config_workers = _load_grid_config(args.config)
    workers = args.workers if args.workers is not None else config_workers
    try:
        rows = run_grid(cells, workers=workers)
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from None
    text = to_csv(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    failed = [r for r in rows if r["status"] != "ok"]
    print(
        f"{len(rows)} cells: {len(rows) - len(failed)} ok, {len(failed)} failed",
        file=sys.stderr,
    )
    for r in failed:
        print(
            f"  failed: design={r['design_kind']} estimator={r['estimator_kind']} "
            f"test={r['test_kind']} n={r['n']} effect={r['treatment_effect']}: "
            f"{r['status']}",
            file=sys.stderr,
        )
    return EXIT_COMPUTATION if failed else EXIT_OK


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------


def _cmd_replay(args) -> int:
    dataset, covariate_names = load_replay_csv(args.csv)
    n = len(dataset)
    config = DesignConfig(
        design_kind=args.design,
        planned_n=n,
        t0=args.t0,
        lam=args.lam,
        bootstrap_resamples=args.resamples,
    )
    out = retrospective_replay(
        dataset, config, replications=args.replications, seed=args.seed
    )
    summary = {k: v for k, v in out.items() if k != "example_state"}
    print(f"dataset: {args.csv} (n={n}, p={len(covariate_names)})")
    print(f"design: {args.design} (t0={config.t0}, lam={config.lam})")
    print(
        f"replications: {out['replications_used']} usable"
        f" ({out['errors']} errored)"
    )
    print(
        f"retained per replay: mean {out['mean_n_rep']:.1f} of {n}"
        f" ({out['mean_n_rep'] / n:.3f}), min {out['min_n_rep']}"
    )
    print(f"efficiency vs same-size randomized benchmark: {out['efficiency']:.3f}")
    print(
        "variances: benchmark"
        f" {out['benchmark_variance']:.5g}, combined {out['combined_variance']:.5g}"
    )
    if args.json:
        Path(args.json).write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
    if args.weights_svg:
        series = _forced_pass_weights(dataset, config)
        plot_weight_evolution(series, covariate_names, args.weights_svg)
        print(f"weight evolution written to {args.weights_svg}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# serve
# ---------------------------------------------------------------------------


def _cmd_serve(args) -> int:
    import uvicorn

    app = create_app(args.data_dir, static_dir=args.static)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return EXIT_OK


# ---------------------------------------------------------------------------
# analyze
# ---------------------------------------------------------------------------


def _locate_trial(path_arg: str, trial_arg) -> tuple[Path, str]:
    path = Path(path_arg)
    if path.is_file():
        return path.parent, path.stem
    if path.is_dir():
        store_ids = sorted(p.stem for p in path.glob("*.jsonl"))
        if trial_arg:
            return path, trial_arg
        if len(store_ids) == 1:
            return path, store_ids[0]
        raise ValidationFailure(
            f"{path}: holds {len(store_ids)} trials; pick one with --trial "
            f"(found: {', '.join(store_ids) or 'none'})"
        )
    raise ValidationFailure(f"{path_arg}: no such file or directory")


def _cmd_analyze(args) -> int:
    data_dir, trial_id = _locate_trial(args.log, args.trial)
    store = TrialStore(data_dir)
    result = store.analyze(
        trial_id,
        args.estimator,
        args.test,
        beta0=args.beta0,
        level=args.level,
        n_draws=args.draws,
    )
    print(json.dumps(result, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# demo
# ---------------------------------------------------------------------------


def _cmd_demo(args) -> int:
    data_dir = Path(args.data_dir)
    store = TrialStore(data_dir)
    cohort = make_synthetic_cohort(n=args.n, seed=args.seed)
    X = cohort.covariates[:, list(_DEMO_COLUMNS)]
    names = list(_DEMO_NAMES)
    config = DesignConfig(design_kind=args.design, planned_n=args.n)
    created = store.create_trial(config, names, master_seed=args.seed)
    tid = created["trial_id"]
    print(f"created trial {tid} (design {args.design}, n={args.n}, t0={config.t0})")
    print(f"event log: {store.log_path(tid)}")

    for i in range(args.n):
        dec = store.enroll(tid, [float(v) for v in X[i]])
        t = dec["entry_index"]
        arm = "T" if dec["assignment"] == 1 else "C"
        if dec["matched_with"] is not None:
            how = (
                f"matched with #{dec['matched_with']}"
                f" (distance {dec['min_distance']:.3f}"
                f" <= threshold {dec['threshold_used']:.3f})"
            )
        elif dec["min_distance"] is not None:
            how = (
                f"randomized (nearest {dec['min_distance']:.3f}"
                f" > threshold {dec['threshold_used']:.3f})"
            )
        else:
            how = "randomized (burn-in)"
        print(f"  #{t:>3} -> {arm}  {how}")
        # scripted responses: historical outcome plus a constant effect
        y = float(cohort.responses[i]) + _DEMO_EFFECT * dec["assignment"]
        store.record_response(tid, t, y)

    view = store.state_view(tid)
    weights = view["covariate_weights"]
    print(f"enrollment complete: {view['n_entered']} subjects, "
          f"{len(view['matches'])} matched pairs, "
          f"{len(view['reservoir'])} in reservoir")
    if weights is not None:
        lead = int(np.argmax(weights))
        print(f"final covariate weights (leader: {names[lead]}):")
        for name, wgt in sorted(zip(names, weights), key=lambda kv: -kv[1]):
            print(f"  {name:>15}: {wgt:.3f}")

    print(f"analyses (true scripted effect = {_DEMO_EFFECT}):")
    for estimator_kind in ("combined_classic", "combined_ols"):
        for test_kind in ("wald", "randomization"):
            result = store.analyze(tid, estimator_kind, test_kind)
            est = result["estimate"]["estimate"]
            p = result["test"]["p_value"]
            interval = result["test"].get("interval")
            ci = (
                f" CI [{interval[0]:.3f}, {interval[1]:.3f}]"
                if interval
                else ""
            )
            print(
                f"  {estimator_kind:>16} + {test_kind:<13} "
                f"estimate {est:.3f}{ci}  p={p:.4f}"
            )

    if args.weights_svg:
        series = [
            (a["entry_index"], a["weights_used"]) for a in view["allocations"]
        ]
        plot_weight_evolution(series, names, args.weights_svg)
        print(f"weight evolution written to {args.weights_svg}")
    print(f"done; inspect it live with: matchflow serve --data-dir {data_dir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="matchflow", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    sim = sub.add_parser(
        "simulate",
        help="run a factorial simulation grid from a JSON config file",
        description=(
            "Config file: a JSON object with \"cells\" (a list of scenario "
            "objects) and/or \"grid\" (lists per factor, expanded as a full "
            "product; design/estimator pairs that do not apply are dropped), "
            "plus optional \"workers\"."
        ),
    )
    sim.add_argument("config", help="path to the JSON grid description")
    sim.add_argument("--out", help="write the CSV here instead of stdout")
    sim.add_argument("--workers", type=int, default=None,
                     help="thread count (default: config file value or 1)")
    sim.set_defaults(func=_cmd_simulate)

    rep = sub.add_parser(
        "replay",
        help="replay a completed trial CSV under a matching design",
        description=(
            "CSV header names the covariates; reserved columns: y (response) "
            "and w (0/1 assignment)."
        ),
    )
    rep.add_argument("csv", help="completed-trial CSV file")
    rep.add_argument("--design", default="cara_stepwise", choices=DESIGN_KINDS)
    rep.add_argument("--t0", type=int, default=None,
                     help="burn-in size (default: ceil(0.35 n))")
    rep.add_argument("--lam", type=float, default=0.10,
                     help="match-threshold quantile level")
    rep.add_argument("--resamples", type=int, default=500,
                     help="bootstrap resamples for the threshold")
    rep.add_argument("--replications", type=int, default=200)
    rep.add_argument("--seed", type=int, default=0)
    rep.add_argument("--json", help="also write the summary as JSON here")
    rep.add_argument("--weights-svg",
                     help="write a weight-evolution SVG from one arrival-order pass")
    rep.set_defaults(func=_cmd_replay)

    srv = sub.add_parser("serve", help="run the HTTP trial service")
    srv.add_argument("--data-dir", default="trial-data",
                     help="directory of trial event logs (default: ./trial-data)")
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=8000)
    srv.add_argument("--static", default=None,
                     help="directory with a console index.html to serve at /")
    srv.set_defaults(func=_cmd_serve)

    ana = sub.add_parser("analyze", help="estimate and test on a stored trial log")
    ana.add_argument("log", help="a trial .jsonl file, or a data directory")
    ana.add_argument("--trial", default=None,
                     help="trial id when the path is a data directory")
    ana.add_argument("--estimator", default="combined_classic",
                     choices=ESTIMATOR_KINDS)
    ana.add_argument("--test", default="wald", choices=TEST_KINDS)
    ana.add_argument("--beta0", type=float, default=0.0)
    ana.add_argument("--level", type=float, default=0.95)
    ana.add_argument("--draws", type=int, default=DEFAULT_NULL_DRAWS,
                     help="randomization draws")
    ana.set_defaults(func=_cmd_analyze)

    dem = sub.add_parser(
        "demo",
        help="scripted live trial through the service layer",
        description=(
            "Creates a trial, enrolls synthetic subjects one by one, records "
            "responses with a constant treatment effect of 1, then runs all "
            "four estimator/test analysis settings."
        ),
    )
    dem.add_argument("--data-dir", default="demo-data")
    dem.add_argument("--n", type=int, default=50)
    dem.add_argument("--design", default="cara_stepwise", choices=MATCHING_KINDS)
    dem.add_argument("--seed", type=int, default=0)
    dem.add_argument("--weights-svg",
                     help="write the trial's weight-evolution SVG here")
    dem.set_defaults(func=_cmd_demo)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ServiceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except EngineError as exc:
        print(f"computation failed: {exc}", file=sys.stderr)
        return EXIT_COMPUTATION


if __name__ == "__main__":
    sys.exit(main())
