"""Event-sourced trial persistence and the HTTP service around the engine.

Each trial lives as an append-only JSON-lines event log on disk plus an
in-memory materialized ``TrialState``. Every mutation is written (and
fsynced) before it is applied, and the apply step is the same reducer the
loader replays at startup, so a restart rebuilds exactly the live state:
replaying the log yields byte-identical canonical JSON.

Crash safety: an enrollment is two events (``subject_enrolled`` then
``allocation_made``) written in a single append, and the loader refuses to
apply one without the other — a torn tail loses at most the in-flight
operation and never leaves a half-allocated subject. Damaged tails are
truncated away on load so sequence numbers stay contiguous.

Concurrency: one writer per trial (a per-trial lock serializes enrollments,
responses, and log appends); reads and analyses work on snapshots.

Client-supplied idempotency keys make every mutating operation safe to
retry: a replayed key returns the original result without a second event.
"""

from __future__ import annotations

import copy
import json
import os
import threading
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Optional

import numpy as np
from fastapi import FastAPI
from fastapi.responses import FileResponse, HTMLResponse, JSONResponse
from pydantic import BaseModel

from .core import (
    ESTIMATOR_KINDS,
    SCHEMA_VERSION,
    TEST_KINDS,
    AllocationDecision,
    DesignConfig,
    EngineError,
    SubjectRecord,
    TrialState,
    canonical_json,
    derive_seed,
)
from .designs import apply_decision, covariate_weights, step
from .inference import estimate, randomization_test, wald_test

EVENT_KINDS = (
    "trial_created",
    "subject_enrolled",
    "allocation_made",
    "response_recorded",
    "analysis_run",
)

DEFAULT_NULL_DRAWS = 501


class ServiceError(Exception):
    """Request-level failure; carries the HTTP status the routes should use."""

    status_code = 400


class ValidationFailure(ServiceError):
    status_code = 400


class UnknownTrial(ServiceError):
    status_code = 404


class ConflictError(ServiceError):
    status_code = 409


def _now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def _jsonable(value: Any) -> Any:
    """Recursively convert numpy scalars/arrays so payloads serialize cleanly."""
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    return value


@dataclass
class _LiveTrial:
    """One trial's materialized state plus its log-writing bookkeeping."""

    trial_id: str
    state: TrialState
    covariate_names: list[str]
    path: Path
    creation_key: Optional[str] = None
    lock: threading.RLock = field(default_factory=threading.RLock)
    next_seq: int = 1
    n_events: int = 0
    n_responses: int = 0
    analysis_count: int = 0
    pending: Optional[dict] = None  # subject_enrolled awaiting its allocation
    allocations: list = field(default_factory=list)  # decision payloads per entry
    enroll_keys: dict = field(default_factory=dict)
    response_keys: dict = field(default_factory=dict)
    analysis_keys: dict = field(default_factory=dict)

    @property
    def closed(self) -> bool:
        return self.state.n_entered >= self.state.config.planned_n


def _append_events(live: _LiveTrial, events: list[tuple[str, dict]]) -> None:
    """Write events as one durable append; sequence numbers stay contiguous."""
    lines = []
    for offset, (kind, payload) in enumerate(events):
        lines.append(
            canonical_json(
                {
                    "sequence_number": live.next_seq + offset,
                    "timestamp": _now_iso(),
                    "schema_version": SCHEMA_VERSION,
                    "kind": kind,
                    "payload": payload,
                }
            )
        )
    blob = "\n".join(lines) + "\n"
    with open(live.path, "a", encoding="utf-8") as fh:
        fh.write(blob)
        fh.flush()
        os.fsync(fh.fileno())
    live.next_seq += len(events)
    live.n_events += len(events)


def _apply_event(live: _LiveTrial, kind: str, payload: dict) -> dict:
    """The single reducer both the live path and the loader run.

    Returns the operation's response payload (cached under the client's
    idempotency key when one was supplied).
    """
    if kind == "subject_enrolled":
        if live.pending is not None:
            raise ValidationFailure(
                f"corrupt event log {live.path.name}: enrollment while one pending"
            )
        live.pending = payload
        return {}

    if kind == "allocation_made":
        enrolled = live.pending
        live.pending = None
        if enrolled is None or enrolled["entry_index"] != payload["entry_index"]:
            raise ValidationFailure(
                f"corrupt event log {live.path.name}: allocation without enrollment"
            )
        live.state.subjects.append(
            SubjectRecord(
                entry_index=int(payload["entry_index"]),
                covariates=np.asarray(enrolled["covariates"], dtype=float),
            )
        )
        decision = AllocationDecision(
            entry_index=int(payload["entry_index"]),
            assignment=int(payload["assignment"]),
            matched_with=payload["matched_with"],
            randomized=bool(payload["randomized"]),
            weights_used=payload["weights_used"],
            threshold_used=payload["threshold_used"],
            min_distance=payload["min_distance"],
        )
        apply_decision(live.state, decision)
        live.allocations.append(dict(payload))
        response = dict(payload)
        response["n_entered"] = live.state.n_entered
        response["closed"] = live.closed
        key = enrolled.get("idempotency_key")
        if key:
            live.enroll_keys[key] = response
        return response

    if kind == "response_recorded":
        subject = live.state.subjects[int(payload["entry_index"]) - 1]
        subject.response = float(payload["response"])
        live.n_responses += 1
        response = {
            "entry_index": int(payload["entry_index"]),
            "n_responses": live.n_responses,
        }
        key = payload.get("idempotency_key")
        if key:
            live.response_keys[key] = response
        return response

    if kind == "analysis_run":
        live.analysis_count += 1
        response = {
            "analysis_index": live.analysis_count - 1,
            "n_subjects": payload["n_subjects"],
            "estimate": payload["estimate_report"],
            "test": payload["test_report"],
        }
        key = payload.get("idempotency_key")
        if key:
            live.analysis_keys[key] = response
        return response

    raise ValidationFailure(
        f"corrupt event log {live.path.name}: unknown event kind {kind!r}"
    )


class TrialStore:
    """All trials under one data directory; the single writer per trial."""

    def __init__(self, data_dir):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._trials: dict[str, _LiveTrial] = {}
        self._creation_keys: dict[str, str] = {}
        for path in sorted(self.data_dir.glob("*.jsonl")):
            live = self._load(path)
            if live is None:
                continue
            self._trials[live.trial_id] = live
            if live.creation_key:
                self._creation_keys[live.creation_key] = live.trial_id

    # -- loading ------------------------------------------------------------

    def _load(self, path: Path) -> Optional[_LiveTrial]:
        """Replay one event log; repair a torn tail; None if nothing usable."""
        raw = path.read_bytes()
        chunks = raw.split(b"\n")
        live: Optional[_LiveTrial] = None
        offset = 0
        applied_end = 0  # bytes covered by fully applied events
        committed_seq = 0
        expected_seq = 1
        for i, chunk in enumerate(chunks):
            has_newline = i < len(chunks) - 1
            line_end = offset + len(chunk) + (1 if has_newline else 0)
            if chunk == b"":
                offset = line_end
                if has_newline and i < len(chunks) - 2:
                    raise ValidationFailure(
                        f"corrupt event log {path.name}: blank line {i + 1}"
                    )
                continue
            last_data_line = all(c == b"" for c in chunks[i + 1 :])
            try:
                event = json.loads(chunk)
                ok = (
                    isinstance(event, dict)
                    and event.get("kind") in EVENT_KINDS
                    and event.get("sequence_number") == expected_seq
                    and isinstance(event.get("payload"), dict)
                )
            except ValueError:
                event, ok = None, False
            if not ok:
                if last_data_line:
                    break  # torn tail: drop the in-flight event
                raise ValidationFailure(
                    f"corrupt event log {path.name}: bad event at line {i + 1}"
                )

            kind, payload = event["kind"], event["payload"]
            if kind == "trial_created":
                if live is not None:
                    raise ValidationFailure(
                        f"corrupt event log {path.name}: second trial_created"
                    )
                if payload.get("trial_id") != path.stem:
                    raise ValidationFailure(
                        f"corrupt event log {path.name}: trial id mismatch"
                    )
                live = _LiveTrial(
                    trial_id=payload["trial_id"],
                    state=TrialState(
                        config=DesignConfig(**payload["config"]),
                        master_seed=int(payload["master_seed"]),
                    ),
                    covariate_names=list(payload["covariate_names"]),
                    path=path,
                    creation_key=payload.get("idempotency_key"),
                )
            elif live is None:
                raise ValidationFailure(
                    f"corrupt event log {path.name}: first event must create the trial"
                )
            else:
                _apply_event(live, kind, payload)

            expected_seq += 1
            if kind != "subject_enrolled":
                # an enrollment only commits once its allocation lands
                applied_end = line_end
                committed_seq = event["sequence_number"]
            offset = line_end

        if live is not None:
            live.pending = None  # dangling enrollment: allocation never hit disk
            live.next_seq = committed_seq + 1
            live.n_events = committed_seq
        if applied_end < len(raw):
            if applied_end == 0:
                path.unlink()  # nothing usable was ever committed
                return None
            with open(path, "r+b") as fh:
                fh.truncate(applied_end)
        return live

    # -- helpers ------------------------------------------------------------

    def _get(self, trial_id: str) -> _LiveTrial:
        with self._lock:
            live = self._trials.get(trial_id)
        if live is None:
            raise UnknownTrial(f"no trial {trial_id!r}")
        return live

    def trial_ids(self) -> list[str]:
        with self._lock:
            return sorted(self._trials)

    def log_path(self, trial_id: str) -> Path:
        return self._get(trial_id).path

    def trial_state(self, trial_id: str) -> TrialState:
        """The live state; callers must treat it as read-only."""
        return self._get(trial_id).state

    @staticmethod
    def _created_payload(live: _LiveTrial) -> dict:
        return {
            "trial_id": live.trial_id,
            "planned_n": live.state.config.planned_n,
            "t0": live.state.config.t0,
            "n_entered": live.state.n_entered,
            "covariate_names": list(live.covariate_names),
        }

    # -- operations ----------------------------------------------------------

    def create_trial(
        self,
        config: DesignConfig,
        covariate_names,
        master_seed: int = 0,
        idempotency_key: Optional[str] = None,
    ) -> dict:
        names = list(covariate_names)
        problems = config.validate()
        if problems:
            raise ValidationFailure("invalid config: " + "; ".join(problems))
        if not names:
            raise ValidationFailure("need at least one covariate name")
        if any(not isinstance(n, str) or not n.strip() for n in names):
            raise ValidationFailure("covariate names must be non-empty strings")
        if len(set(names)) != len(names):
            raise ValidationFailure("duplicate covariate names")
        if config.t0 < len(names):
            raise ValidationFailure(
                f"t0 must be at least the covariate count: t0={config.t0} < p={len(names)}"
            )
        try:
            seed = int(master_seed)
        except (TypeError, ValueError):
            raise ValidationFailure("master_seed must be an integer") from None

        with self._lock:
            if idempotency_key and idempotency_key in self._creation_keys:
                known = self._trials[self._creation_keys[idempotency_key]]
                return self._created_payload(known)
            trial_id = uuid.uuid4().hex[:12]
            while trial_id in self._trials:
                trial_id = uuid.uuid4().hex[:12]
            live = _LiveTrial(
                trial_id=trial_id,
                state=TrialState(config=config, master_seed=seed),
                covariate_names=names,
                path=self.data_dir / f"{trial_id}.jsonl",
                creation_key=idempotency_key,
            )
            payload = {
                "trial_id": trial_id,
                "config": config.to_dict(),
                "covariate_names": names,
                "master_seed": seed,
                "idempotency_key": idempotency_key,
            }
            _append_events(live, [("trial_created", payload)])
            self._trials[trial_id] = live
            if idempotency_key:
                self._creation_keys[idempotency_key] = trial_id
            return self._created_payload(live)

    def enroll(
        self, trial_id: str, covariates, idempotency_key: Optional[str] = None
    ) -> dict:
        live = self._get(trial_id)
        with live.lock:
            if idempotency_key and idempotency_key in live.enroll_keys:
                return dict(live.enroll_keys[idempotency_key])
            if live.closed:
                raise ConflictError(
                    f"trial {trial_id} is closed: all "
                    f"{live.state.config.planned_n} planned subjects are enrolled"
                )
            p = len(live.covariate_names)
            try:
                vec = np.asarray(covariates, dtype=float).reshape(-1)
            except (TypeError, ValueError):
                raise ValidationFailure("covariates must be a numeric vector") from None
            if vec.shape[0] != p:
                raise ValidationFailure(f"expected {p} covariates, got {vec.shape[0]}")
            if not np.all(np.isfinite(vec)):
                raise ValidationFailure("covariates must be finite numbers")

            entry_index = live.state.n_entered + 1
            live.state.subjects.append(
                SubjectRecord(entry_index=entry_index, covariates=vec)
            )
            try:
                decision = step(live.state)
            finally:
                live.state.subjects.pop()

            events = [
                (
                    "subject_enrolled",
                    {
                        "entry_index": entry_index,
                        "covariates": [float(v) for v in vec],
                        "idempotency_key": idempotency_key,
                    },
                ),
                ("allocation_made", _jsonable(decision.to_dict())),
            ]
            _append_events(live, events)
            response: dict = {}
            for kind, payload in events:
                out = _apply_event(live, kind, payload)
                if kind == "allocation_made":
                    response = out
            return dict(response)

    def record_response(
        self,
        trial_id: str,
        entry_index: int,
        response,
        idempotency_key: Optional[str] = None,
    ) -> dict:
        live = self._get(trial_id)
        with live.lock:
            if idempotency_key and idempotency_key in live.response_keys:
                return dict(live.response_keys[idempotency_key])
            try:
                idx = int(entry_index)
                y = float(response)
            except (TypeError, ValueError):
                raise ValidationFailure(
                    "entry_index must be an integer and response a number"
                ) from None
            if not np.isfinite(y):
                raise ValidationFailure("response must be finite")
            n = live.state.n_entered
            if not 1 <= idx <= n:
                raise ValidationFailure(
                    f"unknown entry index {idx}: {n} subjects enrolled"
                )
            subject = live.state.subjects[idx - 1]
            if subject.assignment is None:
                raise ConflictError(f"entry {idx} has no allocation yet")
            if subject.response is not None:
                raise ConflictError(f"entry {idx} already has a recorded response")
            payload = {
                "entry_index": idx,
                "response": y,
                "idempotency_key": idempotency_key,
            }
            _append_events(live, [("response_recorded", payload)])
            return dict(_apply_event(live, "response_recorded", payload))

    def analyze(
        self,
        trial_id: str,
        estimator_kind: str,
        test_kind: str,
        beta0: float = 0.0,
        level: float = 0.95,
        n_draws: int = DEFAULT_NULL_DRAWS,
        idempotency_key: Optional[str] = None,
    ) -> dict:
        live = self._get(trial_id)
        if estimator_kind not in ESTIMATOR_KINDS:
            raise ValidationFailure(
                f"unknown estimator_kind {estimator_kind!r}; "
                f"choose one of {', '.join(ESTIMATOR_KINDS)}"
            )
        if test_kind not in TEST_KINDS:
            raise ValidationFailure(
                f"unknown test_kind {test_kind!r}; choose one of {', '.join(TEST_KINDS)}"
            )
        beta0 = float(beta0)
        level = float(level)
        n_draws = int(n_draws)
        if not np.isfinite(beta0):
            raise ValidationFailure("beta0 must be finite")
        if not 0.0 < level < 1.0:
            raise ValidationFailure("level must lie in (0, 1)")
        if n_draws < 1:
            raise ValidationFailure("n_draws must be >= 1")

        with live.lock:
            if idempotency_key and idempotency_key in live.analysis_keys:
                return dict(live.analysis_keys[idempotency_key])
            snapshot = copy.deepcopy(live.state)
            analysis_index = live.analysis_count

        # seeded per analysis so repeated runs are distinct but reproducible
        seed = derive_seed(snapshot.master_seed, "null-draw", analysis_index)
        report = estimate(snapshot, estimator_kind)
        if test_kind == "wald":
            test_report = wald_test(report, beta0=beta0, level=level)
        else:
            test_report = randomization_test(
                snapshot,
                estimator_kind,
                beta0=beta0,
                n_draws=n_draws,
                seed=seed,
                level=level,
            )

        payload = _jsonable(
            {
                "estimator_kind": estimator_kind,
                "test_kind": test_kind,
                "beta0": beta0,
                "level": level,
                "n_draws": n_draws,
                "seed": seed,
                "n_subjects": snapshot.n_entered,
                "estimate_report": report.to_dict(),
                "test_report": test_report.to_dict(),
                "idempotency_key": idempotency_key,
            }
        )
        with live.lock:
            if idempotency_key and idempotency_key in live.analysis_keys:
                return dict(live.analysis_keys[idempotency_key])
            _append_events(live, [("analysis_run", payload)])
            return dict(_apply_event(live, "analysis_run", payload))

    def state_view(self, trial_id: str) -> dict:
        live = self._get(trial_id)
        with live.lock:
            state = live.state
            partner_of: dict[int, int] = {}
            for m in state.matches:
                partner_of[m.first_index] = m.second_index
                partner_of[m.second_index] = m.first_index
            n_treat, n_control = state.arm_counts()
            return {
                "trial_id": live.trial_id,
                "schema_version": SCHEMA_VERSION,
                "config": state.config.to_dict(),
                "covariate_names": list(live.covariate_names),
                "master_seed": state.master_seed,
                "planned_n": state.config.planned_n,
                "t0": state.config.t0,
                "n_entered": state.n_entered,
                "closed": live.closed,
                "n_responses": live.n_responses,
                "arm_counts": {"treatment": n_treat, "control": n_control},
                "reservoir": list(state.reservoir),
                "matches": [m.to_dict() for m in state.matches],
                "subjects": [
                    {
                        **s.to_dict(),
                        "matched_with": partner_of.get(s.entry_index),
                    }
                    for s in state.subjects
                ],
                "covariate_weights": covariate_weights(
                    state, p=len(live.covariate_names)
                ),
                "allocations": [dict(a) for a in live.allocations],
                "n_events": live.n_events,
                "n_analyses": live.analysis_count,
            }


# ---------------------------------------------------------------------------
# HTTP surface
# ---------------------------------------------------------------------------

_CONSOLE_PLACEHOLDER = """<!doctype html>
<html><head><meta charset="utf-8"><title>trial service</title></head>
<body style="font-family: system-ui, sans-serif; max-width: 40rem; margin: 3rem auto;">
<h1>Sequential trial service</h1>
<p>The JSON API is live:</p>
<ul>
<li><code>POST /trials</code> — create a trial</li>
<li><code>POST /trials/{id}/subjects</code> — enroll the next subject</li>
<li><code>POST /trials/{id}/responses</code> — record a response</li>
<li><code>GET /trials/{id}/state</code> — current trial state</li>
<li><code>POST /trials/{id}/analyze</code> — estimate and test</li>
</ul>
<p>No console bundle is installed; serve one with <code>--static</code>.</p>
</body></html>
"""


class ConfigBody(BaseModel):
    design_kind: str
    planned_n: int
    t0: Optional[int] = None
    lam: float = 0.10
    bootstrap_resamples: int = 500
    coin_bias: float = 2.0 / 3.0


class CreateTrialBody(BaseModel):
    config: ConfigBody
    covariate_names: list[str]
    master_seed: int = 0
    idempotency_key: Optional[str] = None


class EnrollBody(BaseModel):
    covariates: list[float]
    idempotency_key: Optional[str] = None


class ResponseBody(BaseModel):
    entry_index: int
    response: float
    idempotency_key: Optional[str] = None


class AnalyzeBody(BaseModel):
    estimator_kind: str
    test_kind: str
    beta0: float = 0.0
    level: float = 0.95
    n_draws: int = DEFAULT_NULL_DRAWS
    idempotency_key: Optional[str] = None


def create_app(data_dir, static_dir=None):
    """FastAPI app exposing one TrialStore over five JSON routes."""
    store = TrialStore(data_dir)
    app = FastAPI(title="sequential trial service", version=str(SCHEMA_VERSION))
    app.state.store = store
    static_root = Path(static_dir) if static_dir else None

    @app.exception_handler(ServiceError)
    def _service_error(request, exc: ServiceError):
        return JSONResponse(status_code=exc.status_code, content={"detail": str(exc)})

    @app.exception_handler(EngineError)
    def _engine_error(request, exc: EngineError):
        return JSONResponse(
            status_code=409,
            content={"detail": f"{type(exc).__name__}: {exc}"},
        )

    @app.get("/", response_class=HTMLResponse, include_in_schema=False)
    def console_page():
        if static_root is not None:
            index = static_root / "index.html"
            if index.is_file():
                return FileResponse(index)
        return HTMLResponse(_CONSOLE_PLACEHOLDER)

    @app.get("/assets/{name}", include_in_schema=False)
    def console_asset(name: str):
        if static_root is None:
            raise UnknownTrial("no static assets configured")
        target = (static_root / name).resolve()
        if not target.is_file() or static_root.resolve() not in target.parents:
            raise UnknownTrial(f"no asset {name!r}")
        return FileResponse(target)

    @app.post("/trials", status_code=201)
    def create_trial(body: CreateTrialBody):
        config = DesignConfig(**body.config.model_dump())
        return store.create_trial(
            config,
            body.covariate_names,
            master_seed=body.master_seed,
            idempotency_key=body.idempotency_key,
        )

    @app.post("/trials/{trial_id}/subjects", status_code=201)
    def enroll_subject(trial_id: str, body: EnrollBody):
        return store.enroll(
            trial_id, body.covariates, idempotency_key=body.idempotency_key
        )

    @app.post("/trials/{trial_id}/responses")
    def record_response(trial_id: str, body: ResponseBody):
        return store.record_response(
            trial_id,
            body.entry_index,
            body.response,
            idempotency_key=body.idempotency_key,
        )

    @app.get("/trials/{trial_id}/state")
    def trial_state(trial_id: str):
        return store.state_view(trial_id)

    @app.post("/trials/{trial_id}/analyze")
    def analyze(trial_id: str, body: AnalyzeBody):
        return store.analyze(
            trial_id,
            body.estimator_kind,
            body.test_kind,
            beta0=body.beta0,
            level=body.level,
            n_draws=body.n_draws,
            idempotency_key=body.idempotency_key,
        )

    return app
