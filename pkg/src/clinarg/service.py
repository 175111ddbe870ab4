"""Blinded clinician-rating service.

A study spans several runs (methods) over one shared corpus; a seeded
subset of cases is sampled and every rater gets their own shuffled queue of
(run, case) pairs.  Served items expose exactly {item_index, presentation,
trajectory} — never a run id, provider, or method name — so raters stay
blinded.  Submissions are persisted through the append-only run store
(last write per (session, item) wins, so resubmission is an idempotent
overwrite) and the session cursor is derived from stored submissions,
which makes sessions resumable across service restarts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .argument import parse_canonical, to_document
from .errors import (
    ClinargError,
    IncompleteStudy,
    InsufficientCases,
    ItemNotServed,
    OutOfRange,
    RunMismatch,
    SessionComplete,
    UnknownRun,
    UnknownSession,
)
from .hashing import stable_digest, stable_int
from .scoring import ALL_DIMENSIONS, TRUST_DIMENSIONS
from .store import Corpus, RunStore, sample_subset
import random


@dataclass(frozen=True)
class StudyDescriptor:
    study_id: str
    runs: tuple[str, ...]
    case_ids: tuple[str, ...]
    raters: tuple[str, ...]
    sessions: Mapping[str, str]  # rater_id -> session_id
    seed: int
    allow_partial: bool

    def as_dict(self) -> dict[str, Any]:
        return {
            "study_id": self.study_id,
            "runs": list(self.runs),
            "case_ids": list(self.case_ids),
            "raters": list(self.raters),
            "sessions": dict(self.sessions),
            "seed": self.seed,
            "allow_partial": self.allow_partial,
        }


class StudyManager:
    """Study/session state on top of the run store and corpus."""

    def __init__(self, store: RunStore, corpus: Corpus):
        self.store = store
        self.corpus = corpus
        self._studies_dir = Path(store.root) / "studies"

    # -- study lifecycle --

    def create_study(
        self,
        runs: list[str],
        n_cases: int = 50,
        n_raters: int = 3,
        seed: int = 0,
        allow_partial: bool = False,
    ) -> StudyDescriptor:
        if not runs:
            raise RunMismatch("a study needs at least one run")
        if n_raters < 1:
            raise ValueError("n_raters must be >= 1")
        manifests = {}
        for run_id in runs:
            manifests[run_id] = self.store.load_manifest(run_id)
        hashes = {m["corpus_hash"] for m in manifests.values()}
        if len(hashes) != 1:
            raise RunMismatch("all runs in a study must share one corpus")
        if hashes != {self.corpus.content_hash}:
            raise RunMismatch("study runs were built from a different corpus than the one loaded")
        case_ids = sample_subset(self.corpus, n=n_cases, seed=seed)
        for run_id in runs:
            status = manifests[run_id]["case_status"]
            missing = [cid for cid in case_ids if status.get(cid) != "scored"]
            if missing:
                raise InsufficientCases(
                    f"run {run_id!r} lacks scored stage-3 trajectories for {len(missing)} sampled case(s)"
                )
        study_id = stable_digest("study", sorted(runs), case_ids, seed)[:12]
        raters = tuple(f"rater{i + 1}" for i in range(n_raters))
        sessions = {rater: stable_digest("session", study_id, rater)[:16] for rater in raters}
        descriptor = StudyDescriptor(
            study_id=study_id,
            runs=tuple(sorted(runs)),
            case_ids=tuple(case_ids),
            raters=raters,
            sessions=sessions,
            seed=seed,
            allow_partial=allow_partial,
        )
        self._studies_dir.mkdir(parents=True, exist_ok=True)
        path = self._studies_dir / f"{study_id}.json"
        path.write_text(json.dumps(descriptor.as_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return descriptor

    def load_study(self, study_id: str) -> StudyDescriptor:
        path = self._studies_dir / f"{study_id}.json"
        if not path.exists():
            raise UnknownRun(f"no such study: {study_id!r}")
        raw = json.loads(path.read_text(encoding="utf-8"))
        return StudyDescriptor(
            study_id=raw["study_id"],
            runs=tuple(raw["runs"]),
            case_ids=tuple(raw["case_ids"]),
            raters=tuple(raw["raters"]),
            sessions=dict(raw["sessions"]),
            seed=raw["seed"],
            allow_partial=raw.get("allow_partial", False),
        )

    def list_studies(self) -> list[str]:
        if not self._studies_dir.exists():
            return []
        return sorted(p.stem for p in self._studies_dir.glob("*.json"))

    def _find_session(self, session_id: str) -> tuple[StudyDescriptor, str]:
        for study_id in self.list_studies():
            study = self.load_study(study_id)
            for rater, sid in study.sessions.items():
                if sid == session_id:
                    return study, rater
        raise UnknownSession(f"no such session: {session_id!r}")

    # -- queues and cursors --

    def queue(self, study: StudyDescriptor, rater_id: str) -> list[tuple[str, str]]:
        """Deterministic per-rater presentation order of (run, case) pairs."""
        pairs = sorted((run, cid) for run in study.runs for cid in study.case_ids)
        rng = random.Random(stable_int("queue", study.seed, rater_id))
        rng.shuffle(pairs)
        return pairs

    def _submissions(self, study: StudyDescriptor, session_id: str) -> tuple[dict[int, dict[str, Any]], int]:
        """Latest submission per item index, plus the overwrite count."""
        latest: dict[int, dict[str, Any]] = {}
        raw = 0
        for run_id in study.runs:
            for record in self.store.iter_records(run_id, kind="rating"):
                payload = record["payload"]
                if payload.get("session_id") == session_id and payload.get("study_id") == study.study_id:
                    raw += 1
                    latest[payload["item_index"]] = payload
        return latest, raw - len(latest)

    def session_state(self, session_id: str) -> dict[str, Any]:
        study, rater = self._find_session(session_id)
        queue = self.queue(study, rater)
        subs, overwrites = self._submissions(study, session_id)
        cursor = 0
        while cursor in subs:
            cursor += 1
        return {
            "study": study,
            "rater_id": rater,
            "queue": queue,
            "cursor": cursor,
            "total": len(queue),
            "submitted": len(subs),
            "overwrites": overwrites,
        }

    def next_item(self, session_id: str) -> dict[str, Any]:
        """Blinded payload with exactly {item_index, presentation, trajectory}."""
        state = self.session_state(session_id)
        if state["cursor"] >= state["total"]:
            raise SessionComplete(f"session complete: {state['submitted']} submissions")
        run_id, case_id = state["queue"][state["cursor"]]
        fusion = self.store.latest_fusion(run_id, case_id, 3)
        if fusion is None or "trajectory" not in fusion:
            raise InsufficientCases(f"case {case_id!r} has no stage-3 trajectory")
        traj = parse_canonical(fusion["trajectory"], stage=3)
        return {
            "item_index": state["cursor"],
            "presentation": self.corpus.by_id(case_id).presentation,
            "trajectory": to_document(traj),
        }

    def submit_rating(
        self,
        session_id: str,
        item_index: int,
        scores: Mapping[str, int],
        comment: str | None = None,
    ) -> dict[str, Any]:
        state = self.session_state(session_id)
        study: StudyDescriptor = state["study"]
        if set(scores) != set(ALL_DIMENSIONS):
            raise OutOfRange(f"scores must cover exactly {list(ALL_DIMENSIONS)}, got {sorted(scores)}")
        for dim, value in scores.items():
            if isinstance(value, bool) or not isinstance(value, int) or not (1 <= value <= 5):
                raise OutOfRange(f"score for {dim} must be an integer in [1, 5], got {value!r}")
        if not isinstance(item_index, int) or item_index < 0 or item_index >= state["total"]:
            raise ItemNotServed(f"item {item_index} does not exist")
        if item_index > state["cursor"]:
            raise ItemNotServed(f"item {item_index} has not been served yet")
        run_id, case_id = state["queue"][item_index]
        self.store.append_record(
            run_id,
            "rating",
            {
                "study_id": study.study_id,
                "session_id": session_id,
                "rater_id": state["rater_id"],
                "item_index": item_index,
                "run_id": run_id,
                "case_id": case_id,
                "scores": {d: int(scores[d]) for d in ALL_DIMENSIONS},
                "comment": comment or "",
            },
        )
        new_state = self.session_state(session_id)
        return {"ok": True, "cursor": new_state["cursor"], "total": new_state["total"]}

    # -- summaries --

    def _all_ratings(self, study: StudyDescriptor) -> list[dict[str, Any]]:
        out: list[dict[str, Any]] = []
        session_ids = set(study.sessions.values())
        for run_id in study.runs:
            for (sid, _item), payload in self.store.latest_ratings(run_id).items():
                if sid in session_ids and payload.get("study_id") == study.study_id:
                    out.append(payload)
        return out

    def clinician_summary(self, study_id: str, partial: bool = False) -> dict[str, Any]:
        """Per-method clinician trust score, accuracy, and component means."""
        study = self.load_study(study_id)
        states = {rater: self.session_state(sid) for rater, sid in study.sessions.items()}
        complete = all(s["cursor"] >= s["total"] for s in states.values())
        if not complete and not (partial or study.allow_partial):
            raise IncompleteStudy("study has unfinished sessions; pass partial=true for a partial summary")
        ratings = self._all_ratings(study)
        methods: dict[str, Any] = {}
        for run_id in study.runs:
            per_case: dict[str, dict[str, list[int]]] = {}
            for r in ratings:
                if r["run_id"] != run_id:
                    continue
                case_scores = per_case.setdefault(r["case_id"], {d: [] for d in ALL_DIMENSIONS})
                for d in ALL_DIMENSIONS:
                    case_scores[d].append(r["scores"][d])
            case_means: dict[str, dict[str, float]] = {
                cid: {d: sum(v) / len(v) for d, v in dims.items() if v} for cid, dims in per_case.items()
            }
            rated = [cid for cid, dims in case_means.items() if len(dims) == len(ALL_DIMENSIONS)]
            if rated:
                trust = 100.0 * sum(
                    (case_means[cid][d] - 1) / 4 for cid in rated for d in TRUST_DIMENSIONS
                ) / (len(TRUST_DIMENSIONS) * len(rated))
                acc = 100.0 * sum((case_means[cid]["Y"] - 1) / 4 for cid in rated) / len(rated)
                component_means = {
                    d: sum(case_means[cid][d] for cid in rated) / len(rated) for d in ALL_DIMENSIONS
                }
            else:
                trust, acc, component_means = None, None, {}
            methods[run_id] = {
                "clinician_trust_score": trust,
                "clinician_accuracy": acc,
                "per_component": component_means,
                "n_cases_rated": len(rated),
            }
        return {
            "study_id": study_id,
            "complete": complete,
            "n_ratings": len(ratings),
            "methods": methods,
        }

    def export_matrices(self, study_id: str) -> dict[str, Any]:
        """Rater x target grids per component plus per-case clinician trust."""
        study = self.load_study(study_id)
        states = {rater: self.session_state(sid) for rater, sid in study.sessions.items()}
        complete = all(s["cursor"] >= s["total"] for s in states.values())
        ratings = self._all_ratings(study)
        by_key: dict[tuple[str, str, str], Mapping[str, int]] = {
            (r["rater_id"], r["run_id"], r["case_id"]): r["scores"] for r in ratings
        }
        targets = [f"{run}::{cid}" for run in study.runs for cid in study.case_ids]
        components: dict[str, Any] = {}
        for dim in ALL_DIMENSIONS:
            values = []
            for rater in study.raters:
                row = []
                for run in study.runs:
                    for cid in study.case_ids:
                        scores = by_key.get((rater, run, cid))
                        row.append(scores[dim] if scores else None)
                values.append(row)
            components[dim] = {
                "rater_ids": list(study.raters),
                "target_ids": targets,
                "values": values,
            }
        per_case_trust: dict[str, dict[str, float]] = {}
        for run in study.runs:
            run_trust: dict[str, float] = {}
            for cid in study.case_ids:
                cell_scores = [by_key[(rater, run, cid)] for rater in study.raters if (rater, run, cid) in by_key]
                if cell_scores:
                    means = {d: sum(s[d] for s in cell_scores) / len(cell_scores) for d in TRUST_DIMENSIONS}
                    run_trust[cid] = 100.0 * sum((m - 1) / 4 for m in means.values()) / len(means)
            per_case_trust[run] = run_trust
        overwrites = sum(self.session_state(sid)["overwrites"] for sid in study.sessions.values())
        return {
            "study_id": study_id,
            "complete": complete,
            "n_overwrites": overwrites,
            "components": components,
            "clinician_trust_per_case": per_case_trust,
        }


_HTTP_STATUS = {
    "UNKNOWN_SESSION": 404,
    "UNKNOWN_RUN": 404,
    "SESSION_COMPLETE": 409,
    "ITEM_NOT_SERVED": 409,
    "RUN_MISMATCH": 409,
    "INSUFFICIENT_CASES": 409,
    "INCOMPLETE_STUDY": 409,
    "OUT_OF_RANGE": 422,
}


def create_app(manager: StudyManager) -> FastAPI:
    app = FastAPI(title="clinarg rating service", docs_url=None, redoc_url=None)

    @app.exception_handler(ClinargError)
    async def _clinarg_error(_request: Request, exc: ClinargError):
        status = _HTTP_STATUS.get(exc.code, 400)
        return JSONResponse(status_code=status, content={"code": exc.code, "message": exc.message})

    @app.post("/studies")
    async def create_study(body: dict):
        descriptor = manager.create_study(
            runs=list(body.get("runs", [])),
            n_cases=int(body.get("n_cases", 50)),
            n_raters=int(body.get("n_raters", 3)),
            seed=int(body.get("seed", 0)),
            allow_partial=bool(body.get("allow_partial", False)),
        )
        return descriptor.as_dict()

    @app.get("/studies/{study_id}/summary")
    async def study_summary(study_id: str, partial: bool = False):
        return manager.clinician_summary(study_id, partial=partial)

    @app.get("/studies/{study_id}/export")
    async def study_export(study_id: str):
        return manager.export_matrices(study_id)

    @app.get("/sessions/{session_id}")
    async def session_status(session_id: str):
        state = manager.session_state(session_id)
        return {
            "cursor": state["cursor"],
            "total": state["total"],
            "complete": state["cursor"] >= state["total"],
        }

    @app.get("/sessions/{session_id}/next")
    async def session_next(session_id: str):
        return manager.next_item(session_id)

    @app.post("/sessions/{session_id}/ratings")
    async def session_rate(session_id: str, body: dict):
        if "item_index" not in body or "scores" not in body:
            raise OutOfRange("body must include item_index and scores")
        return manager.submit_rating(
            session_id,
            item_index=body["item_index"],
            scores=body["scores"],
            comment=body.get("comment"),
        )

    return app
