"""Corpus ingestion, stratified sampling, and the append-only run store.

A run directory holds ``manifest.json`` plus ``records.jsonl``.  Records are
the authoritative event log (append-only, monotone sequence numbers); the
manifest is a derived cache of static run configuration plus per-case
status, rebuilt by replay whenever it lags the log.  Timestamps come from
an injectable clock; when no clock is given the sequence number doubles as
a logical timestamp, which keeps mock-provider runs byte-identical across
re-runs.
"""

from __future__ import annotations

import hashlib
import json
import os
import random
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Iterator, Mapping

from .argument import ClinicalCase
from .errors import DuplicateId, NTooLarge, ParseError, StatusConflict, StoreIOError, UnknownRun
from .hashing import stable_int

RECORD_KINDS = ("candidate_set", "fusion", "score_sheet", "rating")

CASE_STATUSES = ("pending", "stage1", "stage2", "stage3", "scored", "rejected")
_STATUS_ORDER = {"pending": 0, "stage1": 1, "stage2": 2, "stage3": 3, "scored": 4}


@dataclass(frozen=True)
class Corpus:
    cases: tuple[ClinicalCase, ...]
    source_path: str
    content_hash: str

    def __len__(self) -> int:
        return len(self.cases)

    def by_id(self, case_id: str) -> ClinicalCase:
        for case in self.cases:
            if case.id == case_id:
                return case
        raise KeyError(case_id)


@dataclass(frozen=True)
class RecordRef:
    seq: int
    kind: str


def load_cases(path: str | Path, field_map: Mapping[str, str] | None = None) -> Corpus:
    """Load a line-delimited JSON corpus.

    ``field_map`` renames arbitrary source columns onto the expected fields
    ({source_key: expected_field}).  Duplicate ids and unparseable lines are
    hard errors reported with their line number.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise StoreIOError(f"cannot read corpus file {path}: {exc}") from exc
    content_hash = hashlib.sha256(data).hexdigest()
    cases: list[ClinicalCase] = []
    seen: set[str] = set()
    for line_no, line in enumerate(data.decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ParseError(line_no, f"line {line_no}: invalid JSON ({exc})") from exc
        if not isinstance(raw, dict):
            raise ParseError(line_no, f"line {line_no}: expected a JSON object")
        if field_map:
            raw = {field_map.get(k, k): v for k, v in raw.items()}
        missing = [f for f in ("id", "presentation", "gold_diagnosis") if not raw.get(f)]
        if missing:
            raise ParseError(line_no, f"line {line_no}: missing fields {missing}")
        # Extra source columns are ignored so arbitrary corpora load directly.
        try:
            case = ClinicalCase(
                id=str(raw["id"]),
                specialty=raw.get("specialty"),
                presentation=raw["presentation"],
                gold_diagnosis=raw["gold_diagnosis"],
            )
        except (TypeError, ValueError) as exc:
            raise ParseError(line_no, f"line {line_no}: {exc}") from exc
        if case.id in seen:
            raise DuplicateId(f"line {line_no}: duplicate case id {case.id!r}")
        seen.add(case.id)
        cases.append(case)
    return Corpus(cases=tuple(cases), source_path=str(path), content_hash=content_hash)


def sample_subset(corpus: Corpus, n: int = 50, seed: int = 0, stratify_by: str = "specialty") -> list[str]:
    """Stratified sample of case ids, proportional by largest remainder.

    Cases lacking the stratum field form their own stratum.  Selection
    within a stratum uses a substream seeded from (seed, stratum) so that
    untouched strata are stable when other strata change.
    """
    if n > len(corpus.cases):
        raise NTooLarge(f"requested {n} cases but corpus has {len(corpus.cases)}")
    strata: dict[str, list[str]] = {}
    for case in corpus.cases:
        key = getattr(case, stratify_by, None) or ""
        strata.setdefault(key, []).append(case.id)
    total = len(corpus.cases)
    floors: dict[str, int] = {}
    remainders: list[tuple[float, str]] = []
    for name, ids in strata.items():
        quota = n * len(ids) / total
        floors[name] = int(quota)
        remainders.append((quota - int(quota), name))
    short = n - sum(floors.values())
    for _, name in sorted(remainders, key=lambda t: (-t[0], t[1]))[:short]:
        floors[name] += 1
    selected: list[str] = []
    for name in sorted(strata):
        ids = sorted(strata[name])
        k = floors[name]
        rng = random.Random(stable_int("sample", seed, name))
        selected.extend(sorted(rng.sample(ids, k)))
    return sorted(selected)


def _dumps(value: Any) -> str:
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


class RunStore:
    """Append-only store rooted at one directory, one subdirectory per run."""

    def __init__(self, root: str | Path, clock: Callable[[], float] | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._clock = clock
        self._lock = threading.Lock()
        self._manifests: dict[str, dict[str, Any]] = {}

    # -- paths --

    def run_dir(self, run_id: str) -> Path:
        return self.root / run_id

    def _manifest_path(self, run_id: str) -> Path:
        return self.run_dir(run_id) / "manifest.json"

    def _records_path(self, run_id: str) -> Path:
        return self.run_dir(run_id) / "records.jsonl"

    def run_exists(self, run_id: str) -> bool:
        return self._manifest_path(run_id).exists()

    def list_runs(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if (p / "manifest.json").exists())

    # -- lifecycle --

    def create_run(
        self,
        run_id: str,
        *,
        corpus_hash: str,
        corpus_path: str,
        case_ids: list[str],
        seeds: Mapping[str, int],
        budgets: Mapping[str, int],
        providers: Mapping[str, str],
    ) -> dict[str, Any]:
        if self.run_exists(run_id):
            raise StoreIOError(f"run {run_id!r} already exists")
        self.run_dir(run_id).mkdir(parents=True, exist_ok=True)
        ts = self._now(seq=0)
        manifest = {
            "run_id": run_id,
            "corpus_hash": corpus_hash,
            "corpus_path": corpus_path,
            "case_ids": sorted(case_ids),
            "seeds": dict(seeds),
            "budgets": dict(budgets),
            "providers": dict(providers),
            "case_status": {cid: "pending" for cid in case_ids},
            "seq": 0,
            "created_at": ts,
            "updated_at": ts,
        }
        self._write_manifest(run_id, manifest)
        self._records_path(run_id).touch()
        self._manifests[run_id] = manifest
        return manifest

    def ensure_run(self, run_id: str, *, corpus_hash: str, **kwargs: Any) -> dict[str, Any]:
        """Open a run, creating it if absent; an existing run must match the corpus."""
        if self.run_exists(run_id):
            manifest = self.load_manifest(run_id)
            if manifest["corpus_hash"] != corpus_hash:
                raise StoreIOError(
                    f"run {run_id!r} was created from a different corpus "
                    f"({manifest['corpus_hash'][:12]}… != {corpus_hash[:12]}…)"
                )
            return manifest
        return self.create_run(run_id, corpus_hash=corpus_hash, **kwargs)

    def load_manifest(self, run_id: str) -> dict[str, Any]:
        """Read the manifest, replaying the record log if the cache is stale."""
        cached = self._manifests.get(run_id)
        if cached is not None:
            return cached
        path = self._manifest_path(run_id)
        if not path.exists():
            raise UnknownRun(f"no such run: {run_id!r}")
        manifest = json.loads(path.read_text(encoding="utf-8"))
        last_seq = self._last_seq(run_id)
        if last_seq > manifest.get("seq", 0):
            manifest = self.replay_manifest(run_id)
            self._write_manifest(run_id, manifest)
        self._manifests[run_id] = manifest
        return manifest

    def replay_manifest(self, run_id: str) -> dict[str, Any]:
        """Recompute derived manifest state by folding the record log."""
        path = self._manifest_path(run_id)
        if not path.exists():
            raise UnknownRun(f"no such run: {run_id!r}")
        manifest = json.loads(path.read_text(encoding="utf-8"))
        manifest["case_status"] = {cid: "pending" for cid in manifest["case_ids"]}
        manifest["seq"] = 0
        manifest["updated_at"] = manifest["created_at"]
        for record in self.iter_records(run_id):
            self._fold(manifest, record, strict=False)
        return manifest

    # -- records --

    def append_record(self, run_id: str, kind: str, payload: Mapping[str, Any]) -> RecordRef:
        if kind not in RECORD_KINDS:
            raise ValueError(f"unknown record kind {kind!r}")
        with self._lock:
            manifest = self.load_manifest(run_id)
            seq = manifest["seq"] + 1
            record = {"seq": seq, "ts": self._now(seq), "kind": kind, "payload": dict(payload)}
            # Validate the transition before touching the log.
            self._fold(dict(manifest, case_status=dict(manifest["case_status"])), record, strict=True)
            try:
                with open(self._records_path(run_id), "a", encoding="utf-8") as fh:
                    fh.write(_dumps(record) + "\n")
                    fh.flush()
            except OSError as exc:
                raise StoreIOError(f"cannot append to run {run_id!r}: {exc}") from exc
            self._fold(manifest, record, strict=False)
            self._write_manifest(run_id, manifest)
            return RecordRef(seq=seq, kind=kind)

    def iter_records(
        self,
        run_id: str,
        kind: str | None = None,
        case_id: str | None = None,
    ) -> Iterator[dict[str, Any]]:
        path = self._records_path(run_id)
        if not path.exists():
            if not self.run_exists(run_id):
                raise UnknownRun(f"no such run: {run_id!r}")
            return
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                record = json.loads(line)
                if kind is not None and record["kind"] != kind:
                    continue
                if case_id is not None and record["payload"].get("case_id") != case_id:
                    continue
                yield record

    def latest_fusion(self, run_id: str, case_id: str, stage: int) -> dict[str, Any] | None:
        latest: dict[str, Any] | None = None
        for record in self.iter_records(run_id, kind="fusion", case_id=case_id):
            if record["payload"].get("stage") == stage:
                latest = record["payload"]
        return latest

    def latest_ratings(self, run_id: str) -> dict[tuple[str, int], dict[str, Any]]:
        """Last-write-wins view of rating records keyed by (session, item)."""
        out: dict[tuple[str, int], dict[str, Any]] = {}
        for record in self.iter_records(run_id, kind="rating"):
            payload = record["payload"]
            out[(payload["session_id"], payload["item_index"])] = payload
        return out

    # -- internals --

    def _now(self, seq: int) -> float:
        return float(self._clock()) if self._clock is not None else float(seq)

    def _last_seq(self, run_id: str) -> int:
        last = 0
        path = self._records_path(run_id)
        if path.exists():
            with open(path, "r", encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        last = json.loads(line)["seq"]
        return last

    def _fold(self, manifest: dict[str, Any], record: Mapping[str, Any], strict: bool) -> None:
        """Apply one record to manifest state; ``strict`` enforces monotonicity."""
        payload = record["payload"]
        case_id = payload.get("case_id")
        new_status: str | None = None
        if record["kind"] == "fusion":
            status = payload.get("status")
            new_status = "rejected" if status == "rejected" else f"stage{payload.get('stage')}"
        elif record["kind"] == "score_sheet":
            new_status = "scored"
        if case_id is not None and case_id in manifest["case_status"]:
            current = manifest["case_status"][case_id]
            if strict and current == "rejected" and record["kind"] in ("candidate_set", "fusion", "score_sheet"):
                raise StatusConflict(f"case {case_id!r} is rejected; no further pipeline records accepted")
            if new_status is not None:
                if current == "rejected":
                    if strict and new_status != "rejected":
                        raise StatusConflict(f"case {case_id!r} cannot leave rejected status")
                elif new_status == "rejected":
                    manifest["case_status"][case_id] = "rejected"
                else:
                    if strict and _STATUS_ORDER[new_status] < _STATUS_ORDER[current]:
                        raise StatusConflict(
                            f"case {case_id!r} status cannot move backwards ({current} -> {new_status})"
                        )
                    if _STATUS_ORDER[new_status] >= _STATUS_ORDER[current]:
                        manifest["case_status"][case_id] = new_status
        manifest["seq"] = record["seq"]
        manifest["updated_at"] = record["ts"]

    def _write_manifest(self, run_id: str, manifest: Mapping[str, Any]) -> None:
        path = self._manifest_path(run_id)
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(_dumps(manifest) + "\n", encoding="utf-8")
        os.replace(tmp, path)
