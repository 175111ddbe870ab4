"""Toulmin-style diagnostic argument model.

A trajectory carries up to six components:

======  =======================================================
``D``   clinical evidence items extracted from the presentation
``R``   ranked differential diagnosis with per-entry reasons
``W``   pathophysiological rationale for the top diagnosis
``B``   principled justification ruling out alternatives
``Q``   confidence / uncertainty / missing-information qualifier
``Y``   final diagnosis
======  =======================================================

Stage 1 holds {D, R}, stage 2 adds {W, B}, stage 3 adds {Q, Y}.  Parsing is
strict: unknown keys, wrong types, out-of-stage fields, malformed rebuttal
lists, and a missing evidence-based-revision marker are all hard errors.
The canonical byte serialization produced here is the interchange format
used by the run store, dataset emission, and the rating service.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any, Mapping

from .errors import SchemaViolation, WrongStageFields

CONFIDENCE_LEVELS = ("low", "medium", "high")
REVISION_MARKER = "[Evidence-Based Revision]"

FIELD_ORDER = ("D", "R", "W", "B", "Q", "Y")
STAGE_FIELDS = {
    1: ("D", "R"),
    2: ("D", "R", "W", "B"),
    3: ("D", "R", "W", "B", "Q", "Y"),
}
QUALIFIER_KEYS = ("confidence", "uncertainty", "missing_info")
REBUTTAL_ENTRY_KEYS = ("dx", "rank", "reason")

MIN_REBUTTAL_ENTRIES = 3
MAX_REBUTTAL_ENTRIES = 5

_WS_RUN = re.compile(r"\s+")
_TERMINAL_PUNCT = ".,;:!"


@dataclass(frozen=True)
class ClinicalCase:
    """One diagnostic case: free-text presentation plus the gold diagnosis."""

    id: str
    presentation: str
    gold_diagnosis: str
    specialty: str | None = None

    def __post_init__(self):
        if not self.id or not self.id.strip():
            raise ValueError("case id must be non-empty")
        if not self.presentation or not self.presentation.strip():
            raise ValueError(f"case {self.id}: presentation must be non-empty")


@dataclass(frozen=True)
class DifferentialEntry:
    dx: str
    rank: int
    reason: str


@dataclass(frozen=True)
class Qualifier:
    confidence: str
    uncertainty: tuple[str, ...]
    missing_info: tuple[str, ...]


@dataclass(frozen=True)
class StageTrajectory:
    stage: int
    D: tuple[str, ...]
    R: tuple[DifferentialEntry, ...]
    W: str | None = None
    B: str | None = None
    Q: Qualifier | None = None
    Y: str | None = None


@dataclass(frozen=True)
class Violation:
    path: str
    code: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, path: str, code: str, message: str) -> None:
        self.violations.append(Violation(path, code, message))


@dataclass(frozen=True)
class RevisionCheck:
    i_rev: bool
    report: ValidationReport


def normalize_diagnosis(text: str) -> str:
    """Canonical form for diagnosis comparison.

    Lowercases, collapses whitespace runs to one space, strips leading and
    trailing whitespace and any trailing run of ``.,;:!``.  Internal hyphens
    and punctuation are preserved.  Idempotent; empty input stays empty.
    """
    out = _WS_RUN.sub(" ", text.lower()).strip()
    return out.rstrip(_TERMINAL_PUNCT).rstrip()


def normalize_evidence(text: str) -> str:
    """Canonical form used only for duplicate detection of evidence items.

    Same rule set as :func:`normalize_diagnosis`; stored items keep their
    original text.
    """
    return normalize_diagnosis(text)


def _check_evidence(value: Any, report: ValidationReport) -> tuple[str, ...] | None:
    if not isinstance(value, list):
        report.add("D", "bad_type", "D must be a list of strings")
        return None
    items: list[str] = []
    seen: set[str] = set()
    ok = True
    for i, item in enumerate(value):
        if not isinstance(item, str) or not item.strip():
            report.add(f"D[{i}]", "empty_item", "evidence items must be non-empty strings")
            ok = False
            continue
        key = normalize_evidence(item)
        if key in seen:
            report.add(f"D[{i}]", "duplicate_evidence", f"duplicate evidence item: {item!r}")
            ok = False
            continue
        seen.add(key)
        items.append(item)
    return tuple(items) if ok else None


def _check_rebuttal(value: Any, report: ValidationReport) -> tuple[DifferentialEntry, ...] | None:
    if not isinstance(value, list):
        report.add("R", "bad_type", "R must be a list of objects")
        return None
    if not (MIN_REBUTTAL_ENTRIES <= len(value) <= MAX_REBUTTAL_ENTRIES):
        report.add(
            "R",
            "rebuttal_size",
            f"R must have {MIN_REBUTTAL_ENTRIES}-{MAX_REBUTTAL_ENTRIES} entries, got {len(value)}",
        )
        return None
    entries: list[DifferentialEntry] = []
    ok = True
    for i, entry in enumerate(value):
        if not isinstance(entry, Mapping):
            report.add(f"R[{i}]", "bad_type", "rebuttal entries must be objects")
            ok = False
            continue
        extra = set(entry) - set(REBUTTAL_ENTRY_KEYS)
        if extra:
            report.add(f"R[{i}]", "unknown_key", f"unexpected keys: {sorted(extra)}")
            ok = False
        dx = entry.get("dx")
        rank = entry.get("rank")
        reason = entry.get("reason")
        if not isinstance(dx, str) or not dx.strip():
            report.add(f"R[{i}].dx", "empty_item", "dx must be a non-empty string")
            ok = False
        if isinstance(rank, bool) or not isinstance(rank, int) or rank < 1:
            report.add(f"R[{i}].rank", "bad_type", "rank must be a positive integer")
            ok = False
        if not isinstance(reason, str) or not reason.strip():
            report.add(f"R[{i}].reason", "empty_item", "reason must be a non-empty string")
            ok = False
        if ok:
            entries.append(DifferentialEntry(dx=dx, rank=rank, reason=reason))
    if not ok:
        return None
    ranks = sorted(e.rank for e in entries)
    if len(set(ranks)) != len(ranks):
        report.add("R", "duplicate_rank", f"duplicate ranks: {ranks}")
        return None
    if ranks != list(range(1, len(entries) + 1)):
        report.add("R", "rank_gap", f"ranks must be exactly 1..{len(entries)}, got {ranks}")
        return None
    seen_dx: set[str] = set()
    for e in entries:
        key = normalize_diagnosis(e.dx)
        if key in seen_dx:
            report.add("R", "duplicate_dx", f"duplicate diagnosis: {e.dx!r}")
            return None
        seen_dx.add(key)
    return tuple(sorted(entries, key=lambda e: e.rank))


def _check_text(name: str, value: Any, report: ValidationReport) -> str | None:
    if not isinstance(value, str):
        report.add(name, "bad_type", f"{name} must be a string")
        return None
    if not value.strip():
        report.add(name, "empty_item", f"{name} must be non-empty")
        return None
    return value


def _check_qualifier(value: Any, report: ValidationReport) -> Qualifier | None:
    if not isinstance(value, Mapping):
        report.add("Q", "bad_type", "Q must be an object")
        return None
    extra = set(value) - set(QUALIFIER_KEYS)
    if extra:
        report.add("Q", "qualifier_extra_field", f"Q may contain only {list(QUALIFIER_KEYS)}; extra: {sorted(extra)}")
        return None
    missing = set(QUALIFIER_KEYS) - set(value)
    if missing:
        report.add("Q", "qualifier_missing_field", f"Q missing keys: {sorted(missing)}")
        return None
    confidence = value["confidence"]
    if confidence not in CONFIDENCE_LEVELS:
        report.add("Q.confidence", "bad_confidence", f"confidence must be one of {list(CONFIDENCE_LEVELS)}")
        return None
    ok = True
    lists: dict[str, tuple[str, ...]] = {}
    for key in ("uncertainty", "missing_info"):
        items = value[key]
        if not isinstance(items, list) or any(not isinstance(x, str) for x in items):
            report.add(f"Q.{key}", "bad_type", f"{key} must be a list of strings")
            ok = False
            continue
        lists[key] = tuple(items)
    if not ok:
        return None
    return Qualifier(confidence=confidence, uncertainty=lists["uncertainty"], missing_info=lists["missing_info"])


def validate_component(dim: str, value: Any) -> ValidationReport:
    """Validate a single component value against its field schema.

    Used for candidate-level checks before any trajectory exists.  Evidence
    lists are checked leniently here (duplicates allowed: de-duplication is
    fusion's job), everything else matches the trajectory-level rules.
    """
    report = ValidationReport()
    if dim == "D":
        if not isinstance(value, list) or not value:
            report.add("D", "bad_type", "D must be a non-empty list of strings")
        else:
            for i, item in enumerate(value):
                if not isinstance(item, str) or not item.strip():
                    report.add(f"D[{i}]", "empty_item", "evidence items must be non-empty strings")
    elif dim == "R":
        _check_rebuttal(value, report)
    elif dim in ("W", "B", "Y"):
        _check_text(dim, value, report)
    elif dim == "Q":
        _check_qualifier(value, report)
    else:
        raise ValueError(f"unknown dimension {dim!r}")
    return report


def parse_argument(doc: Mapping[str, Any], stage: int) -> StageTrajectory:
    """Parse and validate a structured document into a stage trajectory.

    Raises :class:`WrongStageFields` when fields are present or absent
    contrary to the stage, and :class:`SchemaViolation` for every other
    violation; both carry a :class:`ValidationReport`.
    """
    if stage not in STAGE_FIELDS:
        raise ValueError(f"stage must be 1, 2 or 3, got {stage!r}")
    report = ValidationReport()
    if not isinstance(doc, Mapping):
        report.add("$", "bad_type", "document must be a JSON object")
        raise SchemaViolation(report)

    allowed = STAGE_FIELDS[stage]
    for key in doc:
        if key not in FIELD_ORDER:
            report.add(str(key), "unknown_key", f"unknown top-level key {key!r}")
    stage_problem = False
    for key in FIELD_ORDER:
        if key in doc and key not in allowed:
            report.add(key, "wrong_stage_fields", f"{key} must be absent at stage {stage}")
            stage_problem = True
        if key in allowed and key not in doc:
            report.add(key, "wrong_stage_fields", f"{key} is required at stage {stage}")
            stage_problem = True
    if report.violations:
        if stage_problem and all(v.code == "wrong_stage_fields" for v in report.violations):
            raise WrongStageFields(report)
        raise SchemaViolation(report)

    d_items = _check_evidence(doc["D"], report)
    r_entries = _check_rebuttal(doc["R"], report)
    w = _check_text("W", doc["W"], report) if "W" in allowed else None
    b = _check_text("B", doc["B"], report) if "B" in allowed else None
    q = _check_qualifier(doc["Q"], report) if "Q" in allowed else None
    y = _check_text("Y", doc["Y"], report) if "Y" in allowed else None
    if report.violations:
        raise SchemaViolation(report)

    traj = StageTrajectory(stage=stage, D=d_items, R=r_entries, W=w, B=b, Q=q, Y=y)
    if stage == 3:
        check = validate_revision(traj)
        if check.i_rev and not _has_revision_marker(traj.Q):
            report.add(
                "Q.uncertainty",
                "missing_revision_marker",
                f"final diagnosis revises the rank-1 differential; uncertainty[0] must begin with {REVISION_MARKER!r}",
            )
            raise SchemaViolation(report)
    return traj


def _has_revision_marker(q: Qualifier | None) -> bool:
    return bool(q and q.uncertainty and q.uncertainty[0].startswith(REVISION_MARKER))


def rank1_dx(traj: StageTrajectory) -> str:
    for entry in traj.R:
        if entry.rank == 1:
            return entry.dx
    raise ValueError("trajectory has no rank-1 differential entry")


def validate_revision(traj: StageTrajectory) -> RevisionCheck:
    """Check the evidence-based-revision encoding of a stage-3 trajectory.

    ``i_rev`` is true iff the normalized final diagnosis differs from the
    normalized rank-1 differential.  The report fails when the marker is
    missing despite a revision, or present without one.
    """
    if traj.stage != 3:
        raise ValueError("validate_revision requires a stage-3 trajectory")
    i_rev = normalize_diagnosis(traj.Y) != normalize_diagnosis(rank1_dx(traj))
    report = ValidationReport()
    marker = _has_revision_marker(traj.Q)
    if i_rev and not marker:
        report.add(
            "Q.uncertainty",
            "missing_revision_marker",
            f"uncertainty[0] must begin with {REVISION_MARKER!r} when the diagnosis is revised",
        )
    if not i_rev and marker:
        report.add(
            "Q.uncertainty",
            "spurious_revision_marker",
            "revision marker present but the final diagnosis matches the rank-1 differential",
        )
    return RevisionCheck(i_rev=i_rev, report=report)


def to_document(traj: StageTrajectory) -> dict[str, Any]:
    """Plain JSON-able document with fixed key order D, R, W, B, Q, Y."""
    doc: dict[str, Any] = {
        "D": list(traj.D),
        "R": [{"dx": e.dx, "rank": e.rank, "reason": e.reason} for e in traj.R],
    }
    if traj.W is not None:
        doc["W"] = traj.W
    if traj.B is not None:
        doc["B"] = traj.B
    if traj.Q is not None:
        doc["Q"] = {
            "confidence": traj.Q.confidence,
            "uncertainty": list(traj.Q.uncertainty),
            "missing_info": list(traj.Q.missing_info),
        }
    if traj.Y is not None:
        doc["Y"] = traj.Y
    return doc


def canonical_serialize(traj: StageTrajectory) -> bytes:
    """Deterministic compact UTF-8 serialization; absent fields omitted."""
    return json.dumps(to_document(traj), separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def infer_stage(doc: Mapping[str, Any]) -> int:
    if "Y" in doc or "Q" in doc:
        return 3
    if "W" in doc or "B" in doc:
        return 2
    return 1


def parse_canonical(data: bytes | str, stage: int | None = None) -> StageTrajectory:
    """Inverse of :func:`canonical_serialize`; stage inferred when omitted."""
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    doc = json.loads(text)
    return parse_argument(doc, stage if stage is not None else infer_stage(doc))


def project(traj: StageTrajectory, stage: int) -> StageTrajectory:
    """Lower-stage view of a trajectory (monotone embedding)."""
    if stage > traj.stage:
        raise ValueError(f"cannot project stage-{traj.stage} trajectory up to stage {stage}")
    if stage == traj.stage:
        return traj
    keep = STAGE_FIELDS[stage]
    return StageTrajectory(
        stage=stage,
        D=traj.D,
        R=traj.R,
        W=traj.W if "W" in keep else None,
        B=traj.B if "B" in keep else None,
        Q=traj.Q if "Q" in keep else None,
        Y=traj.Y if "Y" in keep else None,
    )
