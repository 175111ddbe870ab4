"""Rubric-guided judging and robust multi-judge aggregation.

Each judge returns six 1.0-5.0 scores (one per argument component) in a
strict JSON object.  Per dimension, valid judge scores are rounded to the
1-5 Likert scale and aggregated: with three judges, a spread of 3 or more
falls back to the median, otherwise the half-up-rounded mean is used; with
two judges the rounded mean; with one, that score.  Malformed judge output
drops that instance; if a whole panel is malformed it is re-queried once.

TrustScore averages normalized scores over {D, R, W, B, Q} scaled to
0-100; the final-diagnosis score Y feeds Accuracy only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Iterable, Mapping, Sequence

from .argument import ClinicalCase, StageTrajectory, canonical_serialize
from .errors import AllJudgesFailed, EmptyInput, MalformedVerdict, OutOfRange
from .gateway import JUDGE_PROFILE, DecodingParams, Gateway, PromptRequest, extract_json
from .prompts import judge_focus

TRUST_DIMENSIONS = ("D", "R", "W", "B", "Q")
ALL_DIMENSIONS = ("D", "R", "W", "B", "Q", "Y")

JUDGE_FIELDS = {
    "D": "data_score",
    "R": "rebuttal_score",
    "W": "warrant_score",
    "B": "backing_score",
    "Q": "qualifier_score",
    "Y": "claim_correct",
}

_SCORE_FIELDS = tuple(JUDGE_FIELDS[d] for d in ALL_DIMENSIONS)

#: High-disagreement threshold: spread at or above this falls back to the median.
DISAGREEMENT_SPREAD = 3


@dataclass(frozen=True)
class JudgeVerdict:
    data_score: float
    rebuttal_score: float
    warrant_score: float
    backing_score: float
    qualifier_score: float
    claim_correct: float
    overall_analysis: str = ""

    def score_for(self, dim: str) -> float:
        return getattr(self, JUDGE_FIELDS[dim])

    def as_dict(self) -> dict[str, Any]:
        out = {name: getattr(self, name) for name in _SCORE_FIELDS}
        out["overall_analysis"] = self.overall_analysis
        return out


@dataclass(frozen=True)
class DimensionScore:
    dim: str
    raw: tuple[int, ...]
    aggregated: int
    n_valid: int


@dataclass(frozen=True)
class CaseScoreSheet:
    case_id: str
    dims: Mapping[str, DimensionScore]
    normalized: Mapping[str, float]
    verdicts: tuple[JudgeVerdict, ...] = ()


@dataclass(frozen=True)
class TrustSummary:
    trust_score: float
    per_component: Mapping[str, float]


def parse_judge_output(raw_text: str) -> JudgeVerdict:
    """Strict parse of one judge completion.

    Any missing, non-numeric, or out-of-range score field raises
    :class:`MalformedVerdict`; the caller drops that judge instance.
    """
    try:
        doc = extract_json(raw_text, mode="strict")
    except Exception as exc:
        raise MalformedVerdict(f"judge output is not a single JSON object: {exc}") from exc
    scores: dict[str, float] = {}
    for name in _SCORE_FIELDS:
        value = doc.get(name)
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise MalformedVerdict(f"judge output missing numeric field {name!r}")
        if not (1.0 <= float(value) <= 5.0):
            raise MalformedVerdict(f"judge field {name!r} out of range: {value}")
        scores[name] = float(value)
    analysis = doc.get("overall_analysis", "")
    if not isinstance(analysis, str):
        analysis = str(analysis)
    return JudgeVerdict(overall_analysis=analysis, **scores)


def _half_up(value: Fraction) -> int:
    return math.floor(value + Fraction(1, 2))


def to_likert(score: float) -> int:
    """Round a 1.0-5.0 judge score half-up to the integer Likert scale."""
    if not (1.0 <= score <= 5.0):
        raise OutOfRange(f"score must be in [1, 5], got {score}")
    return min(5, max(1, math.floor(score + 0.5)))


def aggregate_judges(scores: Sequence[int]) -> int:
    """Aggregate 1-3 integer Likert scores into one."""
    if not scores:
        raise EmptyInput("no judge scores to aggregate")
    if len(scores) > 3:
        raise ValueError(f"at most 3 judge scores supported, got {len(scores)}")
    for s in scores:
        if isinstance(s, bool) or not isinstance(s, int) or not (1 <= s <= 5):
            raise OutOfRange(f"judge scores must be integers in [1, 5], got {s!r}")
    if len(scores) == 1:
        return scores[0]
    if len(scores) == 3:
        ordered = sorted(scores)
        if ordered[2] - ordered[0] >= DISAGREEMENT_SPREAD:
            return ordered[1]
    value = _half_up(Fraction(sum(scores), len(scores)))
    return min(5, max(1, value))


def _judge_request(
    case: ClinicalCase, traj_text: str, dim: str | None, decoding: "DecodingParams | None" = None
) -> PromptRequest:
    return PromptRequest(
        template_id="judge",
        bindings={
            "A": case.gold_diagnosis,
            "model_output": traj_text,
            "FOCUS": judge_focus(dim),
        },
        decoding=decoding or JUDGE_PROFILE,
        role_tag="judge",
    )


def _judge_panel(
    gateway: Gateway,
    request: PromptRequest,
    n_judges: int,
    dim: str | None,
) -> list[JudgeVerdict]:
    """Query n independent judges; on a fully malformed panel, retry once."""
    for round_no in (0, 1):
        verdicts: list[JudgeVerdict] = []
        for i in range(n_judges):
            result = gateway.complete(request, candidate_index=round_no * n_judges + i)
            try:
                verdicts.append(parse_judge_output(result.raw_text))
            except MalformedVerdict:
                continue
        if verdicts:
            return verdicts
    raise AllJudgesFailed(dim)


def judge_dimension(
    gateway: Gateway,
    case: ClinicalCase,
    traj_text: str | bytes,
    dim: str,
    n_judges: int = 3,
    decoding: "DecodingParams | None" = None,
) -> tuple[DimensionScore, list[JudgeVerdict]]:
    """Score one dimension of a (possibly partial) trajectory.

    Returns the aggregated score together with the valid raw verdicts so
    callers can persist them before aggregation.  ``decoding`` overrides the
    default judge profile (e.g. a tighter token budget).
    """
    if dim not in ALL_DIMENSIONS:
        raise ValueError(f"unknown dimension {dim!r}")
    if n_judges not in (1, 2, 3):
        raise ValueError("n_judges must be 1, 2 or 3")
    text = traj_text.decode("utf-8") if isinstance(traj_text, bytes) else traj_text
    request = _judge_request(case, text, dim, decoding)
    verdicts = _judge_panel(gateway, request, n_judges, dim)
    raw = tuple(to_likert(v.score_for(dim)) for v in verdicts)
    score = DimensionScore(dim=dim, raw=raw, aggregated=aggregate_judges(list(raw)), n_valid=len(raw))
    return score, verdicts


def score_case(
    gateway: Gateway,
    case: ClinicalCase,
    traj: StageTrajectory,
    n_judges: int = 3,
    decoding: "DecodingParams | None" = None,
) -> CaseScoreSheet:
    """Full six-dimension scoring of a stage-3 trajectory.

    One full-output call per judge instance; fields are split per dimension
    and each dimension is aggregated independently.
    """
    if traj.stage != 3:
        raise ValueError("score_case requires a stage-3 trajectory")
    text = canonical_serialize(traj).decode("utf-8")
    request = _judge_request(case, text, None, decoding)
    verdicts = _judge_panel(gateway, request, n_judges, "D")
    dims: dict[str, DimensionScore] = {}
    normalized: dict[str, float] = {}
    for dim in ALL_DIMENSIONS:
        raw = tuple(to_likert(v.score_for(dim)) for v in verdicts)
        agg = aggregate_judges(list(raw))
        dims[dim] = DimensionScore(dim=dim, raw=raw, aggregated=agg, n_valid=len(raw))
        normalized[dim] = (agg - 1) / 4
    return CaseScoreSheet(case_id=case.id, dims=dims, normalized=normalized, verdicts=tuple(verdicts))


def trust_score(sheets: Sequence[CaseScoreSheet]) -> TrustSummary:
    """Average normalized quality over {D, R, W, B, Q}, scaled to 0-100.

    The per-component breakdown covers all six dimensions, but Y never
    enters the aggregate.
    """
    if not sheets:
        raise EmptyInput("no score sheets")
    n = len(sheets)
    total = sum(sheet.normalized[d] for sheet in sheets for d in TRUST_DIMENSIONS)
    per_component = {
        d: 100.0 * sum(sheet.normalized[d] for sheet in sheets) / n for d in ALL_DIMENSIONS
    }
    return TrustSummary(trust_score=100.0 * total / (5 * n), per_component=per_component)


def trust_score_from_means(means: Sequence[float]) -> float:
    """TrustScore from five per-component mean Likert scores (D, R, W, B, Q).

    Normalization is affine, so the mean of normalized scores equals the
    normalized mean; summary tables of component means can be checked
    directly against full per-case aggregation.
    """
    if len(means) != len(TRUST_DIMENSIONS):
        raise ValueError(f"expected {len(TRUST_DIMENSIONS)} component means, got {len(means)}")
    for m in means:
        if not (1.0 <= m <= 5.0):
            raise OutOfRange(f"component mean out of range: {m}")
    return 100.0 * sum((m - 1) / 4 for m in means) / len(means)


def accuracy(claim_scores: Sequence[int]) -> float:
    """Mean normalized final-diagnosis score, scaled to 0-100."""
    if not claim_scores:
        raise EmptyInput("no claim scores")
    for s in claim_scores:
        if isinstance(s, bool) or not isinstance(s, int) or not (1 <= s <= 5):
            raise OutOfRange(f"claim scores must be integers in [1, 5], got {s!r}")
    return 100.0 * sum((s - 1) / 4 for s in claim_scores) / len(claim_scores)


def sheet_to_record(sheet: CaseScoreSheet, judge_raw_refs: Iterable[int] = ()) -> dict[str, Any]:
    """JSON-able score-sheet row for the per-case sheet file."""
    return {
        "case_id": sheet.case_id,
        "dims": {
            d: {"raw": list(s.raw), "aggregated": s.aggregated, "n_valid": s.n_valid}
            for d, s in sheet.dims.items()
        },
        "normalized": dict(sheet.normalized),
        "judge_raw_refs": list(judge_raw_refs),
    }


def sheet_from_record(record: Mapping[str, Any]) -> CaseScoreSheet:
    dims = {
        d: DimensionScore(dim=d, raw=tuple(v["raw"]), aggregated=v["aggregated"], n_valid=v["n_valid"])
        for d, v in record["dims"].items()
    }
    return CaseScoreSheet(
        case_id=record["case_id"],
        dims=dims,
        normalized=dict(record["normalized"]),
    )


def report_from_sheets(sheets: Sequence[CaseScoreSheet]) -> dict[str, Any]:
    """Aggregate report: {n_cases, trust_score, accuracy, per_component}."""
    summary = trust_score(sheets)
    acc = accuracy([sheet.dims["Y"].aggregated for sheet in sheets])
    return {
        "n_cases": len(sheets),
        "trust_score": summary.trust_score,
        "accuracy": acc,
        "per_component": dict(summary.per_component),
    }


def per_case_trust(sheet: CaseScoreSheet) -> float:
    """Single-case TrustScore contribution (0-100)."""
    return 100.0 * sum(sheet.normalized[d] for d in TRUST_DIMENSIONS) / len(TRUST_DIMENSIONS)


def per_case_accuracy(sheet: CaseScoreSheet) -> float:
    return 100.0 * sheet.normalized["Y"]
