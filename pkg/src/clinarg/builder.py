"""Stage-wise trajectory construction and curriculum dataset assembly.

For each case, components are built in a fixed sequential order with
best-of-K selection: D then R (fused into the stage-1 trajectory), W then B
(stage 2), Q then Y (stage 3).  Every candidate is judged in the context of
the growing partial trajectory and the argmax wins (ties break to the
lowest generation index).  Fusion is one strategy call followed by a
deterministic post-processing pipeline: evidence de-duplication,
consistency verification (with a one-time qualifier/diagnosis regeneration
on a stage-3 conflict), and full format validation.  Everything —
candidates, scores, winners, fusion outcomes — is persisted to the run
store, so stage k reuses the stored stage k-1 result instead of rebuilding.

Datasets are cumulative: the stage-2 file contains every stage-1 record
plus the stage-2 records, and likewise for stage 3.  Cases whose fusion was
rejected are excluded from all three files and listed in the manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from . import prompts
from .argument import (
    StageTrajectory,
    ClinicalCase,
    canonical_serialize,
    normalize_diagnosis,
    normalize_evidence,
    parse_argument,
    parse_canonical,
    to_document,
    validate_component,
    validate_revision,
    STAGE_FIELDS,
)
from .errors import EmptyRun, NoValidCandidates, SchemaViolation, TrajectoryRejected
from .gateway import Gateway, PromptRequest, SAMPLING_PROFILE, extract_json
from .hashing import stable_int
from .scoring import judge_dimension
from .store import Corpus, RunStore

STAGE_NEW_DIMS: dict[int, tuple[str, str]] = {1: ("D", "R"), 2: ("W", "B"), 3: ("Q", "Y")}

DEFAULT_BUDGET = 4


@dataclass(frozen=True)
class Budgets:
    D: int = DEFAULT_BUDGET
    R: int = DEFAULT_BUDGET
    W: int = DEFAULT_BUDGET
    B: int = DEFAULT_BUDGET
    Q: int = DEFAULT_BUDGET
    Y: int = DEFAULT_BUDGET

    def get(self, dim: str) -> int:
        return getattr(self, dim)

    def as_dict(self) -> dict[str, int]:
        return {d: getattr(self, d) for d in "DRWBQY"}

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, int]) -> "Budgets":
        return cls(**{d: int(v) for d, v in mapping.items()})


@dataclass
class Candidate:
    index: int
    value: Any
    raw_text: str


@dataclass
class CandidateSet:
    dim: str
    context_ref: str
    candidates: list[Candidate] = field(default_factory=list)
    scores: list[int] = field(default_factory=list)
    raw_judge_scores: list[list[int]] = field(default_factory=list)
    failures: list[dict[str, Any]] = field(default_factory=list)


@dataclass
class FusionOutcome:
    status: str  # fused | fused_after_regen | rejected
    trajectory: StageTrajectory | None
    actions: list[dict[str, Any]] = field(default_factory=list)


def _component_json(doc: Mapping[str, Any]) -> str:
    """Partial-trajectory JSON with fields in canonical D,R,W,B,Q,Y order."""
    ordered = {k: doc[k] for k in ("D", "R", "W", "B", "Q", "Y") if k in doc}
    return json.dumps(ordered, separators=(",", ":"), ensure_ascii=False)


def _candidate_request(case: ClinicalCase, ctx: Mapping[str, Any], dim: str, seed: int) -> PromptRequest:
    return PromptRequest(
        template_id="stage_candidate",
        bindings={
            "CASE": case.presentation,
            "STAGE_CONTEXT": _component_json(ctx) if ctx else "",
            "TARGET_FIELDS": dim,
            "OUTPUT_FORMAT": prompts.output_format_for((dim,)),
        },
        decoding=SAMPLING_PROFILE.with_seed(seed),
        role_tag="strategy",
    )


def generate_candidates(
    gateway: Gateway,
    case: ClinicalCase,
    ctx: Mapping[str, Any],
    dim: str,
    budget: int,
    *,
    seed: int = 0,
) -> CandidateSet:
    """Sample ``budget`` candidate components, keeping the valid ones.

    A candidate is valid when its output is one JSON object holding exactly
    the requested field with a well-formed value.  If a full round yields
    nothing valid, one regeneration round is attempted before giving up.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1")
    request = _candidate_request(case, ctx, dim, stable_int("cand", seed, case.id, dim))
    cset = CandidateSet(dim=dim, context_ref=_component_json(ctx) if ctx else "")
    for round_no in (0, 1):
        for j in range(budget):
            index = round_no * budget + j
            raw = gateway.complete(request, candidate_index=index).raw_text
            try:
                doc = extract_json(raw, mode="tolerant")
            except Exception as exc:
                cset.failures.append({"index": index, "error": type(exc).__name__, "detail": str(exc)})
                continue
            if set(doc) != {dim}:
                cset.failures.append(
                    {"index": index, "error": "WRONG_FIELDS", "detail": f"expected only {dim!r}, got {sorted(doc)}"}
                )
                continue
            report = validate_component(dim, doc[dim])
            if not report.ok:
                cset.failures.append(
                    {"index": index, "error": "INVALID_COMPONENT", "detail": report.violations[0].message}
                )
                continue
            cset.candidates.append(Candidate(index=index, value=doc[dim], raw_text=raw))
        if cset.candidates:
            break
    if not cset.candidates:
        raise NoValidCandidates(dim)
    return cset


def score_candidates(
    gateway: Gateway,
    case: ClinicalCase,
    ctx: Mapping[str, Any],
    cset: CandidateSet,
    n_judges: int = 3,
) -> None:
    """Judge each candidate merged into the current context, in place."""
    cset.scores = []
    cset.raw_judge_scores = []
    for cand in cset.candidates:
        merged = dict(ctx)
        merged[cset.dim] = cand.value
        score, _verdicts = judge_dimension(
            gateway, case, _component_json(merged), cset.dim, n_judges=n_judges
        )
        cset.scores.append(score.aggregated)
        cset.raw_judge_scores.append(list(score.raw))


def select_best(cset: CandidateSet) -> Candidate:
    """Argmax over assigned scores; ties break to the lowest index."""
    if not cset.candidates:
        raise NoValidCandidates(cset.dim)
    if len(cset.scores) != len(cset.candidates):
        raise ValueError("candidates must be scored before selection")
    best = 0
    for i in range(1, len(cset.candidates)):
        if cset.scores[i] > cset.scores[best]:
            best = i
    return cset.candidates[best]


def winner_index(cset: CandidateSet) -> int:
    return cset.candidates.index(select_best(cset))


def _dedup_evidence(items: Sequence[Any]) -> tuple[list[Any], list[Any]]:
    kept: list[Any] = []
    removed: list[Any] = []
    seen: set[str] = set()
    for item in items:
        key = normalize_evidence(str(item))
        if key in seen:
            removed.append(item)
        else:
            seen.add(key)
            kept.append(item)
    return kept, removed


def _norm_set(values: Sequence[Any]) -> set[str]:
    return {normalize_diagnosis(str(v)) for v in values}


def _consistency_conflicts(
    doc: Mapping[str, Any],
    stage: int,
    source_evidence: set[str],
    source_dxs: set[str],
) -> list[str]:
    conflicts: list[str] = []
    evidence = doc.get("D") or []
    if not evidence:
        conflicts.append("evidence list is empty")
    if not _norm_set(evidence) <= source_evidence:
        conflicts.append("fused evidence introduces items outside the selected components")
    fused_dxs = _norm_set(e.get("dx", "") for e in doc.get("R") or [] if isinstance(e, Mapping))
    if not fused_dxs <= source_dxs:
        conflicts.append("fused differential introduces diagnoses outside the selected components")
    if stage == 3:
        y = doc.get("Y")
        if y is None or normalize_diagnosis(str(y)) not in fused_dxs:
            conflicts.append("final diagnosis is not among the differential diagnoses")
    return conflicts


def fuse(
    gateway: Gateway,
    case: ClinicalCase,
    winners: Mapping[str, Any],
    prev: StageTrajectory | None,
    stage: int,
    *,
    seed: int = 0,
) -> FusionOutcome:
    """Fuse stage winners (plus the previous trajectory) into one trajectory.

    Post-processing: (i) de-duplicate D under evidence normalization,
    (ii) verify consistency — non-empty evidence, no new evidence or
    diagnoses, and at stage 3 the claim must appear in the differential;
    a stage-3 claim conflict triggers a one-time Q/Y regeneration —
    (iii) validate the final document.  A second failure at any step yields
    ``rejected`` (with the audit trail), never an exception.
    """
    expected = set(STAGE_NEW_DIMS[stage])
    if set(winners) != expected:
        raise ValueError(f"stage {stage} fusion needs winners for {sorted(expected)}, got {sorted(winners)}")
    if stage > 1 and prev is None:
        raise ValueError(f"stage {stage} fusion requires the previous trajectory")

    source: dict[str, Any] = to_document(prev) if prev else {}
    source.update(winners)
    fields = STAGE_FIELDS[stage]
    bindings = {"CASE": case.presentation, "TARGET_FIELDS": ", ".join(fields)}
    for dim in "DRWBQY":
        bindings[f"{dim}_STAR"] = (
            json.dumps(source[dim], ensure_ascii=False) if dim in source else "null"
        )
    request = PromptRequest(
        template_id="fusion",
        bindings=bindings,
        decoding=SAMPLING_PROFILE.with_seed(stable_int("fuse", seed, case.id, stage)),
        role_tag="strategy",
    )

    actions: list[dict[str, Any]] = []
    source_evidence = _norm_set(source.get("D") or [])
    source_dxs = _norm_set(e.get("dx", "") for e in source.get("R") or [] if isinstance(e, Mapping))

    doc: dict[str, Any] | None = None
    for attempt in (0, 1):
        raw = gateway.complete(request, candidate_index=attempt).raw_text
        try:
            doc = extract_json(raw, mode="tolerant")
            break
        except Exception as exc:
            actions.append({"step": "fusion_call", "attempt": attempt, "error": str(exc)})
    if doc is None:
        actions.append({"step": "reject", "reason": "fusion output unparseable twice"})
        return FusionOutcome(status="rejected", trajectory=None, actions=actions)

    regen_used = False

    def dedup(d: dict[str, Any]) -> None:
        if isinstance(d.get("D"), list):
            kept, removed = _dedup_evidence(d["D"])
            d["D"] = kept
            if removed:
                actions.append({"step": "dedup", "removed": [str(x) for x in removed]})

    def regen(d: dict[str, Any]) -> bool:
        nonlocal regen_used
        if regen_used or stage != 3 or prev is None:
            return False
        regen_used = True
        actions.append({"step": "regenerate_qy"})
        regen_request = PromptRequest(
            template_id="regen_qy",
            bindings={
                "CASE": case.presentation,
                "STAGE_CONTEXT": canonical_serialize(prev).decode("utf-8"),
                "OUTPUT_FORMAT": prompts.output_format_for(("Q", "Y")),
            },
            decoding=SAMPLING_PROFILE.with_seed(stable_int("regen", seed, case.id)),
            role_tag="strategy",
        )
        raw = gateway.complete(regen_request).raw_text
        try:
            qy = extract_json(raw, mode="tolerant")
        except Exception as exc:
            actions.append({"step": "regenerate_qy", "error": str(exc)})
            return False
        if set(qy) != {"Q", "Y"}:
            actions.append({"step": "regenerate_qy", "error": f"expected only Q and Y, got {sorted(qy)}"})
            return False
        d["Q"] = qy["Q"]
        d["Y"] = qy["Y"]
        return True

    dedup(doc)
    conflicts = _consistency_conflicts(doc, stage, source_evidence, source_dxs)
    if conflicts:
        actions.append({"step": "consistency", "conflicts": conflicts})
        claim_only = all("final diagnosis" in c for c in conflicts)
        if claim_only and regen(doc):
            conflicts = _consistency_conflicts(doc, stage, source_evidence, source_dxs)
            if conflicts:
                actions.append({"step": "consistency", "conflicts": conflicts})
        if conflicts:
            actions.append({"step": "reject", "reason": "consistency verification failed"})
            return FusionOutcome(status="rejected", trajectory=None, actions=actions)

    for _validation_round in (0, 1):
        try:
            traj = parse_argument(doc, stage)
            if stage == 3:
                check = validate_revision(traj)
                if not check.report.ok:
                    raise SchemaViolation(check.report)
            actions.append({"step": "validate", "ok": True})
            status = "fused_after_regen" if regen_used else "fused"
            return FusionOutcome(status=status, trajectory=traj, actions=actions)
        except SchemaViolation as exc:
            actions.append(
                {"step": "validate", "ok": False, "violations": [f"{v.path}: {v.code}" for v in exc.report.violations]}
            )
            qy_only = all(v.path.startswith(("Q", "Y")) for v in exc.report.violations)
            if not (qy_only and regen(doc)):
                break
            conflicts = _consistency_conflicts(doc, stage, source_evidence, source_dxs)
            if conflicts:
                actions.append({"step": "consistency", "conflicts": conflicts})
                break
    actions.append({"step": "reject", "reason": "format validation failed"})
    return FusionOutcome(status="rejected", trajectory=None, actions=actions)


def build_trajectory(
    gateway: Gateway,
    store: RunStore,
    run_id: str,
    case: ClinicalCase,
    stage: int,
    budgets: Budgets = Budgets(),
    *,
    seed: int = 0,
    n_judges: int = 3,
) -> dict[int, StageTrajectory]:
    """Build (or resume) a case through the requested stage.

    Returns {stage_number: trajectory} for every completed stage.  Raises
    :class:`TrajectoryRejected` or :class:`NoValidCandidates` with the
    failing stage/dimension; the rejection itself is already persisted.
    """
    if stage not in (1, 2, 3):
        raise ValueError("stage must be 1, 2 or 3")
    status = store.load_manifest(run_id)["case_status"].get(case.id)
    if status == "rejected":
        # Rejection is absorbing; the store refuses further pipeline records.
        raise TrajectoryRejected(case.id, stage, f"case {case.id!r} was rejected in an earlier pass")
    result: dict[int, StageTrajectory] = {}
    prev: StageTrajectory | None = None
    for k in range(1, stage + 1):
        stored = store.latest_fusion(run_id, case.id, k)
        if stored is not None and stored.get("status") != "rejected":
            prev = parse_canonical(stored["trajectory"], stage=k)
            result[k] = prev
            continue
        ctx: dict[str, Any] = dict(to_document(prev)) if prev else {}
        winners: dict[str, Any] = {}
        for dim in STAGE_NEW_DIMS[k]:
            cset = generate_candidates(gateway, case, ctx, dim, budgets.get(dim), seed=seed)
            score_candidates(gateway, case, ctx, cset, n_judges=n_judges)
            best = select_best(cset)
            store.append_record(
                run_id,
                "candidate_set",
                {
                    "case_id": case.id,
                    "stage": k,
                    "dim": dim,
                    "context": ctx,
                    "candidates": [
                        {"index": c.index, "value": c.value, "raw_text": c.raw_text} for c in cset.candidates
                    ],
                    "scores": cset.scores,
                    "raw_judge_scores": cset.raw_judge_scores,
                    "failures": cset.failures,
                    "winner_index": winner_index(cset),
                },
            )
            winners[dim] = best.value
            ctx[dim] = best.value
        outcome = fuse(gateway, case, winners, prev, k, seed=seed)
        payload: dict[str, Any] = {
            "case_id": case.id,
            "stage": k,
            "status": outcome.status,
            "actions": outcome.actions,
        }
        if outcome.trajectory is not None:
            payload["trajectory"] = canonical_serialize(outcome.trajectory).decode("utf-8")
        store.append_record(run_id, "fusion", payload)
        if outcome.trajectory is None:
            raise TrajectoryRejected(case.id, k)
        prev = outcome.trajectory
        result[k] = prev
    return result


@dataclass(frozen=True)
class DatasetRecord:
    case_id: str
    stage: int
    instruction: str
    input: str
    output: str

    def as_dict(self) -> dict[str, Any]:
        return {
            "case_id": self.case_id,
            "stage": self.stage,
            "instruction": self.instruction,
            "input": self.input,
            "output": self.output,
        }


def _stage_instruction(case: ClinicalCase, stage: int) -> str:
    fields = STAGE_FIELDS[stage]
    return prompts.render_prompt(
        "stage_candidate",
        {
            "CASE": case.presentation,
            "STAGE_CONTEXT": "",
            "TARGET_FIELDS": ", ".join(fields),
            "OUTPUT_FORMAT": prompts.output_format_for(fields),
        },
    )


def assemble_datasets(
    store: RunStore,
    run_id: str,
    corpus: Corpus,
) -> tuple[dict[int, list[DatasetRecord]], list[str]]:
    """Cumulative curriculum datasets plus the list of excluded case ids.

    Rejected cases contribute to no dataset.  Case order follows the sorted
    manifest case-id list, so emission is reproducible.
    """
    manifest = store.load_manifest(run_id)
    rejected = sorted(cid for cid, status in manifest["case_status"].items() if status == "rejected")
    per_stage: dict[int, list[DatasetRecord]] = {1: [], 2: [], 3: []}
    any_fused = False
    for case_id in manifest["case_ids"]:
        if case_id in rejected:
            continue
        case = corpus.by_id(case_id)
        for k in (1, 2, 3):
            stored = store.latest_fusion(run_id, case_id, k)
            if stored is None or stored.get("status") == "rejected":
                break
            any_fused = True
            per_stage[k].append(
                DatasetRecord(
                    case_id=case_id,
                    stage=k,
                    instruction=_stage_instruction(case, k),
                    input=case.presentation,
                    output=stored["trajectory"],
                )
            )
    if not any_fused:
        raise EmptyRun(f"run {run_id!r} has no fused trajectories")
    datasets = {
        1: list(per_stage[1]),
        2: list(per_stage[1]) + list(per_stage[2]),
        3: list(per_stage[1]) + list(per_stage[2]) + list(per_stage[3]),
    }
    return datasets, rejected


def emit_datasets(
    store: RunStore,
    run_id: str,
    corpus: Corpus,
    outdir: str | Path,
) -> dict[str, Any]:
    """Write one JSONL file per cumulative stage plus an emission manifest."""
    datasets, rejected = assemble_datasets(store, run_id, corpus)
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths: dict[int, Path] = {}
    for k, records in datasets.items():
        path = outdir / f"curriculum_stage{k}.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for record in records:
                fh.write(json.dumps(record.as_dict(), ensure_ascii=False) + "\n")
        paths[k] = path
    manifest = store.load_manifest(run_id)
    emission = {
        "run_id": run_id,
        "corpus_hash": manifest["corpus_hash"],
        "seeds": manifest["seeds"],
        "budgets": manifest["budgets"],
        "providers": manifest["providers"],
        "counts": {str(k): len(v) for k, v in datasets.items()},
        "excluded": rejected,
        "files": {str(k): p.name for k, p in paths.items()},
    }
    (outdir / "datasets_manifest.json").write_text(
        json.dumps(emission, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8"
    )
    return emission
