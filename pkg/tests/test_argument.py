from __future__ import annotations

import json

import pytest
from hypothesis import given, strategies as st

from clinarg import argument
from clinarg.argument import (
    REVISION_MARKER,
    Qualifier,
    canonical_serialize,
    infer_stage,
    normalize_diagnosis,
    normalize_evidence,
    parse_argument,
    parse_canonical,
    project,
    to_document,
    validate_revision,
)
from clinarg.errors import SchemaViolation, WrongStageFields


def rebuttal(*dxs: str) -> list[dict]:
    entries = []
    for i, dx in enumerate(dxs):
        reason = "best fit for the presentation" if i == 0 else f"less likely: missing hallmark of {dx}"
        entries.append({"dx": dx, "rank": i + 1, "reason": reason})
    return entries


def stage1_doc() -> dict:
    return {"D": ["fever", "hypotension"], "R": rebuttal("sepsis", "influenza", "lupus")}


def stage2_doc() -> dict:
    doc = stage1_doc()
    doc["W"] = "The systemic picture follows from an uncontrolled infectious focus."
    doc["B"] = "Standard sepsis criteria are met; the alternatives lack key findings."
    return doc


def stage3_doc(y: str = "sepsis", marker: bool = False) -> dict:
    doc = stage2_doc()
    first = "pending cultures"
    if marker:
        first = f"{REVISION_MARKER} Initial hypothesis: sepsis. Pivot evidence: murmur. Therefore revise to: {y}."
    doc["Q"] = {"confidence": "medium", "uncertainty": [first], "missing_info": ["blood cultures"]}
    doc["Y"] = y
    return doc


# -- parse_argument --


def test_parse_minimal_stage1():
    traj = parse_argument({"D": ["fever"], "R": rebuttal("sepsis", "flu", "lupus")}, 1)
    assert traj.stage == 1
    assert traj.D == ("fever",)
    assert [e.rank for e in traj.R] == [1, 2, 3]
    assert traj.W is None and traj.Y is None


def test_parse_rejects_backing_as_list():
    doc = stage2_doc()
    doc["B"] = ["a", "b"]
    with pytest.raises(SchemaViolation) as err:
        parse_argument(doc, 2)
    assert any(v.path == "B" for v in err.value.report.violations)


def test_parse_rejects_qualifier_extra_key():
    doc = stage3_doc()
    doc["Q"]["notes"] = "extra"
    with pytest.raises(SchemaViolation) as err:
        parse_argument(doc, 3)
    assert any(v.path == "Q" for v in err.value.report.violations)


def test_parse_rejects_unknown_top_level_key():
    doc = stage1_doc()
    doc["commentary"] = "should not be here"
    with pytest.raises(SchemaViolation) as err:
        parse_argument(doc, 1)
    assert any(v.code == "unknown_key" for v in err.value.report.violations)


def test_parse_wrong_stage_fields():
    doc = stage1_doc()
    doc["W"] = "early warrant"
    with pytest.raises(WrongStageFields):
        parse_argument(doc, 1)
    with pytest.raises(WrongStageFields):
        parse_argument(stage1_doc(), 2)  # W/B required but absent


@pytest.mark.parametrize("n", [0, 1, 2, 6, 7])
def test_parse_rejects_rebuttal_size(n):
    dxs = [f"dx {i}" for i in range(n)]
    doc = {"D": ["fever"], "R": rebuttal(*dxs)}
    with pytest.raises(SchemaViolation):
        parse_argument(doc, 1)


def test_parse_rejects_duplicate_and_gapped_ranks():
    doc = stage1_doc()
    doc["R"][1]["rank"] = 1
    with pytest.raises(SchemaViolation) as err:
        parse_argument(doc, 1)
    assert any(v.code == "duplicate_rank" for v in err.value.report.violations)

    doc = stage1_doc()
    doc["R"][2]["rank"] = 5
    with pytest.raises(SchemaViolation) as err:
        parse_argument(doc, 1)
    assert any(v.code == "rank_gap" for v in err.value.report.violations)


def test_parse_rejects_duplicate_dx_under_normalization():
    doc = {"D": ["fever"], "R": rebuttal("Sepsis", "sepsis.", "lupus")}
    with pytest.raises(SchemaViolation) as err:
        parse_argument(doc, 1)
    assert any(v.code == "duplicate_dx" for v in err.value.report.violations)


def test_parse_rejects_duplicate_evidence_under_normalization():
    doc = stage1_doc()
    doc["D"] = ["Fever", "fever."]
    with pytest.raises(SchemaViolation) as err:
        parse_argument(doc, 1)
    assert any(v.code == "duplicate_evidence" for v in err.value.report.violations)


def test_parse_requires_revision_marker():
    doc = stage3_doc(y="influenza", marker=False)
    with pytest.raises(SchemaViolation) as err:
        parse_argument(doc, 3)
    assert any(v.code == "missing_revision_marker" for v in err.value.report.violations)
    # With the marker the same revision parses.
    traj = parse_argument(stage3_doc(y="influenza", marker=True), 3)
    assert traj.Y == "influenza"


# -- validate_revision --


def test_revision_identity_under_normalization():
    traj = parse_argument(stage3_doc(y="Sepsis."), 3)
    check = validate_revision(traj)
    assert check.i_rev is False
    assert check.report.ok


def test_revision_with_marker_ok():
    traj = parse_argument(stage3_doc(y="influenza", marker=True), 3)
    check = validate_revision(traj)
    assert check.i_rev is True
    assert check.report.ok


def test_spurious_marker_fails_report():
    traj = argument.StageTrajectory(
        stage=3,
        D=("fever",),
        R=tuple(
            argument.DifferentialEntry(dx=d, rank=i + 1, reason="r")
            for i, d in enumerate(["sepsis", "flu", "lupus"])
        ),
        W="w",
        B="b",
        Q=Qualifier("low", (f"{REVISION_MARKER} spurious",), ()),
        Y="sepsis",
    )
    check = validate_revision(traj)
    assert check.i_rev is False
    assert not check.report.ok
    assert check.report.violations[0].code == "spurious_revision_marker"


def test_revision_invariant_under_normalization():
    for y in ("sepsis", " SEPSIS.", "Sepsis;"):
        traj = parse_argument(stage3_doc(y=y), 3)
        assert validate_revision(traj).i_rev is False


# -- normalization --


@pytest.mark.parametrize(
    "raw,expect",
    [
        ("  Sepsis. ", "sepsis"),
        ("Type 2 Diabetes  Mellitus", "type 2 diabetes mellitus"),
        ("Giant-cell arteritis", "giant-cell arteritis"),
        ("WBC 15,000.", "wbc 15,000"),
        ("lactate 4.0", "lactate 4.0"),
        ("", ""),
        ("a  b", "a b"),
    ],
)
def test_normalize_diagnosis(raw, expect):
    assert normalize_diagnosis(raw) == expect


def test_normalize_evidence_matches_diagnosis_rules():
    assert normalize_evidence("Fever ") == normalize_evidence("fever")
    assert normalize_evidence("WBC 15,000") == normalize_evidence("WBC 15,000.")
    assert normalize_evidence("lactate 4.0") != normalize_evidence("lactate 4.1")


@given(st.text(max_size=80))
def test_normalize_idempotent(text):
    once = normalize_diagnosis(text)
    assert normalize_diagnosis(once) == once


# -- canonical serialization --


def test_canonical_key_order():
    traj = parse_argument(stage1_doc(), 1)
    assert canonical_serialize(traj).startswith(b'{"D":[')
    traj3 = parse_argument(stage3_doc(), 3)
    keys = list(json.loads(canonical_serialize(traj3)))
    assert keys == ["D", "R", "W", "B", "Q", "Y"]


def test_canonical_independent_of_input_field_order():
    doc = stage3_doc()
    shuffled = {k: doc[k] for k in ["Y", "Q", "B", "W", "R", "D"]}
    a = canonical_serialize(parse_argument(doc, 3))
    b = canonical_serialize(parse_argument(shuffled, 3))
    assert a == b


def test_round_trip_identity():
    for doc, stage in [(stage1_doc(), 1), (stage2_doc(), 2), (stage3_doc(), 3)]:
        traj = parse_argument(doc, stage)
        assert parse_canonical(canonical_serialize(traj)) == traj
        assert infer_stage(to_document(traj)) == stage


# -- stage projection properties --


@st.composite
def valid_stage3(draw):
    n_d = draw(st.integers(min_value=1, max_value=6))
    d = tuple(f"finding {i} observed" for i in range(n_d))
    n_r = draw(st.integers(min_value=3, max_value=5))
    dxs = [f"condition {i}" for i in range(n_r)]
    r = tuple(
        argument.DifferentialEntry(dx=dx, rank=i + 1, reason=f"reasoning for {dx}")
        for i, dx in enumerate(dxs)
    )
    revise = draw(st.booleans())
    y = dxs[1] if revise else dxs[0]
    first = (
        f"{REVISION_MARKER} Initial hypothesis: {dxs[0]}. Pivot evidence: {d[0]}. Therefore revise to: {y}."
        if revise
        else "residual uncertainty noted"
    )
    q = Qualifier(
        confidence=draw(st.sampled_from(("low", "medium", "high"))),
        uncertainty=(first,),
        missing_info=("follow-up imaging",),
    )
    return argument.StageTrajectory(stage=3, D=d, R=r, W="warrant text", B="backing text", Q=q, Y=y)


@given(valid_stage3())
def test_stage3_projects_to_valid_lower_stages(traj3):
    # The full trajectory itself round-trips through strict parsing.
    assert parse_canonical(canonical_serialize(traj3)) == traj3
    traj2 = project(traj3, 2)
    assert parse_argument(to_document(traj2), 2) == traj2
    traj1 = project(traj3, 1)
    assert parse_argument(to_document(traj1), 1) == traj1
    assert traj1.D == traj3.D and traj1.R == traj3.R


@given(valid_stage3())
def test_serialize_parse_identity_property(traj3):
    data = canonical_serialize(traj3)
    assert canonical_serialize(parse_canonical(data)) == data
