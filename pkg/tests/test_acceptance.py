"""Acceptance suite: one test per release criterion, with a pass line each.

Run with ``pytest tests/test_acceptance.py -v -s``.
"""

from __future__ import annotations

import itertools
import json
import math
import random
import time
from pathlib import Path

import pytest
from click.testing import CliRunner

from clinarg.argument import normalize_diagnosis, normalize_evidence, parse_argument
from clinarg.cli import main
from clinarg.errors import AllJudgesFailed, SchemaViolation
from clinarg.gateway import mock_gateway
from clinarg.scoring import ALL_DIMENSIONS, aggregate_judges, score_case, trust_score_from_means
from clinarg.stats import (
    CalibrationRecord,
    PairedSamples,
    RatingsMatrix,
    calibration_report,
    icc2k,
    paired_bootstrap,
    spearman,
)
from clinarg.store import load_cases

from conftest import write_corpus
from test_builder import CASE as FAULT_CASE
from test_scoring import _stage3
from test_stats import oracle_icc2k, oracle_spearman


def _pass(name: str) -> None:
    print(f"PASS  {name}")


# ---------------------------------------------------------------------------
# Criterion 1: TrustScore arithmetic reproduces the reference clinician table.
# ---------------------------------------------------------------------------


def test_criterion_trust_score_arithmetic():
    start = time.perf_counter()
    expected = {
        (4.1, 3.7, 3.9, 3.8, 3.7): 71.0,
        (3.8, 3.3, 3.5, 3.4, 3.2): 61.0,
        (3.6, 3.1, 3.2, 3.1, 2.9): 54.5,
        (3.4, 3.0, 3.1, 3.0, 2.8): 51.5,
    }
    for means, target in expected.items():
        got = trust_score_from_means(means)
        assert abs(got - target) <= 0.05, f"{means}: {got} != {target}"
    assert time.perf_counter() - start < 1.0
    _pass("trust-score arithmetic matches reference component-mean table (±0.05)")


# ---------------------------------------------------------------------------
# Criterion 2: exhaustive aggregation suite.
# ---------------------------------------------------------------------------


def test_criterion_aggregation_exhaustive():
    start = time.perf_counter()
    combos = (
        [list(t) for t in itertools.product(range(1, 6), repeat=3)]
        + [list(t) for t in itertools.product(range(1, 6), repeat=2)]
        + [[s] for s in range(1, 6)]
    )
    assert len(combos) == 155
    for scores in combos:
        got = aggregate_judges(scores)
        assert min(scores) <= got <= max(scores), f"range containment failed for {scores}"
        for perm in itertools.permutations(scores):
            assert aggregate_judges(list(perm)) == got, f"permutation variance for {scores}"
        if len(scores) == 3 and max(scores) - min(scores) >= 3:
            assert got == sorted(scores)[1], f"median rule failed for {scores}"
    assert aggregate_judges([2, 5, 5]) == 5
    assert aggregate_judges([3, 4, 4]) == 4
    assert aggregate_judges([1, 2, 4]) == 2
    assert time.perf_counter() - start < 1.0
    _pass("aggregation: 125 triples + 25 pairs + 5 singletons, all rules hold")


# ---------------------------------------------------------------------------
# Criterion 3: end-to-end determinism on 20 synthetic cases, seed 42.
# ---------------------------------------------------------------------------


def _pipeline(root: Path, corpus_path: Path) -> None:
    runner = CliRunner()
    args = ["--out", str(root)]
    r = runner.invoke(
        main,
        ["build", "--corpus", str(corpus_path), "--run", "det", "--seed", "42", "--budget", "4"] + args,
    )
    assert r.exit_code == 0, r.output
    r = runner.invoke(main, ["score", "--run", "det", "--seed", "42"] + args)
    assert r.exit_code == 0, r.output
    r = runner.invoke(main, ["emit", "--run", "det"] + args)
    assert r.exit_code == 0, r.output


def _artifact_bytes(root: Path) -> dict[str, bytes]:
    run_dir = root / "det"
    names = ["manifest.json", "records.jsonl", "score_sheets.jsonl", "report.json"]
    blobs = {name: (run_dir / name).read_bytes() for name in names}
    for p in sorted((run_dir / "datasets").iterdir()):
        blobs[f"datasets/{p.name}"] = p.read_bytes()
    return blobs


@pytest.fixture(scope="module")
def determinism_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("determinism")
    corpus_path = write_corpus(tmp / "corpus20.jsonl", n=20)
    start = time.perf_counter()
    _pipeline(tmp / "run1", corpus_path)
    _pipeline(tmp / "run2", corpus_path)
    elapsed = time.perf_counter() - start
    return {"tmp": tmp, "corpus_path": corpus_path, "elapsed": elapsed}


def test_criterion_end_to_end_determinism(determinism_run):
    tmp = determinism_run["tmp"]
    blobs1 = _artifact_bytes(tmp / "run1")
    blobs2 = _artifact_bytes(tmp / "run2")
    assert blobs1.keys() == blobs2.keys()
    for name in blobs1:
        assert blobs1[name] == blobs2[name], f"artifact differs between runs: {name}"

    emission = json.loads(blobs1["datasets/datasets_manifest.json"])
    n_rejected = len(emission["excluded"])
    n = 20 - n_rejected
    counts = {int(k): v for k, v in emission["counts"].items()}
    # Rejections can only shrink counts; nesting must hold exactly.
    assert counts[1] <= 20 and counts[1] >= n
    lines = {
        k: (tmp / "run1" / "det" / "datasets" / f"curriculum_stage{k}.jsonl").read_text().splitlines()
        for k in (1, 2, 3)
    }
    assert counts == {k: len(v) for k, v in lines.items()}
    assert lines[2][: len(lines[1])] == lines[1], "stage-1 records must prefix stage-2 dataset"
    assert lines[3][: len(lines[2])] == lines[2], "stage-2 records must prefix stage-3 dataset"
    if n_rejected == 0:
        assert counts == {1: 20, 2: 40, 3: 60}
    assert determinism_run["elapsed"] < 30.0
    _pass(
        f"end-to-end determinism: byte-identical stores/datasets/reports "
        f"({counts[1]}/{counts[2]}/{counts[3]} records, {n_rejected} rejected, "
        f"{determinism_run['elapsed']:.1f}s for two full runs)"
    )


# ---------------------------------------------------------------------------
# Criterion 4: schema and fusion contracts.
# ---------------------------------------------------------------------------


def test_criterion_schema_and_fusion_contracts(determinism_run):
    r_ok = [
        {"dx": "sepsis", "rank": 1, "reason": "fits"},
        {"dx": "flu", "rank": 2, "reason": "less likely: seasonality"},
        {"dx": "lupus", "rank": 3, "reason": "less likely: no serositis"},
    ]
    base2 = {"D": ["fever"], "R": r_ok, "W": "warrant", "B": "backing"}

    with pytest.raises(SchemaViolation):
        parse_argument(dict(base2, B=["not", "a", "string"]), 2)
    q = {"confidence": "low", "uncertainty": ["u"], "missing_info": []}
    with pytest.raises(SchemaViolation):
        parse_argument(dict(base2, Q=dict(q, extra="x"), Y="sepsis"), 3)
    with pytest.raises(SchemaViolation):
        parse_argument(dict(base2, Q=q, Y="flu"), 3)  # revision without marker
    for bad_r in ([r_ok[0]], r_ok + [{"dx": f"dx{i}", "rank": i + 4, "reason": "r"} for i in range(3)]):
        with pytest.raises(SchemaViolation):
            parse_argument({"D": ["fever"], "R": bad_r}, 1)

    # Every fused trajectory in the determinism run satisfies the inclusion
    # checks against its persisted candidate sets.
    from clinarg.store import RunStore

    store = RunStore(determinism_run["tmp"] / "run1")
    winners: dict[tuple[str, str], object] = {}
    for record in store.iter_records("det", kind="candidate_set"):
        p = record["payload"]
        winners[(p["case_id"], p["dim"])] = p["candidates"][p["winner_index"]]["value"]
    fused_count = 0
    stage1_docs: dict[str, dict] = {}
    for record in store.iter_records("det", kind="fusion"):
        p = record["payload"]
        if p["status"] == "rejected":
            continue
        fused_count += 1
        doc = json.loads(p["trajectory"])
        norm_d = [normalize_evidence(x) for x in doc["D"]]
        assert len(norm_d) == len(set(norm_d)), f"fused D not deduplicated for {p['case_id']}"
        if p["stage"] == 1:
            stage1_docs[p["case_id"]] = doc
            source_d = {normalize_evidence(x) for x in winners[(p["case_id"], "D")]}
            source_r = {normalize_diagnosis(e["dx"]) for e in winners[(p["case_id"], "R")]}
        else:
            c1 = stage1_docs[p["case_id"]]
            source_d = {normalize_evidence(x) for x in c1["D"]}
            source_r = {normalize_diagnosis(e["dx"]) for e in c1["R"]}
        assert set(norm_d) <= source_d, f"new evidence introduced for {p['case_id']} stage {p['stage']}"
        fused_r = {normalize_diagnosis(e["dx"]) for e in doc["R"]}
        assert fused_r <= source_r, f"new diagnosis introduced for {p['case_id']} stage {p['stage']}"
    assert fused_count > 0
    _pass(f"schema/fusion contracts hold (checked {fused_count} fused trajectories)")


# ---------------------------------------------------------------------------
# Criterion 5: statistics oracles.
# ---------------------------------------------------------------------------


def test_criterion_statistics_oracles():
    labels = tuple(f"c{i}" for i in range(4))
    same = PairedSamples(labels=labels, a=(1.0, 2.0, 3.0, 4.0), b=(1.0, 2.0, 3.0, 4.0))
    res = paired_bootstrap(same, resamples=1000, seed=0)
    assert res.delta == 0.0 and res.p_value == 1.0
    shifted = PairedSamples(labels=labels, a=(1.0, 2.0, 3.0, 4.0), b=(3.0, 4.0, 5.0, 6.0))
    res = paired_bootstrap(shifted, resamples=1000, seed=0)
    assert (res.ci_low, res.ci_high) == (-2.0, -2.0)

    rng = random.Random(101)
    checked = 0
    while checked < 100:
        n = rng.randint(3, 50)
        x = [rng.randint(0, 7) for _ in range(n)]
        y = [rng.randint(0, 7) for _ in range(n)]
        if len(set(x)) < 2 or len(set(y)) < 2:
            continue
        assert spearman(x, y) == pytest.approx(oracle_spearman(x, y), abs=1e-12)
        checked += 1

    for trial in range(50):
        grid = [[rng.uniform(1, 5) for _ in range(20)] for _ in range(3)]
        matrix = RatingsMatrix(
            values=tuple(tuple(row) for row in grid),
            rater_ids=("r1", "r2", "r3"),
            target_ids=tuple(f"t{j}" for j in range(20)),
        )
        assert icc2k(matrix) == pytest.approx(oracle_icc2k(grid), abs=1e-9)

    n = 897
    a = tuple(rng.gauss(71, 6) for _ in range(n))
    b = tuple(rng.gauss(68, 6) for _ in range(n))
    start = time.perf_counter()
    paired_bootstrap(PairedSamples(labels=tuple(map(str, range(n))), a=a, b=b), resamples=10000, seed=3)
    elapsed = time.perf_counter() - start
    assert elapsed < 5.0
    _pass(
        f"statistics oracles: bootstrap degenerate cases, 100 spearman vectors @1e-12, "
        f"50 ICC grids @1e-9, 10k x 897 bootstrap in {elapsed:.2f}s"
    )


# ---------------------------------------------------------------------------
# Criterion 6: calibration worked example.
# ---------------------------------------------------------------------------


def test_criterion_calibration():
    records = (
        [CalibrationRecord(f"h{i}", "high", 5, True) for i in range(3)]
        + [CalibrationRecord("h3", "high", 2, False)]
        + [CalibrationRecord("m0", "medium", 4, True)]
        + [CalibrationRecord(f"m{i}", "medium", 2, False) for i in (1, 2)]
        + [CalibrationRecord(f"l{i}", "low", 1, False) for i in range(3)]
    )
    report = calibration_report(records)
    assert report["bins"]["high"]["accuracy"] == 75.0
    assert report["bins"]["high"]["proportion"] == 40.0
    assert report["bins"]["high"]["n"] == 4
    assert report["overconfidence_error"] == 10.0

    rng = random.Random(7)
    for _ in range(20):
        sample = [
            CalibrationRecord.from_score(f"c{i}", rng.choice(("low", "medium", "high")), rng.randint(1, 5))
            for i in range(rng.randint(1, 60))
        ]
        rep = calibration_report(sample)
        assert sum(rep["bins"][b]["n"] for b in rep["bins"]) == len(sample)
    _pass("calibration: worked example exact (75% / 40% / n=4 / OE 10.0), bins partition input")


# ---------------------------------------------------------------------------
# Criterion 7: judge fault tolerance.
# ---------------------------------------------------------------------------


def test_criterion_fault_tolerance():
    traj = _stage3()
    gw = mock_gateway(seed=5, fail_judge_indices=(1,))
    sheet = score_case(gw, FAULT_CASE, traj)
    assert all(sheet.dims[d].n_valid == 2 for d in ALL_DIMENSIONS)

    gw = mock_gateway(seed=5, fault_rate=1.0)
    with pytest.raises(AllJudgesFailed):
        score_case(gw, FAULT_CASE, traj)
    assert gw.provider_for("judge").call_count == 6, "exactly one full retry round"
    _pass("fault tolerance: one judge down -> n_valid=2; full fault -> fail after one retry round")
