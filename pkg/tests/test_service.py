from __future__ import annotations

import json

import pytest
from fastapi.testclient import TestClient

from clinarg.service import StudyManager, create_app
from clinarg.store import RunStore, load_cases

from conftest import build_run, score_run, write_corpus

ALL_DIMS = ("D", "R", "W", "B", "Q", "Y")


@pytest.fixture(scope="module")
def study_env(tmp_path_factory):
    """Two scored mock runs over one 5-case corpus, plus the service app."""
    tmp = tmp_path_factory.mktemp("study")
    corpus = load_cases(write_corpus(tmp / "corpus.jsonl", n=5))
    store = RunStore(tmp / "runs")
    for run_id, seed in (("method-a", 42), ("method-b", 43)):
        build_run(store, corpus, run_id, seed=seed, budget=2)
        score_run(store, corpus, run_id, seed=seed)
    manager = StudyManager(store, corpus)
    client = TestClient(create_app(manager), raise_server_exceptions=False)
    return {"tmp": tmp, "corpus": corpus, "store": store, "manager": manager, "client": client}


@pytest.fixture(scope="module")
def study(study_env):
    client = study_env["client"]
    resp = client.post(
        "/studies",
        json={"runs": ["method-a", "method-b"], "n_cases": 5, "n_raters": 2, "seed": 7},
    )
    assert resp.status_code == 200, resp.text
    return resp.json()


def scores(value: int = 4) -> dict[str, int]:
    return {d: value for d in ALL_DIMS}


def test_study_descriptor_shape(study):
    assert study["runs"] == ["method-a", "method-b"]
    assert len(study["case_ids"]) == 5
    assert len(study["sessions"]) == 2
    # 2 methods x 5 cases per rater.
    assert set(study["raters"]) == {"rater1", "rater2"}


def test_queue_covers_each_pair_once_and_is_rater_specific(study_env, study):
    manager = study_env["manager"]
    descriptor = manager.load_study(study["study_id"])
    queues = {rater: manager.queue(descriptor, rater) for rater in descriptor.raters}
    for rater, queue in queues.items():
        assert len(queue) == 10
        assert len(set(queue)) == 10
    assert queues["rater1"] != queues["rater2"]
    # Deterministic across manager instances (service restarts).
    manager2 = StudyManager(study_env["store"], study_env["corpus"])
    assert manager2.queue(descriptor, "rater1") == queues["rater1"]


def test_run_mismatch_and_insufficient_cases(study_env, tmp_path):
    client = study_env["client"]
    resp = client.post("/studies", json={"runs": ["method-a", "missing-run"], "n_cases": 5, "n_raters": 1})
    assert resp.status_code == 404
    assert resp.json()["code"] == "UNKNOWN_RUN"

    # A run built but not scored fails the scored-trajectory precondition.
    store = study_env["store"]
    corpus = study_env["corpus"]
    build_run(store, corpus, "method-unscored", seed=44, budget=2)
    resp = client.post("/studies", json={"runs": ["method-a", "method-unscored"], "n_cases": 5, "n_raters": 1})
    assert resp.status_code == 409
    assert resp.json()["code"] == "INSUFFICIENT_CASES"

    # A run built from a different corpus cannot join the study.
    other = load_cases(write_corpus(tmp_path / "other.jsonl", n=6))
    build_run(store, other, "method-other", seed=45, budget=2)
    score_run(store, other, "method-other", seed=45)
    resp = client.post("/studies", json={"runs": ["method-a", "method-other"], "n_cases": 5, "n_raters": 1})
    assert resp.status_code == 409
    assert resp.json()["code"] == "RUN_MISMATCH"


def test_blinding_payload_keys_exact_over_full_queue(study_env, study):
    client = study_env["client"]
    session_id = study["sessions"]["rater1"]
    for i in range(10):
        resp = client.get(f"/sessions/{session_id}/next")
        assert resp.status_code == 200
        item = resp.json()
        assert set(item) == {"item_index", "presentation", "trajectory"}
        assert item["item_index"] == i
        blob = json.dumps(item)
        assert "method-a" not in blob and "method-b" not in blob and "run" not in set(item)
        assert set(item["trajectory"]) == {"D", "R", "W", "B", "Q", "Y"}
        resp = client.post(
            f"/sessions/{session_id}/ratings",
            json={"item_index": i, "scores": scores(5), "comment": ""},
        )
        assert resp.status_code == 200
        assert resp.json()["cursor"] == i + 1
    resp = client.get(f"/sessions/{session_id}/next")
    assert resp.status_code == 409
    assert resp.json()["code"] == "SESSION_COMPLETE"


def test_refresh_resumes_without_duplicates(study_env, study):
    client = study_env["client"]
    session_id = study["sessions"]["rater2"]
    first = client.get(f"/sessions/{session_id}/next").json()
    again = client.get(f"/sessions/{session_id}/next").json()  # browser refresh
    assert first == again
    resp = client.post(f"/sessions/{session_id}/ratings", json={"item_index": 0, "scores": scores(5)})
    assert resp.status_code == 200
    # Resubmission overwrites, not duplicates.
    resp = client.post(f"/sessions/{session_id}/ratings", json={"item_index": 0, "scores": scores(5)})
    assert resp.status_code == 200
    status = client.get(f"/sessions/{session_id}").json()
    assert status["cursor"] == 1
    manager = study_env["manager"]
    state = manager.session_state(session_id)
    assert state["submitted"] == 1
    assert state["overwrites"] == 1
    for i in range(1, 10):
        client.get(f"/sessions/{session_id}/next")
        assert client.post(
            f"/sessions/{session_id}/ratings", json={"item_index": i, "scores": scores(5)}
        ).status_code == 200


def test_submission_validation(study_env, study):
    client = study_env["client"]
    session_id = study["sessions"]["rater1"]
    bad = dict(scores(4), D=0)
    resp = client.post(f"/sessions/{session_id}/ratings", json={"item_index": 0, "scores": bad})
    assert resp.status_code == 422
    assert resp.json()["code"] == "OUT_OF_RANGE"
    partial = {d: 4 for d in ("D", "R", "W")}
    resp = client.post(f"/sessions/{session_id}/ratings", json={"item_index": 0, "scores": partial})
    assert resp.status_code == 422
    resp = client.post(f"/sessions/{session_id}/ratings", json={"item_index": 99, "scores": scores(4)})
    assert resp.status_code == 409
    assert resp.json()["code"] == "ITEM_NOT_SERVED"
    resp = client.get("/sessions/nonexistent/next")
    assert resp.status_code == 404
    assert resp.json()["code"] == "UNKNOWN_SESSION"


def test_summary_all_fives_reproduces_trust_semantics(study_env, study):
    client = study_env["client"]
    resp = client.get(f"/studies/{study['study_id']}/summary")
    assert resp.status_code == 200, resp.text
    summary = resp.json()
    assert summary["complete"] is True
    for run_id in ("method-a", "method-b"):
        method = summary["methods"][run_id]
        assert method["clinician_trust_score"] == pytest.approx(100.0)
        assert method["clinician_accuracy"] == pytest.approx(100.0)
        assert method["n_cases_rated"] == 5
        assert all(v == pytest.approx(5.0) for v in method["per_component"].values())


def test_summary_order_independence(study_env, study):
    # Same stored ratings produce the same summary regardless of arrival
    # order: recompute from a fresh manager (which re-reads the log).
    manager2 = StudyManager(study_env["store"], study_env["corpus"])
    s1 = study_env["manager"].clinician_summary(study["study_id"])
    s2 = manager2.clinician_summary(study["study_id"])
    assert s1 == s2


def test_export_matrices_shape(study_env, study):
    client = study_env["client"]
    resp = client.get(f"/studies/{study['study_id']}/export")
    assert resp.status_code == 200
    export = resp.json()
    assert export["complete"] is True
    assert export["n_overwrites"] >= 1  # the resubmission above
    for dim in ALL_DIMS:
        grid = export["components"][dim]
        assert len(grid["values"]) == 2  # raters
        assert all(len(row) == 10 for row in grid["values"])  # methods x cases
        assert grid["target_ids"] == [f"{run}::{cid}" for run in study["runs"] for cid in study["case_ids"]]
    for run_id in study["runs"]:
        assert len(export["clinician_trust_per_case"][run_id]) == 5
        assert all(v == pytest.approx(100.0) for v in export["clinician_trust_per_case"][run_id].values())


def test_incomplete_summary_needs_partial_flag(study_env):
    client = study_env["client"]
    resp = client.post("/studies", json={"runs": ["method-a"], "n_cases": 5, "n_raters": 1, "seed": 9})
    study_id = resp.json()["study_id"]
    resp = client.get(f"/studies/{study_id}/summary")
    assert resp.status_code == 409
    assert resp.json()["code"] == "INCOMPLETE_STUDY"
    resp = client.get(f"/studies/{study_id}/summary", params={"partial": "true"})
    assert resp.status_code == 200
    assert resp.json()["complete"] is False


def test_session_resumes_across_service_restart(study_env, study):
    # A brand-new manager and app over the same store resumes cursors.
    manager2 = StudyManager(study_env["store"], study_env["corpus"])
    client2 = TestClient(create_app(manager2), raise_server_exceptions=False)
    session_id = study["sessions"]["rater1"]
    status = client2.get(f"/sessions/{session_id}").json()
    assert status == {"cursor": 10, "total": 10, "complete": True}
