from __future__ import annotations

import json
from pathlib import Path

import pytest

from clinarg import builder, scoring
from clinarg.gateway import mock_gateway
from clinarg.store import Corpus, RunStore, load_cases

SPECIALTIES = ("cardiology", "neurology", "infectious disease")


def write_corpus(path: Path, n: int = 4, specialties: tuple[str, ...] = SPECIALTIES) -> Path:
    with open(path, "w", encoding="utf-8") as fh:
        for i in range(n):
            fh.write(
                json.dumps(
                    {
                        "id": f"case-{i:03d}",
                        "specialty": specialties[i % len(specialties)] if specialties else None,
                        "presentation": (
                            f"Patient {i} presents with a five-day history of fever, rigors and "
                            f"progressive dyspnea. Examination shows tachycardia and a new murmur."
                        ),
                        "gold_diagnosis": "infective endocarditis" if i % 2 else "sepsis",
                    }
                )
                + "\n"
            )
    return path


@pytest.fixture
def small_corpus(tmp_path) -> Corpus:
    return load_cases(write_corpus(tmp_path / "corpus.jsonl", n=4))


def build_run(
    store: RunStore,
    corpus: Corpus,
    run_id: str,
    *,
    seed: int = 42,
    budget: int = 2,
    stage: int = 3,
    n_judges: int = 3,
):
    """Build every corpus case through ``stage`` with the mock provider."""
    gw = mock_gateway(seed=seed)
    budgets = builder.Budgets.from_mapping({d: budget for d in "DRWBQY"})
    store.ensure_run(
        run_id,
        corpus_hash=corpus.content_hash,
        corpus_path=corpus.source_path,
        case_ids=[c.id for c in corpus.cases],
        seeds={"master": seed},
        budgets=budgets.as_dict(),
        providers={"strategy": "mock", "judge": "mock"},
    )
    built = {}
    for case in corpus.cases:
        built[case.id] = builder.build_trajectory(
            gw, store, run_id, case, stage, budgets, seed=seed, n_judges=n_judges
        )
    return gw, built


def score_run(store: RunStore, corpus: Corpus, run_id: str, *, seed: int = 42, n_judges: int = 3):
    """Score every stage-3 case of a built run and persist the sheets."""
    gw = mock_gateway(seed=seed)
    sheets = []
    manifest = store.load_manifest(run_id)
    for case_id, status in sorted(manifest["case_status"].items()):
        if status not in ("stage3", "scored"):
            continue
        fusion = store.latest_fusion(run_id, case_id, 3)
        traj = builder.parse_canonical(fusion["trajectory"], stage=3)
        sheet = scoring.score_case(gw, corpus.by_id(case_id), traj, n_judges=n_judges)
        store.append_record(
            run_id,
            "score_sheet",
            {
                "case_id": case_id,
                **scoring.sheet_to_record(sheet),
                "verdicts": [v.as_dict() for v in sheet.verdicts],
            },
        )
        sheets.append(sheet)
    return sheets
