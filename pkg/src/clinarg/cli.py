"""Command-line entry point: build -> score -> emit -> stats -> serve.

Exit codes are a stable contract: 0 success, 2 configuration/input error,
3 provider error, 4 zero successes (or a hard scoring failure under
--strict), 5 statistical precondition failure, 6 port in use.
"""

from __future__ import annotations

import json
import socket
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click

from . import builder, scoring, stats
from .errors import (
    AllJudgesFailed,
    AuthError,
    ClinargError,
    EmptyInput,
    EmptyRun,
    GatewayTimeout,
    IncompleteGrid,
    LengthMismatch,
    NoValidCandidates,
    ProviderUnavailable,
    TooFewCases,
    TrajectoryRejected,
    ZeroVariance,
)
from .gateway import Gateway, gateway_from_profiles, mock_gateway
from .store import Corpus, RunStore, load_cases

EXIT_CONFIG = 2
EXIT_PROVIDER = 3
EXIT_NO_SUCCESS = 4
EXIT_STATS = 5
EXIT_PORT = 6

_PROVIDER_ERRORS = (ProviderUnavailable, GatewayTimeout, AuthError)
_STATS_ERRORS = (IncompleteGrid, TooFewCases, ZeroVariance, LengthMismatch, EmptyInput)


def _fail(code: int, message: str) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _load_corpus(path: str, field_map_path: str | None) -> Corpus:
    field_map = None
    if field_map_path:
        try:
            field_map = json.loads(Path(field_map_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            _fail(EXIT_CONFIG, f"cannot read field map {field_map_path}: {exc}")
    try:
        return load_cases(path, field_map=field_map)
    except ClinargError as exc:
        _fail(EXIT_CONFIG, f"cannot load corpus {path}: {exc}")
    raise AssertionError("unreachable")


def _make_gateway(provider: str, seed: int, workers: int) -> tuple[Gateway, bool]:
    """Returns (gateway, is_mock)."""
    if provider == "mock":
        return mock_gateway(seed=seed, max_in_flight=max(8, workers * 4)), True
    try:
        return gateway_from_profiles(provider, max_in_flight=max(8, workers * 4)), False
    except (OSError, ValueError, TypeError, json.JSONDecodeError) as exc:
        _fail(EXIT_CONFIG, f"cannot load provider profile {provider}: {exc}")
    raise AssertionError("unreachable")


def _open_store(out: str, is_mock: bool) -> RunStore:
    # The mock pipeline uses logical timestamps so stores are byte-identical
    # across re-runs; real providers get wall-clock time.
    if is_mock:
        return RunStore(out, clock=None)
    import time

    return RunStore(out, clock=time.time)


def _budgets_from_options(budget: int, per_dim: dict[str, int | None]) -> builder.Budgets:
    values = {d: budget for d in "DRWBQY"}
    for dim, value in per_dim.items():
        if value is not None:
            values[dim] = value
    return builder.Budgets.from_mapping(values)


@click.group()
def main() -> None:
    """Toulmin-structured diagnostic reasoning pipeline."""


@main.command()
@click.option("--corpus", "corpus_path", required=True, type=click.Path(), help="Line-delimited JSON corpus.")
@click.option("--run", "run_id", required=True, help="Run identifier under the store root.")
@click.option("--stage", type=click.IntRange(1, 3), default=3, show_default=True)
@click.option("--budget", type=int, default=builder.DEFAULT_BUDGET, show_default=True, help="Candidate budget for every component.")
@click.option("--budget-d", "budget_D", type=int, default=None, help="Override budget for D.")
@click.option("--budget-r", "budget_R", type=int, default=None, help="Override budget for R.")
@click.option("--budget-w", "budget_W", type=int, default=None, help="Override budget for W.")
@click.option("--budget-b", "budget_B", type=int, default=None, help="Override budget for B.")
@click.option("--budget-q", "budget_Q", type=int, default=None, help="Override budget for Q.")
@click.option("--budget-y", "budget_Y", type=int, default=None, help="Override budget for Y.")
@click.option("--judges", type=click.IntRange(1, 3), default=3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--provider", default="mock", show_default=True, help="'mock' or a provider profile path.")
@click.option("--workers", type=click.IntRange(1, 64), default=1, show_default=True)
@click.option("--out", default="runs", show_default=True, help="Run store root directory.")
@click.option("--field-map", "field_map_path", default=None, type=click.Path(), help="JSON map of source columns to corpus fields.")
def build(
    corpus_path: str,
    run_id: str,
    stage: int,
    budget: int,
    budget_D: int | None,
    budget_R: int | None,
    budget_W: int | None,
    budget_B: int | None,
    budget_Q: int | None,
    budget_Y: int | None,
    judges: int,
    seed: int,
    provider: str,
    workers: int,
    out: str,
    field_map_path: str | None,
) -> None:
    """Construct trajectories for every corpus case through STAGE."""
    corpus = _load_corpus(corpus_path, field_map_path)
    gateway, is_mock = _make_gateway(provider, seed, workers)
    store = _open_store(out, is_mock)
    budgets = _budgets_from_options(
        budget, {"D": budget_D, "R": budget_R, "W": budget_W, "B": budget_B, "Q": budget_Q, "Y": budget_Y}
    )
    try:
        store.ensure_run(
            run_id,
            corpus_hash=corpus.content_hash,
            corpus_path=corpus.source_path,
            case_ids=[c.id for c in corpus.cases],
            seeds={"master": seed},
            budgets=budgets.as_dict(),
            providers={"strategy": "mock" if is_mock else provider, "judge": "mock" if is_mock else provider},
        )
    except ClinargError as exc:
        _fail(EXIT_CONFIG, str(exc))

    stage_success = {k: 0 for k in range(1, stage + 1)}
    rejects: list[tuple[str, int]] = []
    provider_failure: list[Exception] = []

    def run_case(case) -> None:
        try:
            built = builder.build_trajectory(
                gateway, store, run_id, case, stage, budgets, seed=seed, n_judges=judges
            )
            for k in built:
                stage_success[k] += 1
        except (TrajectoryRejected, NoValidCandidates) as exc:
            rejects.append((case.id, getattr(exc, "stage", 0)))
        except _PROVIDER_ERRORS as exc:
            provider_failure.append(exc)

    if workers == 1:
        for case in corpus.cases:
            run_case(case)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_case, corpus.cases))

    if provider_failure:
        _fail(EXIT_PROVIDER, f"provider failure: {provider_failure[0]}")
    for k in range(1, stage + 1):
        click.echo(f"stage {k}: {stage_success[k]} fused, {len(corpus.cases) - stage_success[k]} not fused")
    if rejects:
        click.echo(f"rejected: {len(rejects)} case(s): " + ", ".join(f"{cid}@stage{st}" for cid, st in rejects))
    click.echo(f"run directory: {store.run_dir(run_id)}")
    if stage_success[stage] == 0:
        _fail(EXIT_NO_SUCCESS, "no trajectory reached the requested stage")


@main.command()
@click.option("--run", "run_id", required=True)
@click.option("--judges", type=click.IntRange(1, 3), default=3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--provider", default="mock", show_default=True)
@click.option("--workers", type=click.IntRange(1, 64), default=1, show_default=True)
@click.option("--out", default="runs", show_default=True, help="Run store root directory.")
@click.option("--strict", is_flag=True, help="Fail (exit 4) if any case cannot be scored.")
def score(run_id: str, judges: int, seed: int, provider: str, workers: int, out: str, strict: bool) -> None:
    """Score every stage-3 trajectory of a run and write the report."""
    gateway, is_mock = _make_gateway(provider, seed, workers)
    store = _open_store(out, is_mock)
    try:
        manifest = store.load_manifest(run_id)
    except ClinargError as exc:
        _fail(EXIT_CONFIG, str(exc))
    corpus = _load_corpus(manifest["corpus_path"], None)
    ready = [cid for cid, status in sorted(manifest["case_status"].items()) if status in ("stage3", "scored")]
    if not ready:
        _fail(EXIT_CONFIG, f"run {run_id!r} has no stage-3 trajectories to score")

    sheets: list[scoring.CaseScoreSheet] = []
    failures: list[str] = []

    def score_one(case_id: str):
        fusion = store.latest_fusion(run_id, case_id, 3)
        traj = builder.parse_canonical(fusion["trajectory"], stage=3)
        case = corpus.by_id(case_id)
        try:
            sheet = scoring.score_case(gateway, case, traj, n_judges=judges)
        except AllJudgesFailed:
            failures.append(case_id)
            return None
        ref = store.append_record(
            run_id,
            "score_sheet",
            {
                "case_id": case_id,
                **scoring.sheet_to_record(sheet),
                "verdicts": [v.as_dict() for v in sheet.verdicts],
            },
        )
        return sheet, ref

    results = []
    try:
        if workers == 1:
            results = [score_one(cid) for cid in ready]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(score_one, ready))
    except _PROVIDER_ERRORS as exc:
        _fail(EXIT_PROVIDER, f"provider failure: {exc}")

    rows = []
    for item in results:
        if item is None:
            continue
        sheet, ref = item
        sheets.append(sheet)
        rows.append(scoring.sheet_to_record(sheet, judge_raw_refs=[ref.seq]))

    run_dir = store.run_dir(run_id)
    sheets_path = run_dir / "score_sheets.jsonl"
    with open(sheets_path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
    report_path = run_dir / "report.json"
    if sheets:
        report = scoring.report_from_sheets(sheets)
        report_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        click.echo(f"scored {len(sheets)}/{len(ready)} cases")
        click.echo(f"trust_score={report['trust_score']:.2f} accuracy={report['accuracy']:.2f}")
        click.echo(f"report: {report_path}")
    if failures:
        click.echo(f"warning: {len(failures)} case(s) failed scoring: {', '.join(failures)}", err=True)
        if strict:
            _fail(EXIT_NO_SUCCESS, "scoring failures under --strict")
    if not sheets:
        _fail(EXIT_NO_SUCCESS, "no case could be scored")


@main.command()
@click.option("--run", "run_id", required=True)
@click.option("--out", default="runs", show_default=True, help="Run store root directory.")
@click.option("--outdir", default=None, help="Dataset output directory (default: <run>/datasets).")
def emit(run_id: str, out: str, outdir: str | None) -> None:
    """Write the three cumulative curriculum dataset files."""
    store = RunStore(out)
    try:
        manifest = store.load_manifest(run_id)
        corpus = load_cases(manifest["corpus_path"])
        target = Path(outdir) if outdir else store.run_dir(run_id) / "datasets"
        emission = builder.emit_datasets(store, run_id, corpus, target)
    except EmptyRun as exc:
        _fail(EXIT_CONFIG, str(exc))
    except (ClinargError, OSError) as exc:
        _fail(EXIT_CONFIG, str(exc))
    else:
        for k in ("1", "2", "3"):
            click.echo(f"stage {k}: {emission['counts'][k]} records -> {emission['files'][k]}")
        if emission["excluded"]:
            click.echo(f"excluded (rejected): {', '.join(emission['excluded'])}")
        click.echo(f"dataset directory: {target}")


def _read_sheet_values(path: str, metric: str) -> dict[str, float]:
    """Per-case metric from a score-sheet JSONL file or a clinician export."""
    text = Path(path).read_text(encoding="utf-8")
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            doc = json.loads(stripped)
        except json.JSONDecodeError:
            doc = None
        if isinstance(doc, dict) and "case_trust" in doc:
            return {str(k): float(v) for k, v in doc["case_trust"].items()}
    values: dict[str, float] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        sheet = scoring.sheet_from_record(json.loads(line))
        if metric == "accuracy":
            values[sheet.case_id] = scoring.per_case_accuracy(sheet)
        else:
            values[sheet.case_id] = scoring.per_case_trust(sheet)
    return values


def _paired_from_files(path_a: str, path_b: str, metric: str) -> stats.PairedSamples:
    va = _read_sheet_values(path_a, metric)
    vb = _read_sheet_values(path_b, metric)
    labels = sorted(set(va) & set(vb))
    if len(labels) < 2:
        raise TooFewCases("fewer than 2 cases shared by the two inputs")
    return stats.PairedSamples(
        labels=tuple(labels),
        a=tuple(va[k] for k in labels),
        b=tuple(vb[k] for k in labels),
    )


def _write_report(report: dict, out_path: str | None) -> None:
    if out_path:
        Path(out_path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        click.echo(f"report: {out_path}")


@main.group()
def stats_cmd() -> None:
    """Statistical reports over score sheets and rating exports."""


main.add_command(stats_cmd, name="stats")


@stats_cmd.command("bootstrap")
@click.argument("sheet_a", type=click.Path(exists=False))
@click.argument("sheet_b", type=click.Path(exists=False))
@click.option("--metric", type=click.Choice(["trust", "accuracy"]), default="trust", show_default=True)
@click.option("--resamples", type=int, default=10000, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--report", "out_path", default=None, help="Write the JSON report here.")
def stats_bootstrap(sheet_a: str, sheet_b: str, metric: str, resamples: int, seed: int, out_path: str | None) -> None:
    """Paired bootstrap of mean(A) - mean(B) over shared cases."""
    try:
        samples = _paired_from_files(sheet_a, sheet_b, metric)
        result = stats.paired_bootstrap(samples, resamples=resamples, seed=seed)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        _fail(EXIT_CONFIG, f"cannot parse inputs: {exc}")
    except _STATS_ERRORS as exc:
        _fail(EXIT_STATS, str(exc))
    else:
        report = {"metric": metric, "n_cases": len(samples.labels), **result.as_dict()}
        click.echo(
            f"delta={result.delta:+.3f}  95% CI [{result.ci_low:.3f}, {result.ci_high:.3f}]  p={result.p_value:.4g}"
        )
        _write_report(report, out_path)


@stats_cmd.command("spearman")
@click.argument("input_a", type=click.Path(exists=False))
@click.argument("input_b", type=click.Path(exists=False))
@click.option("--metric", type=click.Choice(["trust", "accuracy"]), default="trust", show_default=True)
@click.option("--report", "out_path", default=None)
def stats_spearman(input_a: str, input_b: str, metric: str, out_path: str | None) -> None:
    """Rank correlation between two per-case metric files."""
    try:
        samples = _paired_from_files(input_a, input_b, metric)
        rho = stats.spearman(samples.a, samples.b)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        _fail(EXIT_CONFIG, f"cannot parse inputs: {exc}")
    except _STATS_ERRORS as exc:
        _fail(EXIT_STATS, str(exc))
    else:
        click.echo(f"spearman_rho={rho:.4f} over {len(samples.labels)} cases")
        _write_report({"metric": metric, "n_cases": len(samples.labels), "spearman_rho": rho}, out_path)


@stats_cmd.command("icc")
@click.option("--export", "export_path", required=True, type=click.Path(exists=False), help="Rating-export JSON.")
@click.option("--component", type=click.Choice(list("DRWBQY")), default="D", show_default=True)
@click.option("--report", "out_path", default=None)
def stats_icc(export_path: str, component: str, out_path: str | None) -> None:
    """ICC(2,k) over the exported rater x target grid for one component."""
    try:
        export = json.loads(Path(export_path).read_text(encoding="utf-8"))
        grid = export["components"][component]
        matrix = stats.RatingsMatrix(
            values=tuple(tuple(row) for row in grid["values"]),
            rater_ids=tuple(grid["rater_ids"]),
            target_ids=tuple(grid["target_ids"]),
        )
        value = stats.icc2k(matrix)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        _fail(EXIT_CONFIG, f"cannot parse export: {exc}")
    except _STATS_ERRORS as exc:
        _fail(EXIT_STATS, str(exc))
    else:
        click.echo(f"ICC(2,k) = {value:.4f} for component {component}")
        _write_report({"component": component, "icc2k": value}, out_path)


@stats_cmd.command("calibration")
@click.option("--run", "run_id", required=True)
@click.option("--out", default="runs", show_default=True, help="Run store root directory.")
@click.option("--threshold", type=click.IntRange(1, 5), default=stats.DEFAULT_CORRECTNESS_THRESHOLD, show_default=True)
@click.option("--report", "out_path", default=None)
def stats_calibration(run_id: str, out: str, threshold: int, out_path: str | None) -> None:
    """Confidence-bin calibration over a scored run."""
    store = RunStore(out)
    try:
        sheets_path = store.run_dir(run_id) / "score_sheets.jsonl"
        records: list[stats.CalibrationRecord] = []
        for line in sheets_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            sheet = scoring.sheet_from_record(json.loads(line))
            fusion = store.latest_fusion(run_id, sheet.case_id, 3)
            traj = builder.parse_canonical(fusion["trajectory"], stage=3)
            records.append(
                stats.CalibrationRecord.from_score(
                    sheet.case_id, traj.Q.confidence, sheet.dims["Y"].aggregated, threshold=threshold
                )
            )
        report = stats.calibration_report(records, threshold=threshold)
    except (OSError, json.JSONDecodeError, KeyError, AttributeError) as exc:
        _fail(EXIT_CONFIG, f"cannot read scored run {run_id!r}: {exc}")
    except _STATS_ERRORS as exc:
        _fail(EXIT_STATS, str(exc))
    else:
        for name in stats.CONFIDENCE_BINS:
            b = report["bins"][name]
            acc = "n/a" if b["accuracy"] is None else f"{b['accuracy']:.1f}%"
            click.echo(f"{name:>6}: accuracy {acc}  proportion {b['proportion']:.1f}%  n={b['n']}")
        click.echo(f"overconfidence_error={report['overconfidence_error']:.1f}")
        _write_report(report, out_path)


@main.command()
@click.option("--corpus", "corpus_path", required=True, type=click.Path())
@click.option("--runs", "run_ids", required=True, multiple=True, help="Run ids under evaluation (repeatable).")
@click.option("--cases", "n_cases", type=int, default=50, show_default=True)
@click.option("--raters", "n_raters", type=int, default=3, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", default="runs", show_default=True, help="Run store root directory.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8810, show_default=True)
def serve(
    corpus_path: str,
    run_ids: tuple[str, ...],
    n_cases: int,
    n_raters: int,
    seed: int,
    out: str,
    host: str,
    port: int,
) -> None:
    """Create a blinded rating study and serve it over HTTP."""
    from .service import StudyManager, create_app

    corpus = _load_corpus(corpus_path, None)
    store = RunStore(out)
    manager = StudyManager(store, corpus)
    try:
        study = manager.create_study(list(run_ids), n_cases=n_cases, n_raters=n_raters, seed=seed)
    except ClinargError as exc:
        _fail(EXIT_CONFIG, str(exc))

    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.bind((host, port))
    except OSError:
        _fail(EXIT_PORT, f"port {port} is already in use")
    finally:
        probe.close()

    click.echo(f"study {study.study_id} over runs: {', '.join(study.runs)}")
    for rater, session_id in study.sessions.items():
        click.echo(f"  {rater}: http://{host}:{port}/sessions/{session_id}")
    import uvicorn

    uvicorn.run(create_app(manager), host=host, port=port, log_level="warning")


if __name__ == "__main__":
    main()
