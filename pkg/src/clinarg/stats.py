"""Statistical suite: paired bootstrap, Spearman rho, ICC(2,k), calibration.

The bootstrap resamples case indices with replacement and reports the 95%
percentile interval with a two-sided sign-fraction p-value (floored at
2/resamples).  ICC(2,k) follows the standard two-way random-effects
average-measures definition with targets as rows and raters as columns.
Calibration bins predictions by the generated confidence level and reports
per-bin accuracy plus the overconfidence error: the share of all
predictions that are wrong yet marked high confidence.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Mapping, Sequence

import numpy as np

from .errors import (
    EmptyInput,
    IncompleteGrid,
    LengthMismatch,
    OutOfRange,
    TooFewCases,
    ZeroVariance,
)

CONFIDENCE_BINS = ("low", "medium", "high")

#: Claim scores at or above this Likert value count as a correct diagnosis.
DEFAULT_CORRECTNESS_THRESHOLD = 4


@dataclass(frozen=True)
class PairedSamples:
    labels: tuple[str, ...]
    a: tuple[float, ...]
    b: tuple[float, ...]

    def __post_init__(self):
        if not (len(self.labels) == len(self.a) == len(self.b)):
            raise LengthMismatch(
                f"labels/a/b must have equal lengths, got {len(self.labels)}/{len(self.a)}/{len(self.b)}"
            )
        if len(self.labels) < 2:
            raise TooFewCases("paired samples need at least 2 cases")


@dataclass(frozen=True)
class BootstrapResult:
    delta: float
    ci_low: float
    ci_high: float
    p_value: float
    resamples: int
    seed: int

    def as_dict(self) -> dict[str, Any]:
        return {
            "delta": self.delta,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "p_value": self.p_value,
            "resamples": self.resamples,
            "seed": self.seed,
            "ci_method": "percentile",
            "p_sides": "two-sided",
        }


@dataclass(frozen=True)
class RatingsMatrix:
    """Complete rater x target grid; ``values[i][j]`` is rater i on target j."""

    values: tuple[tuple[float, ...], ...]
    rater_ids: tuple[str, ...]
    target_ids: tuple[str, ...]


@dataclass(frozen=True)
class CalibrationRecord:
    case_id: str
    confidence: str
    claim_score: int
    correct: bool

    def __post_init__(self):
        if self.confidence not in CONFIDENCE_BINS:
            raise OutOfRange(f"confidence must be one of {CONFIDENCE_BINS}, got {self.confidence!r}")
        if not (1 <= self.claim_score <= 5):
            raise OutOfRange(f"claim_score must be in [1, 5], got {self.claim_score}")

    @classmethod
    def from_score(
        cls,
        case_id: str,
        confidence: str,
        claim_score: int,
        threshold: int = DEFAULT_CORRECTNESS_THRESHOLD,
    ) -> "CalibrationRecord":
        return cls(case_id=case_id, confidence=confidence, claim_score=claim_score, correct=claim_score >= threshold)


def paired_bootstrap(samples: PairedSamples, resamples: int = 10000, seed: int = 0) -> BootstrapResult:
    """Bootstrap the mean paired difference mean(a) - mean(b)."""
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    diffs = np.asarray(samples.a, dtype=float) - np.asarray(samples.b, dtype=float)
    n = diffs.size
    delta = float(diffs.mean())
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, n, size=(resamples, n))
    boot = diffs[idx].mean(axis=1)
    ci_low, ci_high = np.percentile(boot, [2.5, 97.5])
    p = 2.0 * min(float(np.mean(boot <= 0)), float(np.mean(boot >= 0)))
    p = min(1.0, max(2.0 / resamples, p))
    return BootstrapResult(
        delta=delta,
        ci_low=float(ci_low),
        ci_high=float(ci_high),
        p_value=p,
        resamples=resamples,
        seed=seed,
    )


def _average_ranks(values: Sequence[float]) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    order = np.argsort(arr, kind="mergesort")
    ranks = np.empty(arr.size, dtype=float)
    i = 0
    while i < arr.size:
        j = i
        while j + 1 < arr.size and arr[order[j + 1]] == arr[order[i]]:
            j += 1
        # Tied block [i, j] gets the average of ranks i+1 .. j+1.
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation: Pearson correlation of average ranks."""
    if len(x) != len(y):
        raise LengthMismatch(f"inputs must have equal lengths, got {len(x)} and {len(y)}")
    if len(x) < 2:
        raise TooFewCases("spearman needs at least 2 observations")
    rx = _average_ranks(x)
    ry = _average_ranks(y)
    if np.all(rx == rx[0]) or np.all(ry == ry[0]):
        raise ZeroVariance("an input has no rank variance")
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx @ ry) / np.sqrt((rx @ rx) * (ry @ ry)))


def icc2k(matrix: RatingsMatrix) -> float:
    """Two-way random-effects, average-measures intraclass correlation.

    Targets are ANOVA rows and raters columns; the result can be negative
    for pathological grids but never exceeds 1.
    """
    values = matrix.values
    k = len(values)
    if k < 2:
        raise IncompleteGrid("need at least 2 raters")
    n = len(values[0])
    if n < 2:
        raise IncompleteGrid("need at least 2 targets")
    for row in values:
        if len(row) != n:
            raise IncompleteGrid("ragged ratings grid")
        for cell in row:
            if cell is None or (isinstance(cell, float) and np.isnan(cell)):
                raise IncompleteGrid("ratings grid has missing cells")
    x = np.asarray(values, dtype=float).T  # targets x raters
    grand = x.mean()
    row_means = x.mean(axis=1)
    col_means = x.mean(axis=0)
    ss_rows = k * float(((row_means - grand) ** 2).sum())
    ss_cols = n * float(((col_means - grand) ** 2).sum())
    ss_total = float(((x - grand) ** 2).sum())
    ss_error = ss_total - ss_rows - ss_cols
    ms_rows = ss_rows / (n - 1)
    ms_cols = ss_cols / (k - 1)
    ms_error = ss_error / ((n - 1) * (k - 1))
    denom = ms_rows + (ms_cols - ms_error) / n
    if denom == 0:
        raise ZeroVariance("degenerate grid: zero denominator")
    return (ms_rows - ms_error) / denom


def calibration_report(
    records: Sequence[CalibrationRecord],
    threshold: int = DEFAULT_CORRECTNESS_THRESHOLD,
) -> dict[str, Any]:
    """Per-confidence-bin accuracy/proportion/count plus overconfidence error."""
    if not records:
        raise EmptyInput("no calibration records")
    total = len(records)
    bins: dict[str, dict[str, Any]] = {}
    for name in CONFIDENCE_BINS:
        members = [r for r in records if r.confidence == name]
        n = len(members)
        correct = sum(1 for r in members if r.correct)
        bins[name] = {
            "accuracy": (100.0 * correct / n) if n else None,
            "proportion": 100.0 * n / total,
            "n": n,
        }
    overconfident = sum(1 for r in records if r.confidence == "high" and not r.correct)
    return {
        "bins": bins,
        "overconfidence_error": 100.0 * overconfident / total,
        "n": total,
        "correctness_threshold": threshold,
    }
