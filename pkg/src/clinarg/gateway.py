"""Uniform access to chat-completion providers.

One provider profile per role (``strategy`` generates components and
fusions, ``judge`` scores them).  The gateway renders prompts, throttles to
a per-provider rate limit, retries transient transport failures with
exponential backoff, and never logs or persists API keys (they are read
from the environment variable named in the profile).

The :class:`MockProvider` is a fully offline stand-in: its output is a pure
function of (template, bindings, seed, candidate_index), which makes whole
pipeline runs reproducible byte-for-byte, and it can inject malformed
output for fault-tolerance tests.
"""

from __future__ import annotations

import json
import os
import random
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

from . import prompts
from .argument import REVISION_MARKER, normalize_diagnosis
from .errors import (
    AuthError,
    GatewayTimeout,
    MultipleObjects,
    NotJson,
    ProviderUnavailable,
)
from .hashing import stable_int

ROLE_TAGS = ("strategy", "judge")


@dataclass(frozen=True)
class DecodingParams:
    temperature: float
    top_p: float
    max_new_tokens: int
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if not (0 < self.top_p <= 1):
            raise ValueError("top_p must be in (0, 1]")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be positive")

    def with_seed(self, seed: int | None) -> "DecodingParams":
        return DecodingParams(self.temperature, self.top_p, self.max_new_tokens, seed)


#: Candidate/fusion sampling profile.
SAMPLING_PROFILE = DecodingParams(temperature=0.7, top_p=0.95, max_new_tokens=512)
#: Judge profile; the token budget is configurable per profile.
JUDGE_PROFILE = DecodingParams(temperature=0.0, top_p=1.0, max_new_tokens=512)
#: Greedy generation profile for final evaluation outputs.
GREEDY_PROFILE = DecodingParams(temperature=0.0, top_p=1.0, max_new_tokens=512)


@dataclass(frozen=True)
class PromptRequest:
    template_id: str
    bindings: Mapping[str, str]
    decoding: DecodingParams
    role_tag: str

    def __post_init__(self):
        if self.role_tag not in ROLE_TAGS:
            raise ValueError(f"role_tag must be one of {ROLE_TAGS}")


@dataclass(frozen=True)
class CompletionResult:
    raw_text: str
    provider_id: str
    latency_ms: int
    attempt: int


@dataclass(frozen=True)
class RetryPolicy:
    base_delay: float = 0.5
    factor: float = 2.0
    jitter: float = 0.2
    max_attempts: int = 5


@dataclass(frozen=True)
class ProviderConfig:
    role: str
    base_url: str
    model_name: str
    api_key_env: str
    rate_limit_per_min: int | None = None
    max_retries: int = 4


def load_provider_profiles(path: str) -> dict[str, ProviderConfig]:
    """Read a JSON profile file mapping role -> provider settings."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    profiles: dict[str, ProviderConfig] = {}
    for role in ROLE_TAGS:
        if role not in raw:
            raise ValueError(f"provider profile missing role {role!r}")
        entry = dict(raw[role])
        entry.setdefault("role", role)
        profiles[role] = ProviderConfig(**entry)
    return profiles


class _TransientError(Exception):
    pass


class _TimeoutError(Exception):
    pass


def extract_json(raw_text: str, mode: str = "strict") -> dict[str, Any]:
    """Pull exactly one JSON object out of model text.

    ``strict`` requires the entire trimmed text to be one object.
    ``tolerant`` additionally accepts exactly one fenced code block holding
    one object.  Multiple objects are never merged.
    """
    if mode not in ("strict", "tolerant"):
        raise ValueError(f"mode must be 'strict' or 'tolerant', got {mode!r}")
    text = raw_text.strip()
    try:
        return _single_object(text)
    except (NotJson, MultipleObjects):
        if mode == "strict":
            raise
    blocks = re.findall(r"```[A-Za-z0-9_-]*\n?(.*?)```", text, flags=re.S)
    if len(blocks) > 1:
        raise MultipleObjects("more than one fenced code block")
    if not blocks:
        raise NotJson("no JSON object and no fenced code block found")
    return _single_object(blocks[0].strip())


def _single_object(text: str) -> dict[str, Any]:
    decoder = json.JSONDecoder()
    try:
        value, end = decoder.raw_decode(text)
    except json.JSONDecodeError as exc:
        raise NotJson(f"not a JSON object: {exc}") from exc
    rest = text[end:].strip()
    if rest:
        if rest.startswith("{"):
            raise MultipleObjects("more than one JSON object in output")
        raise NotJson("trailing text after JSON object")
    if not isinstance(value, dict):
        raise NotJson("top-level JSON value is not an object")
    return value


class RateLimiter:
    """Sliding-window limiter: at most ``per_min`` acquisitions per 60 s."""

    def __init__(self, per_min: int | None, clock: Callable[[], float], sleep: Callable[[float], None]):
        self.per_min = per_min
        self._clock = clock
        self._sleep = sleep
        self._stamps: list[float] = []
        self._lock = threading.Lock()

    def acquire(self) -> None:
        if not self.per_min:
            return
        with self._lock:
            while True:
                now = self._clock()
                self._stamps = [t for t in self._stamps if now - t < 60.0]
                if len(self._stamps) < self.per_min:
                    self._stamps.append(now)
                    return
                self._sleep(self._stamps[0] + 60.0 - now)


class MockProvider:
    """Deterministic offline provider for both roles.

    ``fault_rate`` injects malformed (non-JSON) output with a probability
    derived from the request hash; ``fail_judge_indices`` disables specific
    judge panel slots; ``fixed_judge_score`` pins every judge score field.
    """

    provider_id = "mock"
    rate_limit_per_min: int | None = None

    def __init__(
        self,
        seed: int = 0,
        fault_rate: float = 0.0,
        fail_judge_indices: tuple[int, ...] = (),
        fixed_judge_score: float | None = None,
    ):
        self.seed = seed
        self.fault_rate = fault_rate
        self.fail_judge_indices = tuple(fail_judge_indices)
        self.fixed_judge_score = fixed_judge_score
        self.call_count = 0

    def generate(self, request: PromptRequest, prompt: str, candidate_index: int) -> str:
        self.call_count += 1
        return mock_generate(
            request,
            candidate_index,
            seed=self.seed,
            fault_rate=self.fault_rate,
            fail_judge_indices=self.fail_judge_indices,
            fixed_judge_score=self.fixed_judge_score,
        )


_MALFORMED_TEXT = "After careful review the panel could not produce a structured verdict."

_EVIDENCE_TERMS = (
    "persistent fever",
    "elevated white cell count",
    "hypotension on admission",
    "rising serum lactate",
    "new regurgitant murmur",
    "night sweats for two weeks",
    "unintentional weight loss",
    "pleuritic chest pain",
    "microscopic hematuria",
    "elevated troponin",
    "patchy lower-lobe infiltrate",
    "tender temporal artery",
)

_DX_TERMS = (
    "sepsis",
    "infective endocarditis",
    "community-acquired pneumonia",
    "pulmonary embolism",
    "giant-cell arteritis",
    "systemic lupus erythematosus",
    "acute pyelonephritis",
    "viral myocarditis",
)


def _request_rng(request: PromptRequest, candidate_index: int, seed: int) -> random.Random:
    key = stable_int(
        request.template_id,
        dict(request.bindings),
        seed,
        request.decoding.seed,
        candidate_index,
    )
    return random.Random(key)


def _rotate(pool: tuple[str, ...], offset: int) -> list[str]:
    k = offset % len(pool)
    return list(pool[k:] + pool[:k])


def _context_doc(bindings: Mapping[str, str]) -> dict[str, Any]:
    raw = bindings.get("STAGE_CONTEXT", "")
    if not raw or not raw.strip():
        return {}
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError:
        return {}
    return doc if isinstance(doc, dict) else {}


def _rebuttal_dxs(doc: Mapping[str, Any]) -> list[str]:
    entries = doc.get("R") or []
    ranked = sorted(
        (e for e in entries if isinstance(e, Mapping) and "dx" in e and "rank" in e),
        key=lambda e: e["rank"],
    )
    return [e["dx"] for e in ranked]


def mock_generate(
    request: PromptRequest,
    candidate_index: int,
    *,
    seed: int = 0,
    fault_rate: float = 0.0,
    fail_judge_indices: tuple[int, ...] = (),
    fixed_judge_score: float | None = None,
) -> str:
    """Deterministic synthetic completion for any template.

    Output depends only on (template_id, bindings, seed, decoding seed,
    candidate_index), so identical requests yield identical text.
    """
    rng = _request_rng(request, candidate_index, seed)
    if request.template_id == "judge" and candidate_index in fail_judge_indices:
        return _MALFORMED_TEXT
    if fault_rate and rng.random() < fault_rate:
        return _MALFORMED_TEXT

    if request.template_id == "judge":
        return _mock_judge(request.bindings, rng, fixed_judge_score)
    if request.template_id == "fusion":
        return _mock_fusion(request.bindings)
    if request.template_id == "regen_qy":
        return _mock_regen_qy(request.bindings, rng)
    if request.template_id == "stage_candidate":
        return _mock_candidate(request.bindings, rng)
    raise ValueError(f"unknown template {request.template_id!r}")


def _mock_candidate(bindings: Mapping[str, str], rng: random.Random) -> str:
    fields = [f.strip() for f in bindings.get("TARGET_FIELDS", "").split(",") if f.strip()]
    case_offset = stable_int(bindings.get("CASE", "")) % 1000
    ctx = _context_doc(bindings)
    doc: dict[str, Any] = {}
    for dim in fields:
        doc[dim] = _mock_component(dim, ctx, rng, case_offset)
    return json.dumps(doc, ensure_ascii=False)


def _mock_component(dim: str, ctx: Mapping[str, Any], rng: random.Random, case_offset: int) -> Any:
    evidence_pool = _rotate(_EVIDENCE_TERMS, case_offset)
    dx_pool = _rotate(_DX_TERMS, case_offset)
    if dim == "D":
        k = rng.randint(3, 6)
        items = rng.sample(evidence_pool, k)
        if rng.random() < 0.35:
            # Near-duplicate variant; fusion must collapse it.
            items.append(items[0].capitalize() + ".")
        return items
    if dim == "R":
        n = rng.randint(3, 5)
        dxs = rng.sample(dx_pool, n)
        entries = []
        for i, dx in enumerate(dxs):
            if i == 0:
                reason = f"best explains {rng.choice(evidence_pool)}"
            else:
                reason = f"less likely: would expect {rng.choice(evidence_pool)}, which is absent"
            entries.append({"dx": dx, "rank": i + 1, "reason": reason})
        return entries
    top = _rebuttal_dxs(ctx)
    top_dx = top[0] if top else rng.choice(dx_pool)
    if dim == "W":
        ev = ctx.get("D") or evidence_pool
        return (
            f"The combination of {ev[0]} and {ev[-1]} fits the expected course of "
            f"{top_dx}; the timeline and severity support this mechanism."
        )
    if dim == "B":
        return (
            f"Accepted diagnostic criteria for {top_dx} are met, while the listed "
            f"alternatives lack their required findings and are ruled out."
        )
    if dim == "Q":
        return {
            "confidence": rng.choice(("low", "medium", "high")),
            "uncertainty": [f"pending confirmatory testing for {top_dx}"],
            "missing_info": ["blood culture results", "imaging follow-up"],
        }
    if dim == "Y":
        roll = rng.random()
        if top:
            if roll < 0.70 or len(top) == 1:
                return top[0]
            if roll < 0.95:
                return top[1]
            return "occult metastatic malignancy"  # outside R: exercises the conflict path
        return top_dx
    raise ValueError(f"unknown dimension {dim!r}")


def _json_or_none(text: str) -> Any:
    try:
        return json.loads(text)
    except (TypeError, json.JSONDecodeError):
        return None


def _mock_fusion(bindings: Mapping[str, str]) -> str:
    fields = [f.strip() for f in bindings.get("TARGET_FIELDS", "").split(",") if f.strip()]
    doc: dict[str, Any] = {}
    for dim in fields:
        value = _json_or_none(bindings.get(f"{dim}_STAR", "null"))
        if value is not None:
            doc[dim] = value
    _apply_revision_marker(doc)
    return json.dumps(doc, ensure_ascii=False)


def _mock_regen_qy(bindings: Mapping[str, str], rng: random.Random) -> str:
    ctx = _context_doc(bindings)
    dxs = _rebuttal_dxs(ctx)
    y = dxs[0] if dxs else "undifferentiated systemic illness"
    if len(dxs) > 1 and rng.random() < 0.4:
        y = dxs[1]
    doc: dict[str, Any] = {
        "Q": {
            "confidence": rng.choice(("low", "medium")),
            "uncertainty": ["reassessed after consistency review"],
            "missing_info": ["repeat laboratory panel"],
        },
        "Y": y,
    }
    doc["R"] = ctx.get("R", [])
    _apply_revision_marker(doc)
    doc.pop("R", None)
    return json.dumps(doc, ensure_ascii=False)


def _apply_revision_marker(doc: dict[str, Any]) -> None:
    """Keep Q.uncertainty consistent with whether Y revises the rank-1 dx."""
    if "Y" not in doc or "Q" not in doc or not isinstance(doc.get("Q"), dict):
        return
    dxs = _rebuttal_dxs(doc)
    if not dxs:
        return
    y = doc["Y"]
    revised = normalize_diagnosis(str(y)) != normalize_diagnosis(str(dxs[0]))
    in_r = normalize_diagnosis(str(y)) in {normalize_diagnosis(str(d)) for d in dxs}
    q = doc["Q"]
    uncertainty = [u for u in q.get("uncertainty", []) if not str(u).startswith(REVISION_MARKER)]
    if revised and in_r:
        pivot = (doc.get("D") or ["the overall evidence"])[0]
        marker = (
            f"{REVISION_MARKER} Initial hypothesis: {dxs[0]}. "
            f"Pivot evidence: {pivot}. Therefore revise to: {y}."
        )
        uncertainty = [marker] + uncertainty
    if not uncertainty:
        uncertainty = ["residual diagnostic uncertainty acknowledged"]
    q["uncertainty"] = uncertainty


def _mock_judge(bindings: Mapping[str, str], rng: random.Random, fixed: float | None) -> str:
    if fixed is not None:
        scores = {name: float(fixed) for name in (
            "data_score", "warrant_score", "backing_score", "rebuttal_score", "qualifier_score", "claim_correct",
        )}
    else:
        def draw() -> float:
            return min(5.0, max(1.0, round(rng.triangular(1.0, 5.0, 3.8) * 2) / 2))

        scores = {
            "data_score": draw(),
            "warrant_score": draw(),
            "backing_score": draw(),
            "rebuttal_score": draw(),
            "qualifier_score": draw(),
            "claim_correct": draw(),
        }
        output = _json_or_none(bindings.get("model_output", ""))
        gold = bindings.get("A", "")
        if isinstance(output, dict) and output.get("Y") and gold:
            if normalize_diagnosis(str(output["Y"])) == normalize_diagnosis(gold):
                scores["claim_correct"] = 5.0
            else:
                scores["claim_correct"] = min(scores["claim_correct"], 4.0)
    verdict = dict(scores)
    verdict["overall_analysis"] = "Structured argument reviewed against the standard diagnosis."
    return json.dumps(verdict, ensure_ascii=False)


class HttpProvider:
    """OpenAI-style chat-completions transport for one provider profile."""

    def __init__(self, config: ProviderConfig, transport: Callable[..., tuple[int, str]] | None = None, timeout: float = 60.0):
        self.config = config
        self.provider_id = config.model_name
        self.rate_limit_per_min = config.rate_limit_per_min
        self._transport = transport or _requests_transport
        self._timeout = timeout

    def generate(self, request: PromptRequest, prompt: str, candidate_index: int) -> str:
        api_key = os.environ.get(self.config.api_key_env, "")
        headers = {"Content-Type": "application/json"}
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        payload: dict[str, Any] = {
            "model": self.config.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": request.decoding.temperature,
            "top_p": request.decoding.top_p,
            "max_tokens": request.decoding.max_new_tokens,
        }
        if request.decoding.seed is not None:
            payload["seed"] = request.decoding.seed
        try:
            status, body = self._transport(self.config.base_url, headers, payload, self._timeout)
        except _TimeoutError:
            raise
        if status in (401, 403):
            raise AuthError(f"provider rejected credentials (HTTP {status})")
        if status == 429 or status >= 500:
            raise _TransientError(f"HTTP {status}")
        if status != 200:
            raise ProviderUnavailable(f"unexpected HTTP {status} from provider")
        try:
            data = json.loads(body)
            return data["choices"][0]["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise _TransientError(f"unparseable provider response: {exc}")


def _requests_transport(url: str, headers: dict[str, str], payload: dict[str, Any], timeout: float) -> tuple[int, str]:
    import requests

    try:
        resp = requests.post(url, headers=headers, json=payload, timeout=timeout)
    except requests.Timeout as exc:
        raise _TimeoutError(str(exc)) from exc
    except requests.RequestException as exc:
        raise _TransientError(str(exc)) from exc
    return resp.status_code, resp.text


class Gateway:
    """Shared, thread-safe entry point for all model calls."""

    def __init__(
        self,
        providers: Mapping[str, Any],
        *,
        retry: RetryPolicy = RetryPolicy(),
        clock: Callable[[], float] = time.monotonic,
        sleep: Callable[[float], None] = time.sleep,
        max_in_flight: int = 8,
    ):
        missing = [r for r in ROLE_TAGS if r not in providers]
        if missing:
            raise ValueError(f"no provider configured for roles: {missing}")
        self._providers = dict(providers)
        self._retry = retry
        self._clock = clock
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._jitter_rng = random.Random(0)
        self._limiters = {
            role: RateLimiter(getattr(p, "rate_limit_per_min", None), clock, sleep)
            for role, p in self._providers.items()
        }

    def provider_for(self, role_tag: str):
        return self._providers[role_tag]

    def complete(self, request: PromptRequest, candidate_index: int = 0) -> CompletionResult:
        provider = self._providers[request.role_tag]
        prompt = prompts.render_prompt(request.template_id, request.bindings)
        limiter = self._limiters[request.role_tag]
        last_error: Exception | None = None
        timed_out = False
        with self._slots:
            start = self._clock()
            for attempt in range(1, self._retry.max_attempts + 1):
                limiter.acquire()
                try:
                    text = provider.generate(request, prompt, candidate_index)
                except AuthError:
                    raise
                except _TimeoutError as exc:
                    last_error, timed_out = exc, True
                except _TransientError as exc:
                    last_error, timed_out = exc, False
                else:
                    latency = max(0, int((self._clock() - start) * 1000))
                    return CompletionResult(
                        raw_text=text,
                        provider_id=provider.provider_id,
                        latency_ms=latency,
                        attempt=attempt,
                    )
                if attempt < self._retry.max_attempts:
                    delay = self._retry.base_delay * (self._retry.factor ** (attempt - 1))
                    delay *= 1 + self._jitter_rng.uniform(-self._retry.jitter, self._retry.jitter)
                    self._sleep(max(0.0, delay))
        if timed_out:
            raise GatewayTimeout(f"provider timed out after {self._retry.max_attempts} attempts: {last_error}")
        raise ProviderUnavailable(f"provider unavailable after {self._retry.max_attempts} attempts: {last_error}")


def mock_gateway(
    seed: int = 0,
    *,
    fault_rate: float = 0.0,
    fail_judge_indices: tuple[int, ...] = (),
    fixed_judge_score: float | None = None,
    max_in_flight: int = 8,
) -> Gateway:
    """Gateway backed by one deterministic mock provider for both roles."""
    provider = MockProvider(
        seed=seed,
        fault_rate=fault_rate,
        fail_judge_indices=fail_judge_indices,
        fixed_judge_score=fixed_judge_score,
    )
    return Gateway(
        {"strategy": provider, "judge": provider},
        sleep=lambda _s: None,
        max_in_flight=max_in_flight,
    )


def gateway_from_profiles(path: str, *, max_in_flight: int = 8) -> Gateway:
    profiles = load_provider_profiles(path)
    providers = {role: HttpProvider(cfg) for role, cfg in profiles.items()}
    retry = RetryPolicy(max_attempts=max(cfg.max_retries for cfg in profiles.values()) + 1)
    return Gateway(providers, retry=retry, max_in_flight=max_in_flight)
