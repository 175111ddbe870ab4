"""Prompt templates and rendering.

Four templates drive the whole pipeline: stage-wise candidate generation,
trajectory fusion, rubric-guided judging, and qualifier/diagnosis
regeneration.  Placeholders are ``{UPPER_SNAKE}`` tokens; rendering is a
single substitution pass, so braces inside bound text (case narratives,
JSON fragments) are never re-interpreted.
"""

from __future__ import annotations

import re
from typing import Mapping

from .errors import MissingBinding, UnknownTemplate

_PLACEHOLDER = re.compile(r"\{([A-Za-z_]+)\}")

STAGE_CANDIDATE_TEMPLATE = """\
You are a careful clinician. Follow the output format strictly. You will be
given a clinical case and (optionally) a stage context. Generate ONLY the
requested component(s).

Requested field(s): {TARGET_FIELDS}

Rules:
1. Output MUST be valid JSON and MUST contain ONLY the requested field(s).
2. Do NOT add any other keys.
3. Do NOT invent evidence or diagnoses not supported by the case/context.
4. Keep the output concise, factual, and clinically grounded.
5. Use double quotes for all strings and keys.

Case:
{CASE}

Stage context (may be empty):
{STAGE_CONTEXT}

Output format:
{OUTPUT_FORMAT}
"""

FUSION_TEMPLATE = """\
You are an expert clinical writer. Produce a coherent structured argument.
Merge the selected components into ONE consistent JSON object with keys:
{TARGET_FIELDS}

Hard constraints:
1. Do NOT add new evidence beyond the provided D list.
2. Do NOT introduce any diagnosis not already present in the provided R list.
3. The final claim Y must be consistent with D and the reasoning (W, B).
4. Do NOT fabricate citations or new facts not supported by the case.
5. Output ONLY valid JSON. No extra text.

Typing constraints (must hold exactly):
- "B" MUST be a string.
- "Q" MUST contain ONLY {{confidence, uncertainty, missing_info}}.

Revision encoding (no extra fields allowed):
If Y differs from the top diagnosis in R (rank = 1), Q.uncertainty MUST
begin with:
"[Evidence-Based Revision] Initial hypothesis: ... Pivot evidence: ... Therefore revise to: ..."

Case:
{CASE}

Selected components:
D: {D_STAR}
R: {R_STAR}
W: {W_STAR}
B: {B_STAR}
Q: {Q_STAR}
Y: {Y_STAR}

Return exactly one JSON object with the requested keys.
"""

JUDGE_TEMPLATE = """\
You are an expert evaluator of medical reasoning quality. Your task is to
rigorously assess the AI model's diagnostic output against the standard
diagnosis.

Evaluation focus: {FOCUS}

Evaluation criteria (rate each 1.0-5.0):
- data_score: Are all key facts correctly extracted without errors or omissions?
- warrant_score: Is the chain from data to hypothesis clear, sound, and medically valid?
- backing_score: Are cited guidelines or medical knowledge accurate and relevant?
- rebuttal_score: Are the major alternative diagnoses addressed with specific reasoning for exclusion?
- qualifier_score: Does the output appropriately calibrate diagnostic confidence, uncertainty, and missing information?
- claim_correct: does the final diagnosis match the standard diagnosis (A)?
  5.0 = exact match; 4.0 = near-synonym/variant; 3.0 = partially correct;
  2.0 = mostly incorrect; 1.0 = incorrect.

Output format:

Return a strict JSON object only, with no extra text or commentary.

{{"data_score": 0.0,
"warrant_score": 0.0,
"backing_score": 0.0,
"rebuttal_score": 0.0,
"qualifier_score": 0.0,
"claim_correct": 0.0,
"overall_analysis": "..."}}

Objects to evaluate:

Standard Diagnosis (A): {A}
Model Output: {model_output}

Begin evaluation. Output valid JSON only.
"""

REGEN_QY_TEMPLATE = """\
You are a careful clinician finalizing a diagnostic argument. The argument
context below is fixed. Regenerate ONLY the fields Q and Y so that the
final diagnosis Y is one of the diagnoses already listed in R, with a
qualifier Q calibrated accordingly.

Rules:
1. Output MUST be valid JSON and MUST contain ONLY the keys Q and Y.
2. Y MUST be a diagnosis already present in R.
3. "Q" MUST contain ONLY {{confidence, uncertainty, missing_info}}.
4. If Y differs from the rank-1 diagnosis in R, Q.uncertainty MUST begin
   with:
"[Evidence-Based Revision] Initial hypothesis: ... Pivot evidence: ... Therefore revise to: ..."

Case:
{CASE}

Argument context:
{STAGE_CONTEXT}

Output format:
{OUTPUT_FORMAT}
"""

TEMPLATES: dict[str, str] = {
    "stage_candidate": STAGE_CANDIDATE_TEMPLATE,
    "fusion": FUSION_TEMPLATE,
    "judge": JUDGE_TEMPLATE,
    "regen_qy": REGEN_QY_TEMPLATE,
}

# JSON skeletons bound to {OUTPUT_FORMAT} per requested field.
_FIELD_SKELETONS: dict[str, str] = {
    "D": '"D": ["..."]',
    "R": '"R": [{"dx": "...", "rank": 1, "reason": "..."}]',
    "W": '"W": "..."',
    "B": '"B": "..."',
    "Q": '"Q": {"confidence": "low|medium|high", "uncertainty": ["..."], "missing_info": ["..."]}',
    "Y": '"Y": "..."',
}


def output_format_for(fields: tuple[str, ...] | list[str]) -> str:
    return "{" + ", ".join(_FIELD_SKELETONS[f] for f in fields) + "}"


def required_placeholders(template_id: str) -> tuple[str, ...]:
    """Placeholders a template demands, in order of first appearance.

    Doubled braces are literal text, not placeholders.
    """
    if template_id not in TEMPLATES:
        raise UnknownTemplate(f"unknown template {template_id!r}")
    text = TEMPLATES[template_id].replace("{{", "").replace("}}", "")
    seen: list[str] = []
    for match in _PLACEHOLDER.finditer(text):
        name = match.group(1)
        if name not in seen:
            seen.append(name)
    return tuple(seen)


def render_prompt(template_id: str, bindings: Mapping[str, str]) -> str:
    """Substitute every placeholder of a template in one pass.

    Raises :class:`UnknownTemplate` or :class:`MissingBinding` (naming the
    first unbound placeholder).
    """
    if template_id not in TEMPLATES:
        raise UnknownTemplate(f"unknown template {template_id!r}")
    for name in required_placeholders(template_id):
        if name not in bindings:
            raise MissingBinding(name)
    template = TEMPLATES[template_id]
    # Protect literal braces, substitute, then restore.
    text = template.replace("{{", "\x00").replace("}}", "\x01")
    text = _PLACEHOLDER.sub(lambda m: str(bindings[m.group(1)]), text)
    return text.replace("\x00", "{").replace("\x01", "}")


def judge_focus(dim: str | None) -> str:
    """Text for the judge's {FOCUS} binding."""
    names = {
        "D": "clinical evidence (data_score)",
        "R": "differential diagnosis (rebuttal_score)",
        "W": "pathophysiological rationale (warrant_score)",
        "B": "principled justification (backing_score)",
        "Q": "certainty assessment (qualifier_score)",
        "Y": "final diagnosis (claim_correct)",
    }
    if dim is None:
        return "all six components"
    return f"component {dim}: {names[dim]}"
