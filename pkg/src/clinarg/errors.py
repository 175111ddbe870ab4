"""Exception types shared across the pipeline.

Every error carries a stable ``code`` string; the HTTP service and the CLI
map codes to structured payloads and exit codes without string matching on
messages.
"""

from __future__ import annotations


class ClinargError(Exception):
    """Base class for all pipeline errors."""

    code = "ERROR"

    def __init__(self, message: str = ""):
        super().__init__(message or self.code)
        self.message = message or self.code


# -- argument schema --


class SchemaViolation(ClinargError):
    code = "SCHEMA_VIOLATION"

    def __init__(self, report, message: str = ""):
        self.report = report
        detail = "; ".join(f"{v.path}: {v.message}" for v in report.violations)
        super().__init__(message or detail or self.code)


class WrongStageFields(SchemaViolation):
    code = "WRONG_STAGE_FIELDS"


# -- gateway --


class UnknownTemplate(ClinargError):
    code = "UNKNOWN_TEMPLATE"


class MissingBinding(ClinargError):
    code = "MISSING_BINDING"

    def __init__(self, placeholder: str):
        self.placeholder = placeholder
        super().__init__(f"unbound placeholder: {placeholder}")


class NotJson(ClinargError):
    code = "NOT_JSON"


class MultipleObjects(ClinargError):
    code = "MULTIPLE_OBJECTS"


class ProviderUnavailable(ClinargError):
    code = "PROVIDER_UNAVAILABLE"


class GatewayTimeout(ClinargError):
    code = "TIMEOUT"


class AuthError(ClinargError):
    code = "AUTH_ERROR"


# -- scoring --


class MalformedVerdict(ClinargError):
    code = "MALFORMED"


class OutOfRange(ClinargError):
    code = "OUT_OF_RANGE"


class EmptyInput(ClinargError):
    code = "EMPTY_INPUT"


class AllJudgesFailed(ClinargError):
    code = "ALL_JUDGES_FAILED"

    def __init__(self, dim: str | None = None, message: str = ""):
        self.dim = dim
        suffix = f" (dimension {dim})" if dim else ""
        super().__init__(message or f"all judge calls malformed after one retry round{suffix}")


# -- builder --


class NoValidCandidates(ClinargError):
    code = "NO_VALID_CANDIDATES"

    def __init__(self, dim: str, message: str = ""):
        self.dim = dim
        super().__init__(message or f"no valid candidate for dimension {dim} after regeneration")


class TrajectoryRejected(ClinargError):
    code = "REJECTED"

    def __init__(self, case_id: str, stage: int, message: str = ""):
        self.case_id = case_id
        self.stage = stage
        super().__init__(message or f"fusion rejected for case {case_id} at stage {stage}")


class EmptyRun(ClinargError):
    code = "EMPTY_RUN"


# -- analytics --


class TooFewCases(ClinargError):
    code = "TOO_FEW_CASES"


class LengthMismatch(ClinargError):
    code = "LENGTH_MISMATCH"


class ZeroVariance(ClinargError):
    code = "ZERO_VARIANCE"


class IncompleteGrid(ClinargError):
    code = "INCOMPLETE_GRID"


# -- corpus / run store --


class ParseError(ClinargError):
    code = "PARSE_ERROR"

    def __init__(self, line_number: int, message: str = ""):
        self.line_number = line_number
        super().__init__(message or f"parse error at line {line_number}")


class DuplicateId(ClinargError):
    code = "DUPLICATE_ID"


class UnknownRun(ClinargError):
    code = "UNKNOWN_RUN"


class NTooLarge(ClinargError):
    code = "N_TOO_LARGE"


class StatusConflict(ClinargError):
    code = "STATUS_CONFLICT"


class StoreIOError(ClinargError):
    code = "IO_ERROR"


# -- rating service --


class RunMismatch(ClinargError):
    code = "RUN_MISMATCH"


class InsufficientCases(ClinargError):
    code = "INSUFFICIENT_CASES"


class UnknownSession(ClinargError):
    code = "UNKNOWN_SESSION"


class SessionComplete(ClinargError):
    code = "SESSION_COMPLETE"


class ItemNotServed(ClinargError):
    code = "ITEM_NOT_SERVED"


class IncompleteStudy(ClinargError):
    code = "INCOMPLETE_STUDY"
