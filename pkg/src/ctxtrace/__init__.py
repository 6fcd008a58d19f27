"""ctxtrace: build context-conflicting QA sets, trace which context a
reader's hybrid answer came from, and measure the generated-vs-retrieved
bias under controlled conditions."""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    BackendError,
    BackendRejectedError,
    BackendUnavailableError,
    CtxTraceError,
    EmptyResponseError,
    MissingScoreError,
    NoHitError,
    SchemaError,
    ScriptMissError,
    UndefinedMetricError,
    ValidationError,
)
