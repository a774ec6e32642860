"""Exception types shared across the pipeline."""

from __future__ import annotations


class NoveltyCheckError(Exception):
    """Base class for all pipeline errors."""


class InvalidInputError(NoveltyCheckError, ValueError):
    """A precondition on a pure operation was violated."""


class ContributionRejected(InvalidInputError):
    """A raw contribution lacked the required fields and was dropped."""


class ParseFailureError(NoveltyCheckError):
    """Structured-output parsing failed after every fallback.

    Carries the raw model output so callers can log or persist it.
    """

    def __init__(self, message: str, raw: str) -> None:
        super().__init__(message)
        self.raw = raw


class LlmError(NoveltyCheckError):
    """A language-model client call failed."""


class SearchError(NoveltyCheckError):
    """A search client call failed."""


class PhaseAbortError(NoveltyCheckError):
    """A pipeline phase cannot continue; carries the phase tag."""

    def __init__(self, phase: str, message: str) -> None:
        super().__init__(f"[{phase}] {message}")
        self.phase = phase


class RetrievalEmptyError(PhaseAbortError):
    """Every retrieval query failed; nothing to filter."""

    def __init__(self, message: str = "all queries failed") -> None:
        super().__init__("phase2", message)


class AssemblyError(NoveltyCheckError):
    """A required report module is missing or inconsistent."""


class RenderError(NoveltyCheckError):
    """The renderer hit an unresolvable reference or invalid input."""
