"""Phase I: structured-output parsing, claim validation, and query synthesis.

The model does the reading; this module does the enforcement. All field
limits, query formats, and fallback parsing rules live here so that any
output the model produces is either normalized into a valid shape or
rejected with a recorded reason.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Optional, Sequence

from .clients import LlmClient
from .errors import ContributionRejected, LlmError, ParseFailureError, PhaseAbortError
from .papers import DocumentText
from .prompts import load_prompt

logger = logging.getLogger(__name__)

QUERY_PREFIX = "Find papers about "

#: Word limits from the extraction contract.
MAX_NAME_WORDS = 15
MAX_CLAIM_WORDS = 40
MAX_DESCRIPTION_WORDS = 60
MAX_QUERY_WORDS = 25
MAX_CORE_TASK_WORDS = 15
MIN_CORE_TASK_WORDS = 5
MAX_CONTRIBUTIONS = 3


@dataclass(frozen=True)
class Temperatures:
    """Sampling temperatures per extraction task, exposed in config."""

    contribution_extraction: float = 0.0
    core_task: float = 0.1
    primary_query: float = 0.0
    query_variants: float = 0.2
    analysis: float = 0.0


def word_count(text: str) -> int:
    return len(text.split())


def truncate_words(text: str, limit: int) -> str:
    words = text.split()
    if len(words) <= limit:
        return text.strip()
    return " ".join(words[:limit])


# --- robust structured-output parsing ----------------------------------------


@dataclass(frozen=True)
class ParsedOutput:
    """A parsed JSON value plus the fallback (if any) that recovered it."""

    value: Any
    fallback: Optional[str]  # None, "fence", "span", or "truncation"


_FENCE_RE = re.compile(r"```[a-zA-Z0-9_-]*[ \t]*\n?(.*?)\n?[ \t]*```", re.DOTALL)

_CLOSERS = {"{": "}", "[": "]"}


def _strip_fences(text: str) -> tuple[str, bool]:
    m = _FENCE_RE.search(text)
    if m:
        return m.group(1), True
    stripped = text.strip()
    if stripped.startswith("```"):
        stripped = stripped[3:]
        if stripped[:4].lower() == "json":
            stripped = stripped[4:]
        return stripped.strip("`").strip(), True
    return text, False


def _extract_span(text: str) -> Optional[str]:
    start = text.find("{")
    end = text.rfind("}")
    if start == -1 or end == -1 or end <= start:
        return None
    return text[start : end + 1]


def _scan_states(base: str) -> list[tuple[bool, bool, str]]:
    """Per-index parser state after consuming base[:i+1].

    Each entry is (in_string, escape_pending, open_bracket_stack).
    """
    states: list[tuple[bool, bool, str]] = []
    in_string = False
    escape = False
    stack = ""
    for ch in base:
        if in_string:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_string = False
        else:
            if ch == '"':
                in_string = True
            elif ch in "{[":
                stack += ch
            elif ch in "}]":
                if stack and _CLOSERS[stack[-1]] == ch:
                    stack = stack[:-1]
        states.append((in_string, escape, stack))
    return states


_MAX_TRUNCATION_ATTEMPTS = 2000


def _truncation_candidates(base: str) -> Iterable[str]:
    states = _scan_states(base)
    attempts = 0
    for i in range(len(base), 0, -1):
        in_string, escape, stack = states[i - 1]
        if escape:
            continue
        if in_string:
            candidate = base[:i] + '"' + "".join(_CLOSERS[c] for c in reversed(stack))
        else:
            prefix = base[:i].rstrip()
            if prefix.endswith(",") or prefix.endswith(":"):
                prefix = prefix[:-1].rstrip()
            candidate = prefix + "".join(_CLOSERS[c] for c in reversed(stack))
        attempts += 1
        yield candidate
        if attempts >= _MAX_TRUNCATION_ATTEMPTS:
            return


def _parse_truncated(text: str) -> Optional[Any]:
    start = text.find("{")
    if start == -1:
        return None
    base = text[start:]
    seen: set[str] = set()
    for candidate in _truncation_candidates(base):
        if candidate in seen:
            continue
        seen.add(candidate)
        try:
            return json.loads(candidate)
        except json.JSONDecodeError:
            continue
    return None


def parse_structured_output(raw: str) -> ParsedOutput:
    """Parse model output as JSON, applying ordered fallbacks on failure.

    Order: strict parse, code-fence stripping, first-brace-to-last-brace
    span extraction, bracket-based truncation of trailing incomplete
    content. Raises ParseFailureError (carrying the raw text) only when
    every fallback is exhausted.
    """
    if not raw or not raw.strip():
        raise ParseFailureError("empty model output", raw)
    try:
        return ParsedOutput(json.loads(raw), None)
    except json.JSONDecodeError:
        pass
    text, _ = _strip_fences(raw)
    try:
        return ParsedOutput(json.loads(text), "fence")
    except json.JSONDecodeError:
        pass
    span = _extract_span(text)
    if span is not None:
        try:
            return ParsedOutput(json.loads(span), "span")
        except json.JSONDecodeError:
            pass
    value = _parse_truncated(text)
    if value is not None:
        return ParsedOutput(value, "truncation")
    raise ParseFailureError("model output is not recoverable JSON", raw)


# --- domain types -------------------------------------------------------------


@dataclass(frozen=True)
class CoreTask:
    """The 5-15 word problem phrase plus its three retrieval queries."""

    text: str
    query_variants: tuple[str, ...] = ()
    audit_flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class ContributionClaim:
    """One author-claimed contribution with enforced field limits."""

    claim_id: str
    name: str
    author_claim_text: str = "unknown"
    description: str = "unknown"
    source_hint: str = "unknown"
    prior_work_query: Optional[str] = None
    query_variants: tuple[str, ...] = ()
    audit_flags: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "claim_id": self.claim_id,
            "name": self.name,
            "author_claim_text": self.author_claim_text,
            "description": self.description,
            "source_hint": self.source_hint,
            "prior_work_query": self.prior_work_query,
            "query_variants": list(self.query_variants),
            "audit_flags": list(self.audit_flags),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ContributionClaim":
        return cls(
            claim_id=d["claim_id"],
            name=d["name"],
            author_claim_text=d.get("author_claim_text", "unknown"),
            description=d.get("description", "unknown"),
            source_hint=d.get("source_hint", "unknown"),
            prior_work_query=d.get("prior_work_query"),
            query_variants=tuple(d.get("query_variants", ())),
            audit_flags=tuple(d.get("audit_flags", ())),
        )


@dataclass(frozen=True)
class SearchQuery:
    query_id: str
    text: str
    scope: str  # "core_task" or "contribution"
    kind: str  # "primary" or "variant"
    contribution_id: Optional[str] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "query_id": self.query_id,
            "text": self.text,
            "scope": self.scope,
            "kind": self.kind,
            "contribution_id": self.contribution_id,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SearchQuery":
        return cls(d["query_id"], d["text"], d["scope"], d["kind"], d.get("contribution_id"))


@dataclass(frozen=True)
class QuerySet:
    core_task_queries: tuple[SearchQuery, ...]
    contribution_queries: dict[str, tuple[SearchQuery, ...]]
    warnings: tuple[str, ...] = ()

    def all_queries(self) -> list[SearchQuery]:
        queries = list(self.core_task_queries)
        for group in self.contribution_queries.values():
            queries.extend(group)
        return queries

    @property
    def total(self) -> int:
        return len(self.core_task_queries) + sum(
            len(g) for g in self.contribution_queries.values()
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "core_task_queries": [q.to_dict() for q in self.core_task_queries],
            "contribution_queries": {
                cid: [q.to_dict() for q in group]
                for cid, group in self.contribution_queries.items()
            },
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "QuerySet":
        return cls(
            core_task_queries=tuple(SearchQuery.from_dict(q) for q in d["core_task_queries"]),
            contribution_queries={
                cid: tuple(SearchQuery.from_dict(q) for q in group)
                for cid, group in d["contribution_queries"].items()
            },
            warnings=tuple(d.get("warnings", ())),
        )


# --- validation ---------------------------------------------------------------


def normalize_query(text: str, *, require_prefix: bool) -> tuple[str, list[str]]:
    """Enforce the search-prefix and 25-word rules on one query string."""
    flags: list[str] = []
    q = " ".join(str(text).split())
    if require_prefix:
        if not q.startswith(QUERY_PREFIX):
            stripped = re.sub(r"^find papers about\s+", "", q, flags=re.IGNORECASE)
            q = QUERY_PREFIX + stripped
            flags.append("query_prefix_added")
    else:
        without = re.sub(r"^find papers about\s+", "", q, flags=re.IGNORECASE)
        if without != q:
            q = without
            flags.append("query_prefix_stripped")
    limit = MAX_QUERY_WORDS if require_prefix else MAX_CORE_TASK_WORDS
    if word_count(q) > limit:
        q = truncate_words(q, limit)
        flags.append("query_truncated")
    if word_count(q) < MIN_CORE_TASK_WORDS:
        flags.append("query_below_min_words")
    return q, flags


def _coerce_variants(
    primary: str, variants: Sequence[str], *, require_prefix: bool
) -> tuple[tuple[str, ...], list[str]]:
    """Build the exactly-three query list: primary plus two variants."""
    flags: list[str] = []
    cleaned: list[str] = []
    for v in variants:
        if not str(v).strip():
            continue
        q, vflags = normalize_query(str(v), require_prefix=require_prefix)
        flags.extend(vflags)
        if q != primary and q not in cleaned:
            cleaned.append(q)
    while len(cleaned) < 2:
        cleaned.append(primary)
        flags.append("variant_padded_with_primary")
    return (primary, cleaned[0], cleaned[1]), flags


def validate_contribution(rawfields: Mapping[str, Any]) -> ContributionClaim:
    """Normalize one raw contribution object into a valid claim.

    Missing optional fields get the "unknown" sentinel with an audit flag;
    over-limit fields are truncated with an audit flag; queries get the
    prefix and 25-word rules applied. A missing or empty name rejects the
    contribution outright. Idempotent on its own output.
    """
    name = str(rawfields.get("name") or "").strip()
    if not name:
        raise ContributionRejected("contribution is missing a name")
    flags: list[str] = list(rawfields.get("audit_flags", ()))

    def _flag(f: str) -> None:
        if f not in flags:
            flags.append(f)

    if word_count(name) > MAX_NAME_WORDS:
        name = truncate_words(name, MAX_NAME_WORDS)
        _flag("name_truncated")

    def _text_field(key: str, limit: int) -> str:
        value = str(rawfields.get(key) or "").strip()
        if not value:
            _flag(f"{key}_defaulted")
            return "unknown"
        if word_count(value) > limit:
            _flag(f"{key}_truncated")
            return truncate_words(value, limit)
        return value

    claim_text = _text_field("author_claim_text", MAX_CLAIM_WORDS)
    description = _text_field("description", MAX_DESCRIPTION_WORDS)
    source_hint = str(rawfields.get("source_hint") or "").strip()
    if not source_hint:
        source_hint = "unknown"
        _flag("source_hint_defaulted")

    prior_work_query = rawfields.get("prior_work_query")
    variants = rawfields.get("query_variants") or ()
    query: Optional[str] = None
    query_variants: tuple[str, ...] = ()
    if prior_work_query is None and variants:
        prior_work_query = variants[0]
        _flag("primary_query_from_variant")
    if prior_work_query is not None and str(prior_work_query).strip():
        query, qflags = normalize_query(str(prior_work_query), require_prefix=True)
        for f in qflags:
            _flag(f)
        query_variants, vflags = _coerce_variants(query, variants, require_prefix=True)
        for f in vflags:
            _flag(f)
    return ContributionClaim(
        claim_id=str(rawfields.get("claim_id") or "contribution_1"),
        name=name,
        author_claim_text=claim_text,
        description=description,
        source_hint=source_hint,
        prior_work_query=query,
        query_variants=query_variants,
        audit_flags=tuple(flags),
    )


# --- model-backed extraction ---------------------------------------------------

_CORE_TASK_USER_TMPL = (
    "Read the following information about the paper and answer:\n"
    '"What is the core task this paper studies?" Return ONLY a single phrase as specified.\n\n'
    "Title: {title}\n"
    "Abstract: {abstract}\n"
    "Excerpt from main body (truncated after removing references): {body}\n"
)

_CONTRIBUTION_USER_TMPL = (
    'Extract up to three contributions claimed in this paper. Return "contributions" '
    "with items that satisfy the rules above.\n\n"
    "Title:\n{title}\n\n"
    "Main body text (truncated and references removed when possible):\n{body}\n"
)

_VARIANTS_USER_TMPL = "Original query:\n{primary}\n\nPlease provide 2-3 paraphrased variants.\n"

#: How much body text goes into extraction prompts.
_PROMPT_BODY_CHARS = 60_000


def _call_llm(
    llm: LlmClient, system: str, user: str, temperature: float, *, retries: int = 1
) -> str:
    last: Optional[Exception] = None
    for _ in range(retries + 1):
        try:
            return llm.complete(system, user, temperature)
        except LlmError as exc:
            last = exc
            logger.warning("llm call failed, %s", exc)
    raise PhaseAbortError("phase1", f"llm call failed after retry: {last}")


def _clean_phrase(raw: str) -> str:
    line = raw.strip().splitlines()[0] if raw.strip() else ""
    return line.strip().strip('"').strip("'").rstrip(".").strip()


def extract_core_task(
    doc: DocumentText,
    llm: LlmClient,
    *,
    title: str = "",
    abstract: str = "",
    temperatures: Temperatures = Temperatures(),
) -> CoreTask:
    """Ask the model for the core-task phrase and enforce the 5-15 word bound.

    Over-long phrases are trimmed to 15 words with an audit flag. Under-length
    phrases earn exactly one re-request; a second violation aborts the phase.
    """
    if not doc.raw.strip():
        raise PhaseAbortError("phase1", "document is empty")
    system = load_prompt("core_task")
    user = _CORE_TASK_USER_TMPL.format(
        title=title, abstract=abstract, body=doc.raw[:_PROMPT_BODY_CHARS]
    )
    flags: list[str] = []
    phrase = _clean_phrase(_call_llm(llm, system, user, temperatures.core_task))
    if word_count(phrase) < MIN_CORE_TASK_WORDS:
        logger.info("core task %r under 5 words, re-requesting once", phrase)
        phrase = _clean_phrase(_call_llm(llm, system, user, temperatures.core_task))
        flags.append("core_task_rerequested")
        if word_count(phrase) < MIN_CORE_TASK_WORDS:
            raise PhaseAbortError(
                "phase1", f"core task still under {MIN_CORE_TASK_WORDS} words: {phrase!r}"
            )
    if word_count(phrase) > MAX_CORE_TASK_WORDS:
        phrase = truncate_words(phrase, MAX_CORE_TASK_WORDS)
        flags.append("core_task_trimmed")
    return CoreTask(text=phrase, query_variants=(phrase,), audit_flags=tuple(flags))


def extract_contributions(
    doc: DocumentText,
    llm: LlmClient,
    *,
    title: str = "",
    temperatures: Temperatures = Temperatures(),
) -> tuple[list[ContributionClaim], list[str]]:
    """Extract up to three validated contribution claims.

    Returns the claims plus a warning list. Zero valid contributions is not
    fatal; the pipeline continues with core-task scope only.
    """
    system = load_prompt("contribution_extraction")
    user = _CONTRIBUTION_USER_TMPL.format(title=title, body=doc.raw[:_PROMPT_BODY_CHARS])
    warnings: list[str] = []
    raw = _call_llm(llm, system, user, temperatures.contribution_extraction)
    try:
        parsed = parse_structured_output(raw)
    except ParseFailureError:
        warnings.append("contribution extraction output unparseable; continuing without claims")
        return [], warnings
    if parsed.fallback:
        warnings.append(f"contribution extraction needed fallback parse: {parsed.fallback}")
    items = parsed.value.get("contributions", []) if isinstance(parsed.value, dict) else []
    claims: list[ContributionClaim] = []
    seen_names: set[str] = set()
    for item in items:
        if not isinstance(item, Mapping):
            continue
        try:
            claim = validate_contribution(item)
        except ContributionRejected as exc:
            warnings.append(f"contribution rejected: {exc}")
            continue
        key = claim.name.lower()
        if key in seen_names:
            warnings.append(f"duplicate contribution merged: {claim.name}")
            continue
        seen_names.add(key)
        claims.append(claim)
        if len(claims) == MAX_CONTRIBUTIONS:
            break
    claims = [replace(c, claim_id=f"contribution_{i + 1}") for i, c in enumerate(claims)]
    if not claims:
        warnings.append("no valid contributions extracted; core-task scope only")
    return claims, warnings


def expand_query_variants(
    primary: str,
    llm: LlmClient,
    *,
    require_prefix: bool,
    temperatures: Temperatures = Temperatures(),
) -> tuple[tuple[str, ...], list[str]]:
    """One variant-generation call, normalized to exactly three query texts."""
    flags: list[str] = []
    raw_variants: list[str] = []
    try:
        raw = llm.complete(
            load_prompt("query_variants"),
            _VARIANTS_USER_TMPL.format(primary=primary),
            temperatures.query_variants,
        )
        parsed = parse_structured_output(raw)
        if isinstance(parsed.value, dict):
            raw_variants = [str(v) for v in parsed.value.get("variants", [])]
    except (LlmError, ParseFailureError) as exc:
        logger.warning("variant generation failed for %r: %s", primary, exc)
        flags.append("variant_generation_failed")
    queries, vflags = _coerce_variants(primary, raw_variants, require_prefix=require_prefix)
    return queries, flags + vflags


def generate_primary_queries(
    claims: Sequence[ContributionClaim],
    llm: LlmClient,
    *,
    temperatures: Temperatures = Temperatures(),
) -> tuple[dict[str, str], list[str]]:
    """One call producing the prior-work query for every claim id."""
    warnings: list[str] = []
    answers: dict[str, str] = {}
    if claims:
        sections = []
        for claim in claims:
            sections.append(
                f"- [{claim.claim_id}]\n"
                f"  name: {claim.name}\n"
                f"  author_claim_text: {claim.author_claim_text}\n"
                f"  description: {claim.description}"
            )
        user = "Generate one query per claim for the following claims:\n" + "\n".join(sections)
        try:
            raw = llm.complete(load_prompt("primary_query"), user, temperatures.primary_query)
            parsed = parse_structured_output(raw)
            if isinstance(parsed.value, dict):
                for entry in parsed.value.get("queries", []):
                    if isinstance(entry, Mapping) and "id" in entry:
                        answers[str(entry["id"])] = str(entry.get("prior_work_query", ""))
        except (LlmError, ParseFailureError) as exc:
            warnings.append(f"primary query generation failed: {exc}")
    queries: dict[str, str] = {}
    for claim in claims:
        raw_query = answers.get(claim.claim_id, "").strip()
        if not raw_query:
            raw_query = QUERY_PREFIX + truncate_words(
                claim.description if claim.description != "unknown" else claim.name, 12
            )
            warnings.append(f"synthesized fallback query for {claim.claim_id}")
        query, _ = normalize_query(raw_query, require_prefix=True)
        queries[claim.claim_id] = query
    return queries, warnings


def assemble_query_set(
    core: CoreTask, claims: Sequence[ContributionClaim]
) -> QuerySet:
    """Materialize the final query set: 3 core-task plus 3 per contribution.

    Prefix and word-cap rules are re-enforced here unconditionally, so the
    emitted queries satisfy the format invariants no matter where the input
    texts came from.
    """
    warnings: list[str] = []
    primary_text = core.query_variants[0] if core.query_variants else core.text
    primary, pflags = normalize_query(primary_text, require_prefix=False)
    coerced, flags = _coerce_variants(
        primary, core.query_variants[1:], require_prefix=False
    )
    core_texts = list(coerced)
    if len(core.query_variants) != 3:
        warnings.extend(pflags + flags)
    core_queries = tuple(
        SearchQuery(
            query_id=f"core_task:{'primary' if i == 0 else f'variant{i}'}",
            text=text,
            scope="core_task",
            kind="primary" if i == 0 else "variant",
        )
        for i, text in enumerate(core_texts)
    )
    contribution_queries: dict[str, tuple[SearchQuery, ...]] = {}
    for claim in claims:
        raw_primary = (
            claim.prior_work_query
            or (claim.query_variants[0] if claim.query_variants else None)
            or (QUERY_PREFIX + truncate_words(claim.name, 12))
        )
        primary, _ = normalize_query(raw_primary, require_prefix=True)
        coerced, flags = _coerce_variants(
            primary, claim.query_variants[1:], require_prefix=True
        )
        texts = list(coerced)
        if len(claim.query_variants) != 3:
            warnings.extend(flags)
        contribution_queries[claim.claim_id] = tuple(
            SearchQuery(
                query_id=f"{claim.claim_id}:{'primary' if i == 0 else f'variant{i}'}",
                text=text,
                scope="contribution",
                kind="primary" if i == 0 else "variant",
                contribution_id=claim.claim_id,
            )
            for i, text in enumerate(texts)
        )
    total = 3 + 3 * len(claims)
    if total < 6:
        warnings.append(f"query count {total} below the 6-12 range (no contributions)")
    return QuerySet(
        core_task_queries=core_queries,
        contribution_queries=contribution_queries,
        warnings=tuple(warnings),
    )


@dataclass
class Phase1Result:
    """Everything Phase I hands to retrieval and analysis."""

    core_task: CoreTask
    claims: list[ContributionClaim]
    query_set: QuerySet
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "core_task": {
                "text": self.core_task.text,
                "query_variants": list(self.core_task.query_variants),
                "audit_flags": list(self.core_task.audit_flags),
            },
            "contributions": [c.to_dict() for c in self.claims],
            "query_set": self.query_set.to_dict(),
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Phase1Result":
        ct = d["core_task"]
        return cls(
            core_task=CoreTask(
                text=ct["text"],
                query_variants=tuple(ct.get("query_variants", ())),
                audit_flags=tuple(ct.get("audit_flags", ())),
            ),
            claims=[ContributionClaim.from_dict(c) for c in d.get("contributions", [])],
            query_set=QuerySet.from_dict(d["query_set"]),
            warnings=list(d.get("warnings", ())),
        )


def run_extraction_phase(
    doc: DocumentText,
    llm: LlmClient,
    *,
    title: str = "",
    abstract: str = "",
    temperatures: Temperatures = Temperatures(),
) -> Phase1Result:
    """Run the complete Phase I flow: extract, generate queries, assemble."""
    warnings: list[str] = []
    core = extract_core_task(
        doc, llm, title=title, abstract=abstract, temperatures=temperatures
    )
    core_queries, core_flags = expand_query_variants(
        core.text, llm, require_prefix=False, temperatures=temperatures
    )
    core = replace(core, query_variants=core_queries, audit_flags=core.audit_flags + tuple(core_flags))

    claims, claim_warnings = extract_contributions(
        doc, llm, title=title, temperatures=temperatures
    )
    warnings.extend(claim_warnings)

    primaries, query_warnings = generate_primary_queries(claims, llm, temperatures=temperatures)
    warnings.extend(query_warnings)
    completed: list[ContributionClaim] = []
    for claim in claims:
        primary = primaries[claim.claim_id]
        variants, vflags = expand_query_variants(
            primary, llm, require_prefix=True, temperatures=temperatures
        )
        completed.append(
            replace(
                claim,
                prior_work_query=primary,
                query_variants=variants,
                audit_flags=claim.audit_flags + tuple(vflags),
            )
        )
    query_set = assemble_query_set(core, completed)
    warnings.extend(query_set.warnings)
    return Phase1Result(core_task=core, claims=completed, query_set=query_set, warnings=warnings)
