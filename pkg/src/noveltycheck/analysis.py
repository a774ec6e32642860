"""Phase III: taxonomy construction, comparisons, similarity, report assembly.

Candidate-level work is one-to-N: each candidate is compared against the
target in an isolated model call, so permuting candidates permutes results
and nothing else. Evidence quotes are verified the moment they arrive, and
a final downgrade pass guarantees no refutation claim survives without a
doubly-verified evidence pair.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Optional, Sequence

from .clients import LlmClient
from .errors import AssemblyError, InvalidInputError, LlmError, ParseFailureError
from .extraction import (
    ContributionClaim,
    CoreTask,
    Phase1Result,
    parse_structured_output,
    truncate_words,
    word_count,
)
from .papers import DocumentText, PaperRecord, normalize_text
from .prompts import load_prompt
from .retrieval import CandidateSet
from .taxonomy import (
    RepairOutcome,
    StructuralPosition,
    TaxonomyNode,
    order_all_leaves,
    repair_taxonomy,
    structural_position,
    taxonomy_content_hash,
)
from .verification import (
    QuoteLocation,
    SimilaritySegment,
    filter_segments,
    verify_quote,
    verify_segment,
)

logger = logging.getLogger(__name__)

MAX_QUOTE_WORDS = 90

CAN_REFUTE = "can_refute"
CANNOT_REFUTE = "cannot_refute"
UNCLEAR = "unclear"
_STATUSES = {CAN_REFUTE, CANNOT_REFUTE, UNCLEAR}


# --- comparison schema ----------------------------------------------------------


@dataclass
class EvidencePair:
    """A quote from each paper backing one refutation claim."""

    original_quote: str
    original_paragraph_label: str
    candidate_quote: str
    candidate_paragraph_label: str
    rationale: str
    original_location: Optional[QuoteLocation] = None
    candidate_location: Optional[QuoteLocation] = None

    @property
    def doubly_verified(self) -> bool:
        return bool(
            self.original_location
            and self.original_location.found
            and self.candidate_location
            and self.candidate_location.found
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "original_quote": self.original_quote,
            "original_paragraph_label": self.original_paragraph_label,
            "original_location": self.original_location.to_dict()
            if self.original_location
            else None,
            "candidate_quote": self.candidate_quote,
            "candidate_paragraph_label": self.candidate_paragraph_label,
            "candidate_location": self.candidate_location.to_dict()
            if self.candidate_location
            else None,
            "rationale": self.rationale,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EvidencePair":
        return cls(
            original_quote=d["original_quote"],
            original_paragraph_label=d.get("original_paragraph_label", "unknown"),
            candidate_quote=d["candidate_quote"],
            candidate_paragraph_label=d.get("candidate_paragraph_label", "unknown"),
            rationale=d.get("rationale", ""),
            original_location=QuoteLocation.from_dict(d["original_location"])
            if d.get("original_location")
            else None,
            candidate_location=QuoteLocation.from_dict(d["candidate_location"])
            if d.get("candidate_location")
            else None,
        )


@dataclass
class RefutationEvidence:
    summary: str
    evidence_pairs: list[EvidencePair]

    def to_dict(self) -> dict[str, Any]:
        return {
            "summary": self.summary,
            "evidence_pairs": [p.to_dict() for p in self.evidence_pairs],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RefutationEvidence":
        return cls(
            summary=d.get("summary", ""),
            evidence_pairs=[EvidencePair.from_dict(p) for p in d.get("evidence_pairs", [])],
        )


@dataclass
class ContributionComparison:
    """Three-way refutation judgment for one (claim, candidate) pair."""

    canonical_id: str
    candidate_paper_title: str
    candidate_paper_url: Optional[str]
    comparison_mode: str  # "fulltext" or "abstract"
    refutation_status: str
    refutation_evidence: Optional[RefutationEvidence] = None
    brief_note: Optional[str] = None
    similarity_segments: list[SimilaritySegment] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "canonical_id": self.canonical_id,
            "candidate_paper_title": self.candidate_paper_title,
            "candidate_paper_url": self.candidate_paper_url,
            "comparison_mode": self.comparison_mode,
            "refutation_status": self.refutation_status,
            "refutation_evidence": self.refutation_evidence.to_dict()
            if self.refutation_evidence
            else None,
            "brief_note": self.brief_note,
            "similarity_segments": [s.to_dict() for s in self.similarity_segments],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ContributionComparison":
        return cls(
            canonical_id=d["canonical_id"],
            candidate_paper_title=d["candidate_paper_title"],
            candidate_paper_url=d.get("candidate_paper_url"),
            comparison_mode=d.get("comparison_mode", "abstract"),
            refutation_status=d["refutation_status"],
            refutation_evidence=RefutationEvidence.from_dict(d["refutation_evidence"])
            if d.get("refutation_evidence")
            else None,
            brief_note=d.get("brief_note"),
            similarity_segments=[
                SimilaritySegment.from_dict(s) for s in d.get("similarity_segments", [])
            ],
        )


@dataclass
class CoreTaskComparison:
    """Distinction analysis against one sibling paper in the same leaf."""

    canonical_id: str
    candidate_paper_title: str
    candidate_paper_url: Optional[str]
    comparison_mode: str  # "fulltext" or "abstract_fallback"
    is_duplicate_variant: bool
    brief_comparison: str
    relationship: str = "sibling"
    similarity_segments: list[SimilaritySegment] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "canonical_id": self.canonical_id,
            "candidate_paper_title": self.candidate_paper_title,
            "candidate_paper_url": self.candidate_paper_url,
            "relationship": self.relationship,
            "comparison_mode": self.comparison_mode,
            "is_duplicate_variant": self.is_duplicate_variant,
            "brief_comparison": self.brief_comparison,
            "similarity_segments": [s.to_dict() for s in self.similarity_segments],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CoreTaskComparison":
        return cls(
            canonical_id=d["canonical_id"],
            candidate_paper_title=d["candidate_paper_title"],
            candidate_paper_url=d.get("candidate_paper_url"),
            comparison_mode=d.get("comparison_mode", "abstract_fallback"),
            is_duplicate_variant=bool(d.get("is_duplicate_variant", False)),
            brief_comparison=d.get("brief_comparison", ""),
            relationship=d.get("relationship", "sibling"),
            similarity_segments=[
                SimilaritySegment.from_dict(s) for s in d.get("similarity_segments", [])
            ],
        )


DOWNGRADE_NOTE = (
    "Downgraded from can_refute: no evidence pair could be verified in both "
    "papers, so the refutation claim is not substantiated."
)


def downgrade_unverified(
    comparisons: Sequence[ContributionComparison],
) -> list[ContributionComparison]:
    """Rewrite can_refute entries lacking a doubly-verified pair to cannot_refute.

    Runs once after all comparisons and before report assembly. Entries that
    carry at least one evidence pair verified in both papers are returned
    untouched.
    """
    out: list[ContributionComparison] = []
    for entry in comparisons:
        if entry.refutation_status != CAN_REFUTE:
            out.append(entry)
            continue
        pairs = entry.refutation_evidence.evidence_pairs if entry.refutation_evidence else []
        if any(p.doubly_verified for p in pairs):
            out.append(entry)
            continue
        logger.info("downgrading unverified refutation against %s", entry.canonical_id)
        out.append(
            replace(
                entry,
                refutation_status=CANNOT_REFUTE,
                refutation_evidence=None,
                brief_note=DOWNGRADE_NOTE,
            )
        )
    return out


# --- taxonomy construction -------------------------------------------------------


def build_taxonomy(
    core_candidates: Sequence[PaperRecord],
    core_task: CoreTask,
    llm: LlmClient,
    *,
    original: Optional[PaperRecord] = None,
    enable_llm_repair: bool = True,
) -> RepairOutcome:
    """One generation call over all candidate metadata, then validate and repair."""
    if len(core_candidates) < 2:
        raise InvalidInputError("taxonomy construction needs at least 2 candidates")
    papers_payload: list[dict[str, Any]] = []
    records: dict[str, PaperRecord] = {}
    original_id = None
    if original is not None:
        original_id = str(original.canonical_id)
        records[original_id] = original
        papers_payload.append(
            {"id": original_id, "title": original.title, "abstract": original.abstract, "rank": 0}
        )
    for rank, paper in enumerate(core_candidates, start=1):
        pid = str(paper.canonical_id)
        records[pid] = paper
        papers_payload.append(
            {"id": pid, "title": paper.title, "abstract": paper.abstract, "rank": rank}
        )
    allowed = set(records)
    user = json.dumps(
        {"topic": core_task.text, "original_paper_id": original_id, "papers": papers_payload},
        ensure_ascii=False,
    )
    try:
        raw = llm.complete(load_prompt("taxonomy_construction"), user, 0.0)
    except LlmError as exc:
        return RepairOutcome(
            taxonomy=TaxonomyNode(name="Survey Taxonomy (unavailable)"),
            status="needs_review",
            diagnostics=[f"taxonomy generation failed: {exc}"],
        )
    try:
        tax = TaxonomyNode.from_dict(parse_structured_output(raw).value)
    except (ParseFailureError, InvalidInputError) as exc:
        return RepairOutcome(
            taxonomy=TaxonomyNode(name="Survey Taxonomy (unparseable)"),
            status="needs_review",
            diagnostics=[f"taxonomy output unparseable: {exc}", f"raw output: {raw[:2000]}"],
        )
    outcome = repair_taxonomy(
        tax,
        allowed,
        original=original_id,
        papers=records,
        llm=llm if enable_llm_repair else None,
    )
    rank_map = {str(p.canonical_id): i for i, p in enumerate(core_candidates, start=1)}
    outcome.taxonomy = order_all_leaves(outcome.taxonomy, original_id, rank_map)
    return outcome


# --- contribution comparison ------------------------------------------------------

_CLAIM_USER_TMPL = (
    "**Candidate Paper Title**: {title}{citation}\n"
    "**Number of Contributions to Compare**: {n}\n"
    "**[Contributions to Compare]**\n"
    "{contributions}\n"
    "**[Full Text Context: ORIGINAL]** (extract evidence from here)\n"
    "```\n{original}\n```\n"
    "**[Full Text Context: CANDIDATE]** (extract evidence from here)\n"
    "```\n{candidate}\n```\n"
    "**CRITICAL RULE**: You MUST extract quotes EXACTLY as they appear above. "
    "Copy character-by-character, including punctuation and spacing. If you cannot "
    "find a quote word-for-word in the context, do NOT use it. Evidence MUST be "
    "extracted from 'Full Text Context', NOT from Contribution Descriptions.\n"
)


def _format_claims(claims: Sequence[ContributionClaim]) -> str:
    blocks = []
    for i, claim in enumerate(claims, start=1):
        blocks.append(
            f"{i}. {claim.name}\n"
            f"   author_claim_text: {claim.author_claim_text}\n"
            f"   description: {claim.description}"
        )
    return "\n".join(blocks)


def _cap_quote(text: str) -> str:
    if word_count(text) > MAX_QUOTE_WORDS:
        logger.warning("evidence quote over %d words, truncating", MAX_QUOTE_WORDS)
        return truncate_words(text, MAX_QUOTE_WORDS)
    return text


def _parse_evidence(raw_evidence: Any, target_doc: DocumentText, candidate_text: str) -> RefutationEvidence:
    summary = ""
    pairs: list[EvidencePair] = []
    if isinstance(raw_evidence, Mapping):
        summary = str(raw_evidence.get("summary", ""))
        for p in raw_evidence.get("evidence_pairs", []):
            if not isinstance(p, Mapping):
                continue
            original_quote = _cap_quote(str(p.get("original_quote", "")))
            candidate_quote = _cap_quote(str(p.get("candidate_quote", "")))
            pairs.append(
                EvidencePair(
                    original_quote=original_quote,
                    original_paragraph_label=str(p.get("original_paragraph_label", "unknown")),
                    candidate_quote=candidate_quote,
                    candidate_paragraph_label=str(p.get("candidate_paragraph_label", "unknown")),
                    rationale=str(p.get("rationale", "")),
                    original_location=verify_quote(original_quote, target_doc),
                    candidate_location=verify_quote(candidate_quote, candidate_text),
                )
            )
    return RefutationEvidence(summary=summary, evidence_pairs=pairs)


def compare_contribution(
    target_doc: DocumentText,
    candidate: PaperRecord,
    claims: Sequence[ContributionClaim],
    llm: LlmClient,
    *,
    citation: Optional[str] = None,
) -> list[ContributionComparison]:
    """One isolated inference call judging every claim against one candidate.

    Quotes are verified against their source documents as soon as they are
    parsed. A parse failure degrades every claim's entry to ``unclear``
    rather than aborting the run.
    """
    if candidate.full_text is not None:
        mode = "fulltext"
        candidate_text: Any = candidate.full_text
        prompt_text = candidate.full_text.raw
    else:
        mode = "abstract"
        candidate_text = normalize_text(candidate.abstract)
        prompt_text = candidate.abstract
    cid = str(candidate.canonical_id)

    def _entry(status: str, note: Optional[str], evidence: Optional[RefutationEvidence]) -> ContributionComparison:
        return ContributionComparison(
            canonical_id=cid,
            candidate_paper_title=candidate.title,
            candidate_paper_url=candidate.url,
            comparison_mode=mode,
            refutation_status=status,
            refutation_evidence=evidence,
            brief_note=note,
        )

    user = _CLAIM_USER_TMPL.format(
        title=candidate.title,
        citation=f" ({citation})" if citation else "",
        n=len(claims),
        contributions=_format_claims(claims),
        original=target_doc.raw,
        candidate=prompt_text,
    )
    try:
        raw = llm.complete(load_prompt("claim_comparison"), user, 0.0)
        parsed = parse_structured_output(raw).value
    except (LlmError, ParseFailureError) as exc:
        note = f"Comparison unavailable: {exc}"
        return [_entry(UNCLEAR, note, None) for _ in claims]

    analyses = parsed.get("contribution_analyses", []) if isinstance(parsed, Mapping) else []
    by_name: dict[str, Mapping[str, Any]] = {}
    ordered: list[Mapping[str, Any]] = []
    for item in analyses:
        if isinstance(item, Mapping):
            ordered.append(item)
            name = str(item.get("contribution_name", "")).strip().lower()
            if name:
                by_name.setdefault(name, item)

    entries: list[ContributionComparison] = []
    for i, claim in enumerate(claims):
        item = by_name.get(claim.name.strip().lower())
        if item is None and i < len(ordered):
            item = ordered[i]
        if item is None:
            entries.append(_entry(UNCLEAR, "No analysis returned for this contribution.", None))
            continue
        status = str(item.get("refutation_status", "")).strip()
        if status not in _STATUSES:
            entries.append(_entry(UNCLEAR, f"Unrecognized status {status!r}.", None))
            continue
        if status == CAN_REFUTE:
            evidence = _parse_evidence(item.get("refutation_evidence"), target_doc, candidate_text)
            entries.append(_entry(CAN_REFUTE, None, evidence))
        else:
            note = str(item.get("brief_note") or "").strip() or "No explanation provided."
            entries.append(_entry(status, note, None))
    return entries


# --- core-task comparison ----------------------------------------------------------


@dataclass
class CoreTaskAnalysis:
    mode: str
    taxonomy_path: list[str]
    comparisons: list[CoreTaskComparison] = field(default_factory=list)
    subtopic_summary: Optional[dict[str, Any]] = None
    isolation: Optional[dict[str, Any]] = None
    diagnostics: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "taxonomy_path": list(self.taxonomy_path),
            "comparisons": [c.to_dict() for c in self.comparisons],
            "subtopic_summary": self.subtopic_summary,
            "isolation": self.isolation,
            "diagnostics": list(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CoreTaskAnalysis":
        return cls(
            mode=d["mode"],
            taxonomy_path=list(d.get("taxonomy_path", ())),
            comparisons=[CoreTaskComparison.from_dict(c) for c in d.get("comparisons", [])],
            subtopic_summary=d.get("subtopic_summary"),
            isolation=d.get("isolation"),
            diagnostics=list(d.get("diagnostics", ())),
        )


def _content_of(paper: PaperRecord) -> tuple[str, str]:
    if paper.full_text is not None:
        return paper.full_text.raw, "fulltext"
    return paper.abstract, "abstract"


def _leaf_count(node: TaxonomyNode) -> int:
    return sum(1 for _ in node.iter_leaves())


def _paper_count(node: TaxonomyNode) -> int:
    return sum(len(leaf.papers) for leaf in node.iter_leaves())


def compare_core_task(
    position: StructuralPosition,
    target: PaperRecord,
    target_doc: DocumentText,
    candidates: Mapping[str, PaperRecord],
    llm: LlmClient,
    *,
    core_task: CoreTask,
    citations: Optional[Mapping[str, str]] = None,
) -> CoreTaskAnalysis:
    """Distinguish the target from its structural neighbors in the taxonomy.

    Sibling papers get individual distinction calls with duplicate detection
    first; a lone paper in a populated parent gets one categorical call; an
    isolated paper is logged without any model call.
    """
    analysis = CoreTaskAnalysis(mode=position.mode, taxonomy_path=list(position.path))
    citations = citations or {}

    if position.mode == "isolated":
        analysis.isolation = {
            "note": "No comparison: the paper has no immediate semantic neighbors.",
            "leaf": position.path[-1] if position.path else None,
        }
        return analysis

    if position.mode == "subtopic_siblings":
        payload = {
            "core_task": core_task.text,
            "original_leaf": {
                "name": position.leaf.name if position.leaf else None,
                "scope_note": position.leaf.scope_note if position.leaf else None,
                "exclude_note": position.leaf.exclude_note if position.leaf else None,
                "paper_ids": list(position.leaf.papers) if position.leaf else [],
            },
            "sibling_subtopics": [
                {
                    "name": node.name,
                    "scope_note": node.scope_note,
                    "exclude_note": node.exclude_note,
                    "leaf_count": _leaf_count(node),
                    "paper_count": _paper_count(node),
                    "papers": [
                        {
                            "id": pid,
                            "title": candidates[pid].title if pid in candidates else "",
                            "abstract": candidates[pid].abstract if pid in candidates else "",
                        }
                        for leaf in node.iter_leaves()
                        for pid in leaf.papers
                    ],
                }
                for node in position.sibling_subtopics
            ],
        }
        try:
            raw = llm.complete(
                load_prompt("subtopic_comparison"), json.dumps(payload, ensure_ascii=False), 0.0
            )
            parsed = parse_structured_output(raw).value
            if isinstance(parsed, Mapping):
                analysis.subtopic_summary = dict(parsed)
        except (LlmError, ParseFailureError) as exc:
            analysis.diagnostics.append(f"subtopic comparison failed: {exc}")
        return analysis

    if target.full_text is not None:
        original_content, original_type = _content_of(target)
    else:
        original_content, original_type = target_doc.raw, "fulltext"
    for sibling_id in position.siblings:
        record = candidates.get(sibling_id)
        if record is None:
            analysis.diagnostics.append(f"sibling {sibling_id} has no candidate record")
            continue
        content, content_type = _content_of(record)
        title = record.title
        if sibling_id in citations:
            title = f"{title} ({citations[sibling_id]})"
        payload = {
            "core_task_domain": core_task.text,
            "original_paper": {
                "title": target.title,
                "content": original_content,
                "content_type": original_type,
            },
            "candidate_paper": {
                "title": title,
                "content": content,
                "content_type": content_type,
            },
            "analysis_instruction": (
                "These papers are classified in the SAME leaf category in the "
                "taxonomy (sibling papers). First check if they are likely "
                "duplicates/variants by comparing titles and content. If not "
                "duplicates, provide a concise 2-3 sentence comparison covering: "
                "(1) their shared taxonomy position, (2) overlapping areas with "
                "original paper, (3) key differences."
            ),
        }
        mode = "fulltext" if record.full_text is not None else "abstract_fallback"
        try:
            raw = llm.complete(
                load_prompt("sibling_distinction"), json.dumps(payload, ensure_ascii=False), 0.0
            )
            parsed = parse_structured_output(raw).value
            if not isinstance(parsed, Mapping):
                raise ParseFailureError("sibling comparison is not an object", raw)
            analysis.comparisons.append(
                CoreTaskComparison(
                    canonical_id=sibling_id,
                    candidate_paper_title=record.title,
                    candidate_paper_url=record.url,
                    comparison_mode=mode,
                    is_duplicate_variant=bool(parsed.get("is_duplicate_variant", False)),
                    brief_comparison=str(parsed.get("brief_comparison", "")).strip()
                    or "No comparison text returned.",
                )
            )
        except (LlmError, ParseFailureError) as exc:
            analysis.diagnostics.append(f"sibling comparison failed for {sibling_id}: {exc}")
            analysis.comparisons.append(
                CoreTaskComparison(
                    canonical_id=sibling_id,
                    candidate_paper_title=record.title,
                    candidate_paper_url=record.url,
                    comparison_mode=mode,
                    is_duplicate_variant=False,
                    brief_comparison=f"Comparison unavailable: {exc}",
                )
            )
    return analysis


# --- similarity detection -----------------------------------------------------------


class SimilarityCache:
    """Per-candidate memo guaranteeing exactly one detection per id.

    Single writer per key, any number of readers. Concurrent requests for
    the same key block on the first computation's future.
    """

    def __init__(self) -> None:
        self._futures: dict[str, Future] = {}
        self._lock = threading.Lock()

    def get_or_compute(self, key: str, compute: Callable[[], list[SimilaritySegment]]):
        with self._lock:
            fut = self._futures.get(key)
            if fut is None:
                fut = Future()
                self._futures[key] = fut
                owner = True
            else:
                owner = False
        if owner:
            try:
                fut.set_result(compute())
            except Exception as exc:
                fut.set_exception(exc)
                raise
        return fut.result()

    def __len__(self) -> int:
        with self._lock:
            return len(self._futures)


_SIMILARITY_USER_TMPL = (
    "# Now, please process the following inputs:\n"
    "<Paper_A>\n{paper_a}\n</Paper_A>\n"
    "<Paper_B>\n{paper_b}\n</Paper_B>\n"
)


def detect_similarity(
    target_doc: DocumentText,
    candidate: PaperRecord,
    llm: LlmClient,
    cache: SimilarityCache,
    *,
    target_id: str = "",
) -> list[SimilaritySegment]:
    """Detect and verify overlap segments for one candidate.

    Memoized on (target id, candidate id) so each pair is analyzed exactly
    once per cache lifetime, even when a cache outlives a single run.
    """
    key = f"{target_id}::{candidate.canonical_id}"

    def _compute() -> list[SimilaritySegment]:
        if candidate.full_text is None:
            logger.info("similarity detection skipped for %s: no full text", key)
            return []
        user = _SIMILARITY_USER_TMPL.format(
            paper_a=target_doc.raw, paper_b=candidate.full_text.raw
        )
        try:
            raw = llm.complete(load_prompt("similarity_detection"), user, 0.0)
            parsed = parse_structured_output(raw).value
        except (LlmError, ParseFailureError) as exc:
            logger.warning("similarity detection failed for %s: %s", key, exc)
            return []
        segments: list[SimilaritySegment] = []
        items = parsed.get("plagiarism_segments", []) if isinstance(parsed, Mapping) else []
        for i, item in enumerate(items, start=1):
            if not isinstance(item, Mapping):
                continue
            seg = SimilaritySegment(
                segment_id=int(item.get("segment_id", i)),
                location=str(item.get("location", "unknown")) or "unknown",
                original_text=str(item.get("original_text", "")),
                candidate_text=str(item.get("candidate_text", "")),
                segment_type=str(item.get("plagiarism_type", item.get("type", "Direct"))),
                rationale=str(item.get("rationale", "")),
            )
            verified = verify_segment(seg, target_doc, candidate.full_text)
            if verified.verified:
                segments.append(verified)
            else:
                logger.info("similarity segment %d for %s failed verification", i, key)
        return filter_segments(segments)

    return cache.get_or_compute(key, _compute)


# --- references, narrative, assessment ------------------------------------------------


@dataclass(frozen=True)
class ReportReference:
    index: int
    alias: str
    canonical_id: str
    title: str
    url: Optional[str]
    year: Optional[int]
    is_original: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "index": self.index,
            "alias": self.alias,
            "canonical_id": self.canonical_id,
            "title": self.title,
            "url": self.url,
            "year": self.year,
            "is_original": self.is_original,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ReportReference":
        return cls(
            index=int(d["index"]),
            alias=d["alias"],
            canonical_id=d["canonical_id"],
            title=d["title"],
            url=d.get("url"),
            year=d.get("year"),
            is_original=bool(d.get("is_original", False)),
        )


_ALIAS_STOPWORDS = frozenset(
    {"a", "an", "and", "for", "in", "of", "on", "the", "to", "using", "via", "with"}
)


def derive_alias(title: str) -> str:
    """Short deterministic display name for a paper."""
    head = title.split(":")[0].strip()
    if head and len(head.split()) <= 4 and len(head) <= 48:
        return head
    words = title.split()[:3]
    while len(words) > 1 and words[-1].lower() in _ALIAS_STOPWORDS:
        words.pop()
    return " ".join(words)


def build_references(target: PaperRecord, candidate_set: CandidateSet) -> list[ReportReference]:
    """Citation index: alias 0 is the target, candidates get ascending indices."""
    refs = [
        ReportReference(
            index=0,
            alias=derive_alias(target.title),
            canonical_id=str(target.canonical_id),
            title=target.title,
            url=target.url,
            year=target.publication_date.year if target.publication_date else None,
            is_original=True,
        )
    ]
    for i, uc in enumerate(candidate_set.unified, start=1):
        paper = uc.paper
        refs.append(
            ReportReference(
                index=i,
                alias=derive_alias(paper.title),
                canonical_id=str(paper.canonical_id),
                title=paper.title,
                url=paper.url,
                year=paper.publication_date.year if paper.publication_date else None,
                is_original=False,
            )
        )
    return refs


_CITATION_RE = re.compile(r"\[(\d+)\]")


def find_citation_indices(text: str) -> list[int]:
    return [int(m.group(1)) for m in _CITATION_RE.finditer(text)]


def strip_bad_citations(text: str, allowed: set[int]) -> str:
    def _sub(m: re.Match) -> str:
        return m.group(0) if int(m.group(1)) in allowed else ""

    return _CITATION_RE.sub(_sub, text)


def _request_prose(
    llm: LlmClient,
    system: str,
    user: str,
    key: str,
    allowed: set[int],
) -> tuple[Any, list[str]]:
    """Call, validate citations, re-request once, then strip mechanically."""
    diagnostics: list[str] = []

    def _once() -> Any:
        raw = llm.complete(system, user, 0.0)
        parsed = parse_structured_output(raw).value
        if not isinstance(parsed, Mapping) or key not in parsed:
            raise ParseFailureError(f"missing key {key!r} in response", raw)
        return parsed[key]

    value = _once()
    texts = value if isinstance(value, list) else [value]
    bad = {i for t in texts for i in find_citation_indices(str(t)) if i not in allowed}
    if bad:
        diagnostics.append(f"citations outside allowed set {sorted(bad)}; re-requesting once")
        value = _once()
        texts = value if isinstance(value, list) else [value]
        bad = {i for t in texts for i in find_citation_indices(str(t)) if i not in allowed}
        if bad:
            diagnostics.append(f"stripping residual bad citations {sorted(bad)}")
            if isinstance(value, list):
                value = [strip_bad_citations(str(t), allowed) for t in value]
            else:
                value = strip_bad_citations(str(value), allowed)
    return value, diagnostics


def generate_narrative(
    core_task: CoreTask,
    taxonomy: TaxonomyNode,
    position: Optional[StructuralPosition],
    references: Sequence[ReportReference],
    allowed_indices: set[int],
    llm: LlmClient,
) -> tuple[str, list[str]]:
    """Two survey-style paragraphs grounded in the taxonomy and citation index."""
    citation_index = {
        r.canonical_id: {
            "alias": r.alias,
            "index": r.index,
            "year": r.year,
            "is_original": r.is_original,
        }
        for r in references
    }
    original = next((r for r in references if r.is_original), None)
    payload = {
        "language": "en",
        "core_task_text": core_task.text,
        "taxonomy_root": taxonomy.name,
        "top_level_branches": [c.name for c in taxonomy.subtopics],
        "original_paper_id": original.canonical_id if original else None,
        "original_taxonomy_path": list(position.path) if position else [],
        "neighbor_ids": list(position.siblings) if position else [],
        "citation_index": citation_index,
        "allowed_citation_indices": sorted(allowed_indices),
    }
    try:
        value, diagnostics = _request_prose(
            llm,
            load_prompt("narrative_synthesis"),
            json.dumps(payload, ensure_ascii=False),
            "narrative",
            allowed_indices,
        )
        return str(value), diagnostics
    except (LlmError, ParseFailureError) as exc:
        return "Narrative unavailable.", [f"narrative generation failed: {exc}"]


def generate_overall_assessment(
    target: PaperRecord,
    taxonomy: TaxonomyNode,
    position: Optional[StructuralPosition],
    statistics: Sequence[Mapping[str, Any]],
    total_candidates: int,
    narrative: str,
    allowed_indices: set[int],
    llm: LlmClient,
) -> tuple[list[str], list[str]]:
    """Three to four reviewer-style paragraphs over the collected signals."""
    payload = {
        "paper_context": {"abstract": target.abstract, "introduction": ""},
        "taxonomy_tree": taxonomy.to_dict(),
        "original_paper_position": {
            "leaf_name": position.path[-1] if position and position.path else None,
            "sibling_count": len(position.siblings) if position else 0,
            "taxonomy_path": list(position.path) if position else [],
        },
        "literature_search_scope": {
            "total_candidates": total_candidates,
            "search_method": "semantic_top_k",
        },
        "contributions": list(statistics),
        "taxonomy_narrative": narrative,
        "allowed_citation_indices": sorted(allowed_indices),
    }
    try:
        value, diagnostics = _request_prose(
            llm,
            load_prompt("overall_assessment"),
            json.dumps(payload, ensure_ascii=False),
            "paragraphs",
            allowed_indices,
        )
        paragraphs = [str(p) for p in value] if isinstance(value, list) else [str(value)]
        return paragraphs, diagnostics
    except (LlmError, ParseFailureError) as exc:
        return ["Overall assessment unavailable."], [f"assessment generation failed: {exc}"]


def generate_one_liners(
    papers: Sequence[PaperRecord], llm: LlmClient
) -> dict[str, str]:
    """Optional 20-30 word blurbs attached to the papers index."""
    if not papers:
        return {}
    payload = {
        "papers": [
            {"canonical_id": str(p.canonical_id), "title": p.title, "abstract": p.abstract}
            for p in papers
        ]
    }
    try:
        raw = llm.complete(load_prompt("one_liner"), json.dumps(payload, ensure_ascii=False), 0.0)
        parsed = parse_structured_output(raw).value
    except (LlmError, ParseFailureError) as exc:
        logger.warning("one-liner generation failed: %s", exc)
        return {}
    out: dict[str, str] = {}
    if isinstance(parsed, Mapping):
        for item in parsed.get("items", []):
            if isinstance(item, Mapping) and item.get("paper_id"):
                out[str(item["paper_id"])] = str(item.get("brief_one_liner", ""))
    return out


# --- report assembly ---------------------------------------------------------------


@dataclass
class ContributionAnalysisEntry:
    claim: ContributionClaim
    statistics: dict[str, int]
    comparisons: list[ContributionComparison]

    def to_dict(self) -> dict[str, Any]:
        return {
            "claim_id": self.claim.claim_id,
            "name": self.claim.name,
            "author_claim_text": self.claim.author_claim_text,
            "description": self.claim.description,
            "source_hint": self.claim.source_hint,
            "statistics": dict(self.statistics),
            "comparisons": [c.to_dict() for c in self.comparisons],
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ContributionAnalysisEntry":
        claim = ContributionClaim(
            claim_id=d["claim_id"],
            name=d["name"],
            author_claim_text=d.get("author_claim_text", "unknown"),
            description=d.get("description", "unknown"),
            source_hint=d.get("source_hint", "unknown"),
        )
        return cls(
            claim=claim,
            statistics=dict(d.get("statistics", {})),
            comparisons=[ContributionComparison.from_dict(c) for c in d.get("comparisons", [])],
        )


@dataclass
class NoveltyReport:
    """The complete seven-module analysis output consumed by the renderer."""

    original_paper: dict[str, Any]
    core_task_survey: dict[str, Any]
    overall_assessment: list[str]
    contributions: list[ContributionAnalysisEntry]
    core_task_comparisons: CoreTaskAnalysis
    references: list[ReportReference]
    textual_similarity: dict[str, Any]
    metadata: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {
            "original_paper": self.original_paper,
            "core_task_survey": self.core_task_survey,
            "contribution_analysis": {
                "overall_assessment": list(self.overall_assessment),
                "contributions": [c.to_dict() for c in self.contributions],
            },
            "core_task_comparisons": self.core_task_comparisons.to_dict(),
            "references": [r.to_dict() for r in self.references],
            "textual_similarity": self.textual_similarity,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "NoveltyReport":
        required = (
            "original_paper",
            "core_task_survey",
            "contribution_analysis",
            "core_task_comparisons",
            "references",
            "textual_similarity",
            "metadata",
        )
        for module in required:
            if module not in d:
                raise AssemblyError(f"report is missing required module: {module}")
        ca = d["contribution_analysis"]
        return cls(
            original_paper=dict(d["original_paper"]),
            core_task_survey=dict(d["core_task_survey"]),
            overall_assessment=list(ca.get("overall_assessment", ())),
            contributions=[
                ContributionAnalysisEntry.from_dict(c) for c in ca.get("contributions", [])
            ],
            core_task_comparisons=CoreTaskAnalysis.from_dict(d["core_task_comparisons"]),
            references=[ReportReference.from_dict(r) for r in d["references"]],
            textual_similarity=dict(d["textual_similarity"]),
            metadata=dict(d["metadata"]),
        )


def assemble_report(
    *,
    target: PaperRecord,
    core_task: CoreTask,
    claims: Sequence[ContributionClaim],
    taxonomy_outcome: RepairOutcome,
    position: Optional[StructuralPosition],
    core_task_analysis: CoreTaskAnalysis,
    comparisons_by_claim: Mapping[str, Sequence[ContributionComparison]],
    candidate_set: CandidateSet,
    segments_by_candidate: Mapping[str, Sequence[SimilaritySegment]],
    references: Sequence[ReportReference],
    narrative: str,
    overall_assessment: Sequence[str],
    one_liners: Mapping[str, str],
    generated_at: str,
    pipeline_version: str,
    diagnostics: Sequence[str] = (),
    artifact_filenames: Optional[Mapping[str, str]] = None,
) -> NoveltyReport:
    """Build the seven-module report and check its internal consistency.

    The downgrade pass must already have run on the comparison entries.
    Raises AssemblyError when a required module is missing or the statistics
    identity does not hold.
    """
    modules = {
        "original_paper": target,
        "core_task_survey": taxonomy_outcome,
        "contribution_analysis": comparisons_by_claim,
        "core_task_comparisons": core_task_analysis,
        "references": references,
        "textual_similarity": segments_by_candidate,
        "metadata": generated_at,
    }
    for name, value in modules.items():
        if value is None:
            raise AssemblyError(f"missing required module: {name}")

    ref_by_id = {r.canonical_id: r for r in references}
    rank_by_id = {str(p.canonical_id): i for i, p in enumerate(candidate_set.core_task, start=1)}

    papers_index: list[dict[str, Any]] = []
    target_id = str(target.canonical_id)
    index_ids = [target_id] + [
        str(p.canonical_id)
        for p in candidate_set.core_task
        if str(p.canonical_id) != target_id
    ]
    titles = {target_id: target.title}
    urls = {target_id: target.url}
    for p in candidate_set.core_task:
        titles[str(p.canonical_id)] = p.title
        urls[str(p.canonical_id)] = p.url
    for pid in index_ids:
        ref = ref_by_id.get(pid)
        entry: dict[str, Any] = {
            "canonical_id": pid,
            "index": ref.index if ref else None,
            "alias": ref.alias if ref else derive_alias(titles[pid]),
            "title": titles[pid],
            "url": urls[pid],
            "rank": rank_by_id.get(pid, 0),
        }
        if pid in one_liners:
            entry["one_liner"] = one_liners[pid]
        papers_index.append(entry)

    contributions: list[ContributionAnalysisEntry] = []
    for claim in claims:
        entries = list(comparisons_by_claim.get(claim.claim_id, ()))
        examined = len(candidate_set.per_contribution.get(claim.claim_id, ()))
        can_refute = sum(1 for e in entries if e.refutation_status == CAN_REFUTE)
        stats = {
            "candidates_examined": examined,
            "can_refute": can_refute,
            "non_refutable_or_unclear": examined - can_refute,
        }
        if stats["can_refute"] + stats["non_refutable_or_unclear"] != examined:
            raise AssemblyError(f"statistics identity violated for {claim.claim_id}")
        contributions.append(
            ContributionAnalysisEntry(claim=claim, statistics=stats, comparisons=entries)
        )

    total_segments = sum(len(v) for v in segments_by_candidate.values())
    textual_similarity = {
        "total_segments": total_segments,
        "candidates_with_overlap": [k for k, v in segments_by_candidate.items() if v],
        "segments_by_candidate": {
            k: [s.to_dict() for s in v] for k, v in segments_by_candidate.items() if v
        },
    }

    survey = {
        "core_task": core_task.text,
        "taxonomy": taxonomy_outcome.taxonomy.to_dict(),
        "taxonomy_status": taxonomy_outcome.status,
        "taxonomy_content_hash": taxonomy_content_hash(taxonomy_outcome.taxonomy),
        "narrative": narrative,
        "papers_index": papers_index,
        "diagnostics": list(taxonomy_outcome.diagnostics),
    }

    metadata = {
        "generated_at": generated_at,
        "pipeline_version": pipeline_version,
        "component_flags": {
            "taxonomy_status": taxonomy_outcome.status,
            "core_task_comparison_mode": core_task_analysis.mode,
        },
        "artifact_filenames": dict(artifact_filenames or {}),
        "warnings": list(diagnostics),
    }

    return NoveltyReport(
        original_paper={
            "canonical_id": target_id,
            "title": target.title,
            "abstract": target.abstract,
            "url": target.url,
            "publication_date": target.publication_date.to_dict()
            if target.publication_date
            else None,
        },
        core_task_survey=survey,
        overall_assessment=list(overall_assessment),
        contributions=contributions,
        core_task_comparisons=core_task_analysis,
        references=list(references),
        textual_similarity=textual_similarity,
        metadata=metadata,
    )


# --- phase orchestration ---------------------------------------------------------


def run_analysis_phase(
    phase1: Phase1Result,
    candidate_set: CandidateSet,
    target: PaperRecord,
    target_doc: DocumentText,
    llm: LlmClient,
    *,
    concurrency: int = 1,
    generated_at: str,
    pipeline_version: str,
    artifact_filenames: Optional[Mapping[str, str]] = None,
    similarity_cache: Optional[SimilarityCache] = None,
) -> NoveltyReport:
    """Run all Phase III work and assemble the structured report."""
    diagnostics: list[str] = []
    references = build_references(target, candidate_set)
    citations = {r.canonical_id: f"{r.alias}[{r.index}]" for r in references}
    allowed_indices = {r.index for r in references}

    outcome = build_taxonomy(
        candidate_set.core_task, phase1.core_task, llm, original=target
    )
    position: Optional[StructuralPosition] = None
    try:
        position = structural_position(outcome.taxonomy, str(target.canonical_id))
    except InvalidInputError as exc:
        diagnostics.append(f"structural position unavailable: {exc}")

    candidate_records: dict[str, PaperRecord] = {}
    for uc in candidate_set.unified:
        candidate_records[str(uc.paper.canonical_id)] = uc.paper
    for papers in candidate_set.per_contribution.values():
        for p in papers:
            candidate_records.setdefault(str(p.canonical_id), p)
    for p in candidate_set.core_task:
        candidate_records.setdefault(str(p.canonical_id), p)

    if position is not None:
        core_analysis = compare_core_task(
            position,
            target,
            target_doc,
            candidate_records,
            llm,
            core_task=phase1.core_task,
            citations=citations,
        )
    else:
        core_analysis = CoreTaskAnalysis(
            mode="isolated",
            taxonomy_path=[],
            isolation={"note": "No comparison: target position in taxonomy is unknown."},
            diagnostics=["taxonomy did not place the target paper"],
        )

    # one comparison call per distinct candidate, covering every claim
    comparison_order: list[str] = []
    for claim in phase1.claims:
        for paper in candidate_set.per_contribution.get(claim.claim_id, ()):
            pid = str(paper.canonical_id)
            if pid not in comparison_order:
                comparison_order.append(pid)

    def _compare(pid: str) -> tuple[str, list[ContributionComparison]]:
        record = candidate_records[pid]
        return pid, compare_contribution(
            target_doc, record, phase1.claims, llm, citation=citations.get(pid)
        )

    entries_by_candidate: dict[str, list[ContributionComparison]] = {}
    if comparison_order:
        if concurrency > 1:
            with ThreadPoolExecutor(max_workers=concurrency) as pool:
                for pid, entries in pool.map(_compare, comparison_order):
                    entries_by_candidate[pid] = entries
        else:
            for pid in comparison_order:
                entries_by_candidate[pid] = _compare(pid)[1]

    cache = similarity_cache or SimilarityCache()
    similarity_order = [str(uc.paper.canonical_id) for uc in candidate_set.unified]

    def _similar(pid: str) -> tuple[str, list[SimilaritySegment]]:
        return pid, detect_similarity(
            target_doc, candidate_records[pid], llm, cache,
            target_id=str(target.canonical_id),
        )

    segments_by_candidate: dict[str, list[SimilaritySegment]] = {}
    if similarity_order:
        if concurrency > 1:
            with ThreadPoolExecutor(max_workers=concurrency) as pool:
                for pid, segments in pool.map(_similar, similarity_order):
                    segments_by_candidate[pid] = segments
        else:
            for pid in similarity_order:
                segments_by_candidate[pid] = _similar(pid)[1]

    # merge similarity results and apply the downgrade policy, in that order
    all_entries: dict[str, list[ContributionComparison]] = {}
    for claim in phase1.claims:
        entries: list[ContributionComparison] = []
        for paper in candidate_set.per_contribution.get(claim.claim_id, ()):
            pid = str(paper.canonical_id)
            candidate_entries = entries_by_candidate.get(pid, [])
            idx = phase1.claims.index(claim)
            if idx < len(candidate_entries):
                entry = candidate_entries[idx]
            else:
                entry = ContributionComparison(
                    canonical_id=pid,
                    candidate_paper_title=candidate_records[pid].title,
                    candidate_paper_url=candidate_records[pid].url,
                    comparison_mode="abstract",
                    refutation_status=UNCLEAR,
                    brief_note="No analysis produced for this candidate.",
                )
            entry = replace(
                entry, similarity_segments=list(segments_by_candidate.get(pid, []))
            )
            entries.append(entry)
        all_entries[claim.claim_id] = downgrade_unverified(entries)

    for comparison in core_analysis.comparisons:
        comparison.similarity_segments = list(
            segments_by_candidate.get(comparison.canonical_id, [])
        )

    one_liners = generate_one_liners(candidate_set.core_task, llm)
    taxonomy_indices = {0} | {
        r.index for r in references if r.canonical_id in {str(p.canonical_id) for p in candidate_set.core_task}
    }
    narrative, narrative_diag = generate_narrative(
        phase1.core_task, outcome.taxonomy, position, references, taxonomy_indices, llm
    )
    diagnostics.extend(narrative_diag)

    stats_payload = [
        {
            "name": claim.name,
            "candidates_examined": len(candidate_set.per_contribution.get(claim.claim_id, ())),
            "can_refute_count": sum(
                1
                for e in all_entries.get(claim.claim_id, ())
                if e.refutation_status == CAN_REFUTE
            ),
        }
        for claim in phase1.claims
    ]
    assessment, assessment_diag = generate_overall_assessment(
        target,
        outcome.taxonomy,
        position,
        stats_payload,
        len(candidate_set.unified),
        narrative,
        allowed_indices,
        llm,
    )
    diagnostics.extend(assessment_diag)
    diagnostics.extend(phase1.warnings)

    return assemble_report(
        target=target,
        core_task=phase1.core_task,
        claims=phase1.claims,
        taxonomy_outcome=outcome,
        position=position,
        core_task_analysis=core_analysis,
        comparisons_by_claim=all_entries,
        candidate_set=candidate_set,
        segments_by_candidate=segments_by_candidate,
        references=references,
        narrative=narrative,
        overall_assessment=assessment,
        one_liners=one_liners,
        generated_at=generated_at,
        pipeline_version=pipeline_version,
        diagnostics=diagnostics,
        artifact_filenames=artifact_filenames,
    )
