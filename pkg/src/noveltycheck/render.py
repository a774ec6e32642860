"""Phase IV: deterministic Markdown rendering of the analysis report.

No model calls happen here; every byte of output is a pure function of the
report and the render configuration. Citation indices in prose are checked
against the references module, and long quotes are truncated for display
with an ellipsis marker.
"""

from __future__ import annotations

import logging
import re
import subprocess
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping, Optional

from .analysis import (
    CAN_REFUTE,
    ContributionComparison,
    NoveltyReport,
    ReportReference,
    find_citation_indices,
)
from .errors import InvalidInputError, RenderError
from .verification import SimilaritySegment

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RenderConfig:
    quote_truncation_limit: int = 90
    indent_unit: str = "  "
    emit_pdf: bool = False
    output_dir: Optional[Path] = None
    pdf_converter: str = "pandoc"

    def __post_init__(self) -> None:
        if self.quote_truncation_limit < 30:
            raise InvalidInputError("quote truncation limit must be at least 30 words")


def _truncate_quote(text: str, limit: int) -> str:
    words = text.split()
    if len(words) <= limit:
        return text
    return " ".join(words[:limit]) + "…"


def _check_citations(text: str, indices: set[int], where: str) -> str:
    for idx in find_citation_indices(text):
        if idx not in indices:
            raise RenderError(f"dangling citation index {idx} in {where}")
    return text


class _MarkdownBuilder:
    def __init__(self) -> None:
        self._lines: list[str] = []

    def line(self, text: str = "") -> None:
        self._lines.append(text)

    def blank(self) -> None:
        if self._lines and self._lines[-1] != "":
            self._lines.append("")

    def text(self) -> str:
        return "\n".join(self._lines).rstrip("\n") + "\n"


def _cite(ref: Optional[ReportReference], fallback: str) -> str:
    if ref is None:
        return fallback
    return f"{ref.alias} [{ref.index}]"


def _render_taxonomy(
    md: _MarkdownBuilder,
    node: Mapping[str, Any],
    refs_by_id: Mapping[str, ReportReference],
    indent_unit: str,
    depth: int = 0,
) -> None:
    indent = indent_unit * depth
    scope = node.get("scope_note")
    label = f"**{node['name']}**"
    if scope:
        label += f" · {scope}"
    md.line(f"{indent}- {label}")
    for pid in node.get("papers", ()):
        ref = refs_by_id.get(pid)
        md.line(f"{indent}{indent_unit}- {_cite(ref, pid)}" + (f": {ref.title}" if ref else ""))
    for child in node.get("subtopics", ()):
        _render_taxonomy(md, child, refs_by_id, indent_unit, depth + 1)


def _render_segment(
    md: _MarkdownBuilder, seg: SimilaritySegment, limit: int
) -> None:
    md.line(
        f"- Segment {seg.segment_id} ({seg.segment_type}, location: {seg.location}, "
        f"{seg.min_word_count} words)"
    )
    md.line(f"  > Target: \"{_truncate_quote(seg.original_text, limit)}\"")
    md.line(f"  > Candidate: \"{_truncate_quote(seg.candidate_text, limit)}\"")
    if seg.rationale:
        md.line(f"  - Rationale: {seg.rationale}")


def _score(loc) -> str:
    if loc is None:
        return "unverified"
    status = "verified" if loc.found else "not found"
    return f"{status}, score {loc.match_score:.3f}"


def _render_comparison_entry(
    md: _MarkdownBuilder,
    entry: ContributionComparison,
    refs_by_id: Mapping[str, ReportReference],
    indices: set[int],
    limit: int,
) -> None:
    ref = refs_by_id.get(entry.canonical_id)
    md.line(f"#### {_cite(ref, entry.canonical_id)}: {entry.candidate_paper_title}")
    md.blank()
    md.line(f"- **Status:** `{entry.refutation_status}` ({entry.comparison_mode} comparison)")
    if entry.refutation_status == CAN_REFUTE and entry.refutation_evidence is not None:
        summary = _check_citations(
            entry.refutation_evidence.summary, indices, "refutation summary"
        )
        md.line(f"- **Summary:** {summary}")
        for i, pair in enumerate(entry.refutation_evidence.evidence_pairs, start=1):
            rationale = _check_citations(pair.rationale, indices, "evidence rationale")
            md.line(f"- **Evidence {i}:** {rationale}")
            md.line(
                f"  > Target ({pair.original_paragraph_label}; {_score(pair.original_location)}): "
                f"\"{_truncate_quote(pair.original_quote, limit)}\""
            )
            md.line(
                f"  > Candidate ({pair.candidate_paragraph_label}; {_score(pair.candidate_location)}): "
                f"\"{_truncate_quote(pair.candidate_quote, limit)}\""
            )
    elif entry.brief_note:
        md.line(f"- **Note:** {_check_citations(entry.brief_note, indices, 'brief note')}")
    for seg in entry.similarity_segments:
        _render_segment(md, seg, limit)
    md.blank()


def render_markdown(report: NoveltyReport, cfg: RenderConfig = RenderConfig()) -> str:
    """Render the full report; byte-deterministic for a fixed report and config."""
    refs_by_id = {r.canonical_id: r for r in report.references}
    indices = {r.index for r in report.references}
    limit = cfg.quote_truncation_limit
    md = _MarkdownBuilder()

    original = report.original_paper
    meta = report.metadata
    md.line("# Novelty Analysis Report")
    md.blank()
    md.line(f"**Paper:** {original.get('title', 'unknown')}")
    md.line(f"**Canonical ID:** `{original.get('canonical_id', 'unknown')}`")
    md.line(f"**URL:** {original.get('url') or 'n/a'}")
    md.line(f"**Generated:** {meta.get('generated_at', 'unknown')}")
    md.line(f"**Pipeline version:** {meta.get('pipeline_version', 'unknown')}")
    md.blank()

    survey = report.core_task_survey
    md.line("## Core Task Survey")
    md.blank()
    md.line(f"**Core task:** {survey.get('core_task', '')}")
    md.blank()
    md.line("### Taxonomy")
    md.blank()
    if survey.get("taxonomy_status") == "needs_review":
        md.line("> Note: this taxonomy failed validation after repair (needs_review).")
        md.blank()
    _render_taxonomy(md, survey.get("taxonomy", {"name": "Survey Taxonomy"}), refs_by_id, cfg.indent_unit)
    md.blank()
    md.line("### Narrative")
    md.blank()
    narrative = _check_citations(survey.get("narrative", ""), indices, "narrative")
    for paragraph in narrative.split("\n\n"):
        md.line(paragraph.strip())
        md.blank()

    md.line("## Core Task Comparisons")
    md.blank()
    cta = report.core_task_comparisons
    if cta.taxonomy_path:
        md.line(f"**Taxonomy position:** {' > '.join(cta.taxonomy_path)}")
        md.blank()
    if cta.mode == "sibling":
        for entry in cta.comparisons:
            ref = refs_by_id.get(entry.canonical_id)
            md.line(f"### {_cite(ref, entry.canonical_id)}: {entry.candidate_paper_title}")
            md.blank()
            md.line(
                f"- **Duplicate variant:** {'yes' if entry.is_duplicate_variant else 'no'}"
                f" ({entry.comparison_mode} comparison)"
            )
            comparison = _check_citations(entry.brief_comparison, indices, "sibling comparison")
            md.line(f"- {comparison}")
            for seg in entry.similarity_segments:
                _render_segment(md, seg, limit)
            md.blank()
    elif cta.mode == "subtopic_siblings" and cta.subtopic_summary:
        summary = cta.subtopic_summary
        overall = _check_citations(str(summary.get("overall", "")), indices, "subtopic summary")
        md.line(overall)
        md.blank()
        for key, heading in (("similarities", "Similarities"), ("differences", "Differences")):
            items = summary.get(key) or []
            if items:
                md.line(f"**{heading}:**")
                for item in items:
                    md.line(f"- {_check_citations(str(item), indices, key)}")
                md.blank()
    else:
        note = (cta.isolation or {}).get(
            "note", "No comparison: the paper has no immediate semantic neighbors."
        )
        md.line(note)
        md.blank()

    md.line("## Contribution Analysis")
    md.blank()
    md.line("### Overall Assessment")
    md.blank()
    for paragraph in report.overall_assessment:
        md.line(_check_citations(paragraph, indices, "overall assessment"))
        md.blank()
    for i, contribution in enumerate(report.contributions, start=1):
        md.line(f"### Contribution {i}: {contribution.claim.name}")
        md.blank()
        md.line(
            f"**Author claim:** \"{contribution.claim.author_claim_text}\""
            f" ({contribution.claim.source_hint})"
        )
        stats = contribution.statistics
        md.line(
            f"**Statistics:** {stats.get('candidates_examined', 0)} candidates examined; "
            f"{stats.get('can_refute', 0)} can refute; "
            f"{stats.get('non_refutable_or_unclear', 0)} cannot refute or unclear."
        )
        md.blank()
        for entry in contribution.comparisons:
            _render_comparison_entry(md, entry, refs_by_id, indices, limit)

    md.line("## Textual Similarity")
    md.blank()
    similarity = report.textual_similarity
    segments_by_candidate: Mapping[str, Any] = similarity.get("segments_by_candidate", {})
    if not similarity.get("total_segments"):
        md.line("No verified similarity segments were found.")
        md.blank()
    else:
        for pid, raw_segments in segments_by_candidate.items():
            ref = refs_by_id.get(pid)
            title = ref.title if ref else pid
            md.line(f"### {_cite(ref, pid)}: {title}")
            md.blank()
            for raw in raw_segments:
                seg = (
                    raw
                    if isinstance(raw, SimilaritySegment)
                    else SimilaritySegment.from_dict(raw)
                )
                _render_segment(md, seg, limit)
            md.blank()

    md.line("## References")
    md.blank()
    for ref in report.references:
        suffix = " (original paper)" if ref.is_original else ""
        url = f" {ref.url}" if ref.url else ""
        md.line(f"- [{ref.index}] **{ref.alias}** — {ref.title}.{url}{suffix}")
    md.blank()
    return md.text()


_UNSAFE_RE = re.compile(r"[^A-Za-z0-9._-]+")


def output_filename(report: NoveltyReport, extension: str = "md") -> str:
    """Deterministic, filesystem-safe name derived from report metadata."""
    cid = report.original_paper.get("canonical_id", "unknown")
    version = report.metadata.get("pipeline_version", "0")
    safe_cid = _UNSAFE_RE.sub("-", str(cid)).strip("-")
    safe_version = _UNSAFE_RE.sub("-", str(version)).strip("-")
    return f"novelty_report_{safe_cid}_v{safe_version}.{extension}"


def render_pdf(markdown_path: Path, cfg: RenderConfig) -> Path:
    """Shell out to the configured converter; excluded from golden tests."""
    pdf_path = markdown_path.with_suffix(".pdf")
    try:
        subprocess.run(
            [cfg.pdf_converter, str(markdown_path), "-o", str(pdf_path)],
            check=True,
            capture_output=True,
        )
    except (OSError, subprocess.CalledProcessError) as exc:
        raise RenderError(f"pdf conversion failed: {exc}") from exc
    return pdf_path
