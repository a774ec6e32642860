"""Token-level anchor alignment for quote and overlap verification.

A quote is split into anchors of at least 20 characters. Each anchor is
aligned against same-length windows of the document; its coverage is the
fraction of anchor tokens matched in the best window. The quote's
confidence combines mean hit coverage and hit ratio, halved when the
matched anchors are spread more than 300 tokens apart. Scores use the
exact rational form (7*c + 3*h)/10 so identity cases come out at 1.0.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, replace
from difflib import SequenceMatcher
from typing import Any, Mapping, Optional, Sequence, Union

from .papers import DocumentText

logger = logging.getLogger(__name__)

MIN_ANCHOR_CHARS = 20
ANCHOR_HIT_THRESHOLD = 0.6
QUOTE_FOUND_THRESHOLD = 0.6  # strict: a score of exactly 0.6 is not found
MAX_COMPACT_GAP = 300
MIN_SEGMENT_WORDS = 30
MAX_SEGMENTS_KEPT = 3

#: Evaluate every window start when the document is small enough; fall back
#: to candidate starts derived from shared-token alignments otherwise.
_EXHAUSTIVE_WINDOW_LIMIT = 4096

# apostrophes and intra-word hyphens stay inside tokens; everything else splits
_TOKEN_RE = re.compile(r"[^\W_]+(?:['’-][^\W_]+)*", re.UNICODE)


@dataclass(frozen=True)
class TokenStream:
    """Normalized tokens plus their character spans in the source text."""

    tokens: tuple[str, ...]
    offsets: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.tokens)


def tokenize(text: str) -> TokenStream:
    """Split on whitespace and punctuation boundaries, lowercasing tokens."""
    tokens: list[str] = []
    offsets: list[tuple[int, int]] = []
    for m in _TOKEN_RE.finditer(text):
        tokens.append(m.group(0).lower())
        offsets.append((m.start(), m.end()))
    return TokenStream(tokens=tuple(tokens), offsets=tuple(offsets))


@dataclass(frozen=True)
class Anchor:
    """A contiguous slice of the quote's tokens used as an alignment unit."""

    tokens: tuple[str, ...]
    start_index: int

    @property
    def char_length(self) -> int:
        return len(" ".join(self.tokens))


def segment_anchors(quote: TokenStream) -> list[Anchor]:
    """Greedy left-to-right segmentation into anchors of >= 20 characters.

    A short final remainder merges into the previous anchor; a quote under
    20 characters yields a single undersized anchor. The anchors partition
    the quote's tokens in order.
    """
    anchors: list[Anchor] = []
    current: list[str] = []
    current_start = 0
    current_len = 0
    for i, token in enumerate(quote.tokens):
        if not current:
            current_start = i
            current_len = len(token)
        else:
            current_len += 1 + len(token)
        current.append(token)
        if current_len >= MIN_ANCHOR_CHARS:
            anchors.append(Anchor(tokens=tuple(current), start_index=current_start))
            current = []
            current_len = 0
    if current:
        if anchors:
            tail = anchors.pop()
            anchors.append(
                Anchor(tokens=tail.tokens + tuple(current), start_index=tail.start_index)
            )
        else:
            anchors.append(Anchor(tokens=tuple(current), start_index=current_start))
    return anchors


@dataclass(frozen=True)
class AnchorMatch:
    """Best-window alignment result for one anchor."""

    coverage: float
    doc_span: Optional[tuple[int, int]]  # token interval, end exclusive

    @property
    def is_hit(self) -> bool:
        return self.coverage >= ANCHOR_HIT_THRESHOLD


def _matched_tokens(matcher: SequenceMatcher) -> tuple[int, Optional[tuple[int, int]]]:
    blocks = [b for b in matcher.get_matching_blocks() if b.size > 0]
    if not blocks:
        return 0, None
    total = sum(b.size for b in blocks)
    span = (blocks[0].b, blocks[-1].b + blocks[-1].size)
    return total, span


def _candidate_starts(anchor: Sequence[str], doc: Sequence[str], m: int, n: int) -> list[int]:
    """Window starts that align some shared token at its anchor offset."""
    positions: dict[str, list[int]] = {}
    anchor_set = set(anchor)
    for j, token in enumerate(doc):
        if token in anchor_set:
            positions.setdefault(token, []).append(j)
    starts: set[int] = set()
    limit = n - m
    for q, token in enumerate(anchor):
        for p in positions.get(token, ()):
            starts.add(min(max(p - q, 0), limit))
    return sorted(starts)


def align_anchor(
    anchor: Union[Anchor, Sequence[str]], doc: Union[TokenStream, Sequence[str]]
) -> AnchorMatch:
    """Find the document window of the anchor's length with the most matched tokens.

    Matching uses longest-contiguous-subsequence alignment; coverage is
    matched anchor tokens divided by anchor length. Ties go to the leftmost
    window.
    """
    anchor_tokens = list(anchor.tokens if isinstance(anchor, Anchor) else anchor)
    doc_tokens = list(doc.tokens if isinstance(doc, TokenStream) else doc)
    m, n = len(anchor_tokens), len(doc_tokens)
    if m == 0 or n == 0:
        return AnchorMatch(coverage=0.0, doc_span=None)

    # fast path: the anchor occurs verbatim
    first = anchor_tokens[0]
    for i in range(n - m + 1):
        if doc_tokens[i] == first and doc_tokens[i : i + m] == anchor_tokens:
            return AnchorMatch(coverage=1.0, doc_span=(i, i + m))

    if n <= m:
        starts: Sequence[int] = [0]
        window_len = n
    else:
        window_len = m
        n_windows = n - m + 1
        if n_windows <= _EXHAUSTIVE_WINDOW_LIMIT:
            starts = range(n_windows)
        else:
            starts = _candidate_starts(anchor_tokens, doc_tokens, m, n)

    best_matched = 0
    best_span: Optional[tuple[int, int]] = None
    matcher = SequenceMatcher(None, anchor_tokens, [], autojunk=False)
    for start in starts:
        window = doc_tokens[start : start + window_len]
        matcher.set_seq2(window)
        matched, span = _matched_tokens(matcher)
        if matched > best_matched:
            best_matched = matched
            if span is not None:
                best_span = (start + span[0], start + span[1])
            if best_matched == m:
                break
    if best_matched == 0:
        return AnchorMatch(coverage=0.0, doc_span=None)
    return AnchorMatch(coverage=best_matched / m, doc_span=best_span)


@dataclass(frozen=True)
class QuoteLocation:
    """Verification outcome for one quote against one document."""

    found: bool
    match_score: float

    def to_dict(self) -> dict[str, Any]:
        return {"found": self.found, "match_score": self.match_score}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "QuoteLocation":
        return cls(found=bool(d["found"]), match_score=float(d["match_score"]))


@dataclass(frozen=True)
class QuoteVerification:
    """QuoteLocation plus the per-anchor detail behind it."""

    location: QuoteLocation
    anchor_matches: tuple[AnchorMatch, ...]
    hit_ratio: float
    mean_hit_coverage: float
    compact: bool


def _spans_compact(matches: Sequence[AnchorMatch]) -> bool:
    spans = sorted(m.doc_span for m in matches if m.is_hit and m.doc_span is not None)
    for prev, nxt in zip(spans, spans[1:]):
        if nxt[0] - prev[1] > MAX_COMPACT_GAP:
            return False
    return True


def combine_score(mean_hit_coverage: float, hit_ratio: float, compact: bool) -> float:
    """Weighted confidence from anchor statistics, halved when non-compact.

    Uses the rational form (7*c + 3*h)/10 so that perfect inputs produce
    exactly 1.0 and the non-compact penalty is an exact factor of 0.5.
    """
    score = (7.0 * mean_hit_coverage + 3.0 * hit_ratio) / 10.0
    if not compact:
        score *= 0.5
    return score


def verify_quote_detailed(
    quote: str,
    doc: Union[DocumentText, str],
    *,
    mean_over: str = "hits",
) -> QuoteVerification:
    """Score a quote against a document and keep the per-anchor evidence.

    ``mean_over`` selects whether mean coverage averages hit anchors only
    (the default reading) or all anchors.
    """
    text = doc.normalized if isinstance(doc, DocumentText) else doc
    doc_stream = tokenize(text)
    quote_stream = tokenize(quote)
    anchors = segment_anchors(quote_stream)
    if not anchors or len(doc_stream) == 0:
        return QuoteVerification(
            location=QuoteLocation(found=False, match_score=0.0),
            anchor_matches=(),
            hit_ratio=0.0,
            mean_hit_coverage=0.0,
            compact=True,
        )
    matches = tuple(align_anchor(a, doc_stream) for a in anchors)
    hits = [m for m in matches if m.is_hit]
    hit_ratio = len(hits) / len(matches)
    if mean_over == "all":
        mean_coverage = sum(m.coverage for m in matches) / len(matches)
    else:
        mean_coverage = sum(m.coverage for m in hits) / len(hits) if hits else 0.0
    compact = _spans_compact(matches)
    score = combine_score(mean_coverage, hit_ratio, compact)
    return QuoteVerification(
        location=QuoteLocation(found=score > QUOTE_FOUND_THRESHOLD, match_score=score),
        anchor_matches=matches,
        hit_ratio=hit_ratio,
        mean_hit_coverage=mean_coverage,
        compact=compact,
    )


def verify_quote(
    quote: str, doc: Union[DocumentText, str], *, mean_over: str = "hits"
) -> QuoteLocation:
    """Locate a quote in a document; found iff the confidence exceeds 0.6."""
    return verify_quote_detailed(quote, doc, mean_over=mean_over).location


# --- similarity segments --------------------------------------------------------


@dataclass(frozen=True)
class SimilaritySegment:
    """One reported overlap passage between the target and a candidate."""

    segment_id: int
    location: str
    original_text: str
    candidate_text: str
    segment_type: str  # "Direct" or "Paraphrase"
    rationale: str
    verified: bool = False
    original_location: Optional[QuoteLocation] = None
    candidate_location: Optional[QuoteLocation] = None

    @property
    def min_word_count(self) -> int:
        return min(len(self.original_text.split()), len(self.candidate_text.split()))

    def to_dict(self) -> dict[str, Any]:
        return {
            "segment_id": self.segment_id,
            "location": self.location,
            "original_text": self.original_text,
            "candidate_text": self.candidate_text,
            "type": self.segment_type,
            "rationale": self.rationale,
            "verified": self.verified,
            "original_location": self.original_location.to_dict()
            if self.original_location
            else None,
            "candidate_location": self.candidate_location.to_dict()
            if self.candidate_location
            else None,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SimilaritySegment":
        return cls(
            segment_id=int(d["segment_id"]),
            location=str(d.get("location", "unknown")),
            original_text=str(d["original_text"]),
            candidate_text=str(d["candidate_text"]),
            segment_type=str(d.get("type", "Direct")),
            rationale=str(d.get("rationale", "")),
            verified=bool(d.get("verified", False)),
            original_location=QuoteLocation.from_dict(d["original_location"])
            if d.get("original_location")
            else None,
            candidate_location=QuoteLocation.from_dict(d["candidate_location"])
            if d.get("candidate_location")
            else None,
        )


def verify_segment(
    seg: SimilaritySegment,
    doc_a: Union[DocumentText, str],
    doc_b: Union[DocumentText, str],
) -> SimilaritySegment:
    """A segment is verified when both quotes are found and it spans 30+ words."""
    original_loc = verify_quote(seg.original_text, doc_a)
    candidate_loc = verify_quote(seg.candidate_text, doc_b)
    verified = (
        original_loc.found
        and candidate_loc.found
        and seg.min_word_count >= MIN_SEGMENT_WORDS
    )
    return replace(
        seg,
        verified=verified,
        original_location=original_loc,
        candidate_location=candidate_loc,
    )


def filter_segments(segments: Sequence[SimilaritySegment]) -> list[SimilaritySegment]:
    """Keep at most three verified segments, largest word counts first, stable ties."""
    ordered = sorted(segments, key=lambda s: -s.min_word_count)
    return ordered[:MAX_SEGMENTS_KEPT]
