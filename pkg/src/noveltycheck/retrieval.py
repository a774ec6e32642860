"""Phase II: fault-tolerant query execution and multi-layer candidate filtering.

Retrieval is broad on purpose; the filtering layers here (quality flag,
dedup, self-reference, temporal, Top-K) carry the precision burden. All
filtering is pure: the same results and policy produce the same candidate
set no matter the concurrency setting used to fetch them.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from threading import Lock
from typing import Any, Callable, Mapping, Optional, Sequence

from .clients import SearchClient, SearchHit
from .errors import InvalidInputError, RetrievalEmptyError, SearchError
from .extraction import QuerySet, SearchQuery
from .papers import (
    CanonicalId,
    PaperRecord,
    QualityFlag,
    SCHEME_PRIORITY,
    VerificationVerdict,
    canonical_id_of,
    compute_quality_flag,
    infer_publication_date,
    normalize_title,
    preprocess_document,
)

logger = logging.getLogger(__name__)

DEFAULT_TOPK_CORE = 50
DEFAULT_TOPK_CONTRIBUTION = 10


@dataclass(frozen=True)
class RetryPolicy:
    """Retry and concurrency knobs for query execution."""

    max_query_attempts: int = 8
    initial_delay: float = 5.0
    global_max_retries: int = 180
    concurrency: int = 1

    def __post_init__(self) -> None:
        for name in ("max_query_attempts", "initial_delay", "global_max_retries", "concurrency"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"{name} must be positive")


@dataclass
class RetrievalResult:
    """One retrieved paper attributed to the query that produced it."""

    paper: PaperRecord
    query_id: str
    verdict: VerificationVerdict
    relevance_score: float
    scope: str = "core_task"
    contribution_id: Optional[str] = None


@dataclass
class QueryFailure:
    query_id: str
    attempts: int
    error: str


@dataclass
class RetrievalBatch:
    """Results of executing a query set, with the failure log."""

    results: list[RetrievalResult]
    failures: list[QueryFailure]
    attempts_by_query: dict[str, int]


def _hit_to_result(hit: SearchHit, query: SearchQuery) -> Optional[RetrievalResult]:
    if not hit.title or not hit.title.strip():
        logger.warning("dropping hit without a title from query %s", query.query_id)
        return None
    metadata = dict(hit.identifiers)
    metadata["title"] = hit.title
    canonical = canonical_id_of(metadata)
    verdict = hit.verdict or VerificationVerdict.from_pairs([("topic", "insufficient_information")])
    flag = compute_quality_flag(verdict)
    date = hit.publication_date
    if date is None and hit.url:
        date = infer_publication_date(url=hit.url)
    relevance = min(max(float(hit.relevance_score), 0.0), 1.0)
    full_text = None
    if hit.full_text:
        full_text = preprocess_document(hit.full_text, purpose="comparison")
    paper = PaperRecord(
        canonical_id=canonical,
        title=hit.title,
        abstract=hit.abstract,
        url=hit.url,
        relevance_score=relevance,
        publication_date=date,
        quality_flag=flag,
        full_text=full_text,
    )
    return RetrievalResult(
        paper=paper,
        query_id=query.query_id,
        verdict=verdict,
        relevance_score=relevance,
        scope=query.scope,
        contribution_id=query.contribution_id,
    )


def execute_queries(
    queries: QuerySet | Sequence[SearchQuery],
    search: SearchClient,
    policy: RetryPolicy = RetryPolicy(),
    *,
    sleep: Callable[[float], None] = time.sleep,
) -> RetrievalBatch:
    """Run every query with bounded retries and graceful degradation.

    Each query gets up to ``max_query_attempts`` tries with a backoff of
    ``initial_delay * attempt`` between them. Failed queries are logged and
    skipped; the batch only raises when every query failed.
    """
    query_list = queries.all_queries() if isinstance(queries, QuerySet) else list(queries)
    if not query_list:
        raise InvalidInputError("query set is empty")

    retry_budget = {"remaining": policy.global_max_retries}
    budget_lock = Lock()

    def _consume_retry() -> bool:
        with budget_lock:
            if retry_budget["remaining"] <= 0:
                return False
            retry_budget["remaining"] -= 1
            return True

    def _run(query: SearchQuery) -> tuple[SearchQuery, list[SearchHit] | None, int, str]:
        error = ""
        for attempt in range(1, policy.max_query_attempts + 1):
            if attempt > 1:
                sleep(policy.initial_delay * (attempt - 1))
            try:
                hits = search.search(query.text)
                logger.info(
                    "query %s succeeded on attempt %d with %d hits",
                    query.query_id, attempt, len(hits),
                )
                return query, hits, attempt, ""
            except SearchError as exc:
                error = str(exc)
                logger.warning("query %s attempt %d failed: %s", query.query_id, attempt, exc)
                if attempt < policy.max_query_attempts and not _consume_retry():
                    logger.error("global retry budget exhausted; abandoning %s", query.query_id)
                    return query, None, attempt, error
        return query, None, policy.max_query_attempts, error

    if policy.concurrency > 1:
        with ThreadPoolExecutor(max_workers=policy.concurrency) as pool:
            outcomes = list(pool.map(_run, query_list))
    else:
        outcomes = [_run(q) for q in query_list]

    results: list[RetrievalResult] = []
    failures: list[QueryFailure] = []
    attempts: dict[str, int] = {}
    for query, hits, tries, error in outcomes:
        attempts[query.query_id] = tries
        if hits is None:
            failures.append(QueryFailure(query.query_id, tries, error))
            continue
        for hit in hits:
            result = _hit_to_result(hit, query)
            if result is not None:
                results.append(result)
    if not results and len(failures) == len(query_list):
        raise RetrievalEmptyError()
    return RetrievalBatch(results=results, failures=failures, attempts_by_query=attempts)


# --- filtering -----------------------------------------------------------------


@dataclass
class FilterStats:
    raw: int = 0
    after_quality: int = 0
    after_dedup: int = 0
    after_self_reference: int = 0
    after_temporal: int = 0
    selected: int = 0

    def to_dict(self) -> dict[str, int]:
        return {
            "raw": self.raw,
            "after_quality": self.after_quality,
            "after_dedup": self.after_dedup,
            "after_self_reference": self.after_self_reference,
            "after_temporal": self.after_temporal,
            "selected": self.selected,
        }


@dataclass
class FilterOutcome:
    selected: list[PaperRecord]
    stats: FilterStats
    diagnostics: list[str] = field(default_factory=list)


def _is_self_reference(paper: PaperRecord, target: PaperRecord) -> bool:
    if paper.canonical_id == target.canonical_id:
        return True
    if paper.url and target.url and paper.url == target.url:
        return True
    return normalize_title(paper.title) == normalize_title(target.title)


def filter_scope(
    results: Sequence[RetrievalResult],
    scope: str,
    k: int,
    target: PaperRecord,
) -> FilterOutcome:
    """Apply the per-scope filtering layers in their fixed order.

    (1) keep only perfect quality flags, (2) dedup by canonical id keeping
    the highest-relevance instance, (3) drop self-references to the target,
    (4) drop candidates dated strictly after the target (unknown dates
    pass), (5) rank by relevance and keep the top ``k``.
    """
    stats = FilterStats(raw=len(results))
    diagnostics: list[str] = []

    perfect: list[RetrievalResult] = []
    for r in results:
        if r.paper.quality_flag is QualityFlag.PERFECT:
            perfect.append(r)
        elif r.paper.quality_flag is QualityFlag.PARTIAL:
            diagnostics.append(f"partial flag, not ranked: {r.paper.canonical_id}")
    stats.after_quality = len(perfect)

    best: dict[str, RetrievalResult] = {}
    order: list[str] = []
    for r in perfect:
        key = str(r.paper.canonical_id)
        if key not in best:
            best[key] = r
            order.append(key)
        elif r.relevance_score > best[key].relevance_score:
            best[key] = r
    deduped = [best[key].paper for key in order]
    stats.after_dedup = len(deduped)

    no_self = [p for p in deduped if not _is_self_reference(p, target)]
    stats.after_self_reference = len(no_self)

    in_time = []
    for p in no_self:
        if (
            p.publication_date is not None
            and target.publication_date is not None
            and p.publication_date.definitely_after(target.publication_date)
        ):
            diagnostics.append(f"temporal filter dropped {p.canonical_id}")
            continue
        in_time.append(p)
    stats.after_temporal = len(in_time)

    # equal relevance breaks ties on canonical id for determinism
    ranked = sorted(
        in_time, key=lambda p: (-(p.relevance_score or 0.0), str(p.canonical_id))
    )
    selected = ranked[:k]
    stats.selected = len(selected)
    logger.info(
        "scope %s filtered %d -> %d -> %d -> %d",
        scope, stats.raw, stats.after_quality, stats.after_dedup, stats.selected,
    )
    return FilterOutcome(selected=selected, stats=stats, diagnostics=diagnostics)


@dataclass
class UnifiedCandidate:
    paper: PaperRecord
    provenance: list[str]

    def to_dict(self) -> dict[str, Any]:
        return {"paper": self.paper.to_dict(), "provenance": list(self.provenance)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "UnifiedCandidate":
        return cls(paper=PaperRecord.from_dict(d["paper"]), provenance=list(d["provenance"]))


@dataclass
class CandidateSet:
    """Per-scope Top-K lists plus the deduplicated unified candidate pool."""

    core_task: list[PaperRecord]
    per_contribution: dict[str, list[PaperRecord]]
    unified: list[UnifiedCandidate]
    stats: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "core_task": [p.to_dict() for p in self.core_task],
            "per_contribution": {
                cid: [p.to_dict() for p in papers]
                for cid, papers in self.per_contribution.items()
            },
            "unified": [u.to_dict() for u in self.unified],
            "stats": self.stats,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CandidateSet":
        return cls(
            core_task=[PaperRecord.from_dict(p) for p in d["core_task"]],
            per_contribution={
                cid: [PaperRecord.from_dict(p) for p in papers]
                for cid, papers in d["per_contribution"].items()
            },
            unified=[UnifiedCandidate.from_dict(u) for u in d["unified"]],
            stats=dict(d.get("stats", {})),
        )


def _better_id(a: CanonicalId, b: CanonicalId) -> CanonicalId:
    return a if SCHEME_PRIORITY[a.scheme] <= SCHEME_PRIORITY[b.scheme] else b


def cross_scope_dedup(
    core: Sequence[PaperRecord],
    per_contribution: Mapping[str, Sequence[PaperRecord]],
) -> CandidateSet:
    """Merge the per-scope Top-K lists into one deduplicated candidate pool.

    Two records are the same work when their canonical ids match or their
    normalized titles hash identically. On a collision the core-task
    instance wins and its identity is upgraded to the higher-priority
    identifier scheme seen on either side. Per-scope lists are preserved
    untouched for downstream use.
    """
    unified: list[UnifiedCandidate] = []
    index: dict[str, int] = {}

    def _keys(paper: PaperRecord) -> list[str]:
        return [str(paper.canonical_id), f"title:{paper.title_hash()}"]

    def _insert(paper: PaperRecord, provenance: str) -> None:
        hit = None
        for key in _keys(paper):
            if key in index:
                hit = index[key]
                break
        if hit is None:
            pos = len(unified)
            unified.append(UnifiedCandidate(paper=paper, provenance=[provenance]))
            for key in _keys(paper):
                index[key] = pos
            return
        existing = unified[hit]
        if provenance not in existing.provenance:
            existing.provenance.append(provenance)
        upgraded = _better_id(existing.paper.canonical_id, paper.canonical_id)
        if upgraded != existing.paper.canonical_id:
            existing.paper.canonical_id = upgraded
        if existing.paper.url is None and paper.url is not None:
            existing.paper.url = paper.url
        if existing.paper.publication_date is None and paper.publication_date is not None:
            existing.paper.publication_date = paper.publication_date
        if existing.paper.full_text is None and paper.full_text is not None:
            existing.paper.full_text = paper.full_text
        for key in _keys(paper):
            index.setdefault(key, hit)

    for paper in core:
        _insert(paper, "core_task")
    for cid, papers in per_contribution.items():
        for paper in papers:
            _insert(paper, f"contribution:{cid}")

    combined = len(core) + sum(len(p) for p in per_contribution.values())
    removed = combined - len(unified)
    pct = round(100.0 * removed / combined, 1) if combined else 0.0
    stats = {
        "combined": combined,
        "unified": len(unified),
        "cross_scope_removed": removed,
        "cross_scope_removed_pct": pct,
    }
    return CandidateSet(
        core_task=list(core),
        per_contribution={cid: list(papers) for cid, papers in per_contribution.items()},
        unified=unified,
        stats=stats,
    )


@dataclass
class Phase2Result:
    candidate_set: CandidateSet
    core_stats: FilterStats
    contribution_stats: dict[str, FilterStats]
    failures: list[QueryFailure]
    diagnostics: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "candidate_set": self.candidate_set.to_dict(),
            "core_stats": self.core_stats.to_dict(),
            "contribution_stats": {
                cid: s.to_dict() for cid, s in self.contribution_stats.items()
            },
            "failures": [
                {"query_id": f.query_id, "attempts": f.attempts, "error": f.error}
                for f in self.failures
            ],
            "diagnostics": list(self.diagnostics),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Phase2Result":
        def _stats(sd: Mapping[str, int]) -> FilterStats:
            return FilterStats(**sd)

        return cls(
            candidate_set=CandidateSet.from_dict(d["candidate_set"]),
            core_stats=_stats(d["core_stats"]),
            contribution_stats={
                cid: _stats(sd) for cid, sd in d["contribution_stats"].items()
            },
            failures=[
                QueryFailure(f["query_id"], f["attempts"], f["error"])
                for f in d.get("failures", [])
            ],
            diagnostics=list(d.get("diagnostics", ())),
        )


def summarize_filtering(result: Phase2Result) -> dict[str, Any]:
    """Run-level reduction statistics across both scopes."""
    raw_total = result.core_stats.raw + sum(
        s.raw for s in result.contribution_stats.values()
    )
    unified = result.candidate_set.stats.get("unified", len(result.candidate_set.unified))
    overall_pct = round(100.0 * (raw_total - unified) / raw_total, 1) if raw_total else 0.0
    return {
        "raw_total": raw_total,
        "unified": unified,
        "overall_filtered_pct": overall_pct,
        "cross_scope_removed_pct": result.candidate_set.stats.get("cross_scope_removed_pct", 0.0),
    }


def run_retrieval_phase(
    query_set: QuerySet,
    search: SearchClient,
    policy: RetryPolicy,
    target: PaperRecord,
    *,
    topk_core: int = DEFAULT_TOPK_CORE,
    topk_contribution: int = DEFAULT_TOPK_CONTRIBUTION,
    sleep: Callable[[float], None] = time.sleep,
) -> Phase2Result:
    """Execute the query set and run the full filtering pipeline."""
    batch = execute_queries(query_set, search, policy, sleep=sleep)
    core_results = [r for r in batch.results if r.scope == "core_task"]
    core_outcome = filter_scope(core_results, "core_task", topk_core, target)

    per_contribution: dict[str, list[PaperRecord]] = {}
    contribution_stats: dict[str, FilterStats] = {}
    diagnostics = list(core_outcome.diagnostics)
    for cid in query_set.contribution_queries:
        scoped = [r for r in batch.results if r.contribution_id == cid]
        outcome = filter_scope(scoped, cid, topk_contribution, target)
        per_contribution[cid] = outcome.selected
        contribution_stats[cid] = outcome.stats
        diagnostics.extend(outcome.diagnostics)

    candidate_set = cross_scope_dedup(core_outcome.selected, per_contribution)
    result = Phase2Result(
        candidate_set=candidate_set,
        core_stats=core_outcome.stats,
        contribution_stats=contribution_stats,
        failures=batch.failures,
        diagnostics=diagnostics,
    )
    candidate_set.stats.update(summarize_filtering(result))
    return result
