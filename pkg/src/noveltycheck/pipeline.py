"""End-to-end pipeline driver with per-phase artifacts and resumability.

Each phase persists its output as a standalone JSON document before the
next phase starts, so a failed run can resume from the last good artifact
and every phase can be developed and inspected in isolation.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Mapping, Optional

from . import __version__
from .analysis import NoveltyReport, run_analysis_phase
from .clients import (
    HttpLlmClient,
    HttpSearchClient,
    LlmClient,
    MockLlmClient,
    MockSearchClient,
    SearchClient,
)
from .errors import InvalidInputError, NoveltyCheckError, PhaseAbortError
from .extraction import Phase1Result, Temperatures, run_extraction_phase
from .papers import (
    PaperRecord,
    canonical_id_of,
    infer_publication_date,
    preprocess_document,
)
from .render import RenderConfig, output_filename, render_markdown, render_pdf
from .retrieval import (
    DEFAULT_TOPK_CONTRIBUTION,
    DEFAULT_TOPK_CORE,
    Phase2Result,
    RetryPolicy,
    run_retrieval_phase,
)

logger = logging.getLogger(__name__)

PHASES = ("phase1", "phase2", "phase3", "phase4")


@dataclass
class PipelineConfig:
    """Everything a run needs: clients, knobs, and output location."""

    output_dir: Path
    mock: bool = False
    llm_fixture: Optional[Path] = None
    search_fixture: Optional[Path] = None
    llm_endpoint: Optional[str] = None
    llm_model: str = "default"
    llm_api_key: Optional[str] = None
    search_endpoint: Optional[str] = None
    search_api_key: Optional[str] = None
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    topk_core: int = DEFAULT_TOPK_CORE
    topk_contribution: int = DEFAULT_TOPK_CONTRIBUTION
    temperatures: Temperatures = field(default_factory=Temperatures)
    analysis_concurrency: int = 1
    resume: bool = False
    fixed_timestamp: Optional[str] = None
    target_title: Optional[str] = None
    target_url: Optional[str] = None
    target_abstract: Optional[str] = None
    emit_pdf: bool = False
    quote_truncation_limit: int = 90
    sleep: Callable[[float], None] = time.sleep

    def validate(self) -> None:
        if self.mock:
            if not self.llm_fixture or not self.search_fixture:
                raise InvalidInputError("mock mode requires fixture paths for both clients")
        else:
            if not self.llm_endpoint or not self.search_endpoint:
                raise InvalidInputError("non-mock mode requires llm and search endpoints")


def build_clients(cfg: PipelineConfig) -> tuple[LlmClient, SearchClient]:
    cfg.validate()
    if cfg.mock:
        return (
            MockLlmClient.from_file(cfg.llm_fixture),
            MockSearchClient.from_file(cfg.search_fixture),
        )
    return (
        HttpLlmClient(cfg.llm_endpoint, cfg.llm_model, cfg.llm_api_key),
        HttpSearchClient(cfg.search_endpoint, cfg.search_api_key),
    )


@dataclass
class PhaseStatus:
    status: str = "pending"  # pending, completed, skipped, failed
    artifact: Optional[str] = None
    started_at: Optional[str] = None
    finished_at: Optional[str] = None
    error: Optional[str] = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "status": self.status,
            "artifact": self.artifact,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "error": self.error,
        }


@dataclass
class RunManifest:
    """Per-phase status, artifact paths, and the failure log for one run."""

    phases: dict[str, PhaseStatus] = field(
        default_factory=lambda: {name: PhaseStatus() for name in PHASES}
    )
    failure_log: list[str] = field(default_factory=list)

    @property
    def succeeded(self) -> bool:
        return all(
            self.phases[name].status in ("completed", "skipped") for name in PHASES
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "phases": {name: status.to_dict() for name, status in self.phases.items()},
            "failure_log": list(self.failure_log),
            "succeeded": self.succeeded,
        }


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path: Path, payload: Mapping[str, Any]) -> None:
    path.write_text(
        json.dumps(payload, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def _read_json(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


# --- front matter ------------------------------------------------------------------


def parse_front_matter(paper_text: str) -> tuple[str, str]:
    """Best-effort title and abstract from plain text: first line, abstract section."""
    lines = paper_text.splitlines()
    title = ""
    for line in lines:
        stripped = line.strip().lstrip("#").strip()
        if stripped:
            title = stripped
            break
    abstract_lines: list[str] = []
    collecting = False
    for line in lines:
        core = line.strip().lstrip("#").strip().rstrip(":.").lower()
        if not collecting and core == "abstract":
            collecting = True
            continue
        if collecting:
            stripped = line.strip()
            if stripped.startswith("#") or (abstract_lines and not stripped):
                break
            if stripped:
                abstract_lines.append(stripped)
    return title, " ".join(abstract_lines)


def build_target_record(paper_text: str, cfg: PipelineConfig, llm: LlmClient) -> PaperRecord:
    title, abstract = parse_front_matter(paper_text)
    title = cfg.target_title or title or "Untitled target paper"
    abstract = cfg.target_abstract or abstract
    date = infer_publication_date(
        url=cfg.target_url, front_matter=paper_text[:4000], llm=llm
    )
    return PaperRecord(
        canonical_id=canonical_id_of({"title": title}),
        title=title,
        abstract=abstract,
        url=cfg.target_url,
        publication_date=date,
    )


# --- pipeline ----------------------------------------------------------------------


class _PhaseRunner:
    def __init__(self, manifest: RunManifest, manifest_path: Path, resumable: bool) -> None:
        self.manifest = manifest
        self.manifest_path = manifest_path
        self._resumable = resumable

    def persist(self) -> None:
        _write_json(self.manifest_path, self.manifest.to_dict())

    def run(self, name: str, artifact: Path, compute: Callable[[], Any], *, load: Callable[[], Any]):
        """Execute one phase, honoring resume and recording status transitions."""
        status = self.manifest.phases[name]
        if status.status == "failed":
            raise PhaseAbortError(name, "phase already failed")
        if artifact.exists() and status.status == "pending" and self._resumable:
            logger.info("%s: reusing existing artifact %s", name, artifact.name)
            status.status = "skipped"
            status.artifact = artifact.name
            self.persist()
            return load()
        status.started_at = _now()
        self.persist()
        try:
            result = compute()
        except Exception as exc:
            status.status = "failed"
            status.finished_at = _now()
            status.error = str(exc)
            self.manifest.failure_log.append(f"{name}: {exc}")
            self.persist()
            raise
        status.status = "completed"
        status.finished_at = _now()
        status.artifact = artifact.name
        self.persist()
        return result


def run_pipeline(paper_text: str, cfg: PipelineConfig) -> RunManifest:
    """Execute Phases I-IV, persisting one artifact per phase.

    On a phase failure the manifest records the error and the run stops
    cleanly; with ``resume`` enabled a later invocation picks up after the
    last persisted artifact.
    """
    if not paper_text or not paper_text.strip():
        raise InvalidInputError("paper text must be non-empty")
    cfg.validate()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    llm, search = build_clients(cfg)
    manifest = RunManifest()
    runner = _PhaseRunner(manifest, out / "manifest.json", resumable=cfg.resume)
    generated_at = cfg.fixed_timestamp or _now()

    phase1_path = out / "phase1.json"
    phase2_path = out / "phase2.json"
    phase3_path = out / "phase3.json"

    target = build_target_record(paper_text, cfg, llm)

    def _phase1() -> Phase1Result:
        doc = preprocess_document(paper_text, purpose="extraction")
        result = run_extraction_phase(
            doc,
            llm,
            title=target.title,
            abstract=target.abstract,
            temperatures=cfg.temperatures,
        )
        _write_json(phase1_path, {"target": target.to_dict(), "result": result.to_dict()})
        return result

    def _load_phase1() -> Phase1Result:
        return Phase1Result.from_dict(_read_json(phase1_path)["result"])

    def _phase2(phase1: Phase1Result) -> Phase2Result:
        result = run_retrieval_phase(
            phase1.query_set,
            search,
            cfg.retry,
            target,
            topk_core=cfg.topk_core,
            topk_contribution=cfg.topk_contribution,
            sleep=cfg.sleep,
        )
        _write_json(phase2_path, result.to_dict())
        return result

    def _load_phase2() -> Phase2Result:
        return Phase2Result.from_dict(_read_json(phase2_path))

    def _phase3(phase1: Phase1Result, phase2: Phase2Result) -> NoveltyReport:
        target_doc = preprocess_document(paper_text, purpose="comparison")
        report = run_analysis_phase(
            phase1,
            phase2.candidate_set,
            target,
            target_doc,
            llm,
            concurrency=cfg.analysis_concurrency,
            generated_at=generated_at,
            pipeline_version=__version__,
            artifact_filenames={
                "phase1": phase1_path.name,
                "phase2": phase2_path.name,
                "phase3": phase3_path.name,
            },
        )
        _write_json(phase3_path, report.to_dict())
        return report

    def _load_phase3() -> NoveltyReport:
        return NoveltyReport.from_dict(_read_json(phase3_path))

    def _phase4(report: NoveltyReport) -> Path:
        render_cfg = RenderConfig(
            quote_truncation_limit=cfg.quote_truncation_limit,
            emit_pdf=cfg.emit_pdf,
            output_dir=out,
        )
        markdown = render_markdown(report, render_cfg)
        md_path = out / output_filename(report)
        md_path.write_text(markdown, encoding="utf-8")
        if cfg.emit_pdf:
            render_pdf(md_path, render_cfg)
        return md_path

    try:
        phase1 = runner.run("phase1", phase1_path, _phase1, load=_load_phase1)
        phase2 = runner.run("phase2", phase2_path, lambda: _phase2(phase1), load=_load_phase2)
        report = runner.run(
            "phase3", phase3_path, lambda: _phase3(phase1, phase2), load=_load_phase3
        )
        md_path = out / output_filename(report)
        runner.run("phase4", md_path, lambda: _phase4(report), load=lambda: md_path)
    except NoveltyCheckError as exc:
        logger.error("pipeline stopped: %s", exc)
    return manifest
