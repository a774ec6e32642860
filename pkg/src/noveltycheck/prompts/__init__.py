"""Prompt text assets fed verbatim to the model client."""

from functools import lru_cache
from importlib import resources

_NAMES = frozenset(
    {
        "core_task",
        "contribution_extraction",
        "primary_query",
        "query_variants",
        "taxonomy_construction",
        "taxonomy_repair",
        "narrative_synthesis",
        "one_liner",
        "similarity_detection",
        "claim_comparison",
        "overall_assessment",
        "sibling_distinction",
        "subtopic_comparison",
    }
)


@lru_cache(maxsize=None)
def load_prompt(name: str) -> str:
    """Load a prompt asset by short name."""
    if name not in _NAMES:
        raise KeyError(f"unknown prompt asset: {name}")
    return resources.files(__package__).joinpath(f"{name}.txt").read_text(encoding="utf-8")
