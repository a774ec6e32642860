"""Evidence-grounded novelty analysis pipeline for research papers."""

__version__ = "0.1.0"
