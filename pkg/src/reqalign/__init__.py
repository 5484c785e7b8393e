"""Requirement-alignment loop for LLM code generation.

Aligns a model's reading of a natural-language programming requirement before
and between generation attempts: checklist probing with reference answers,
sandboxed public-test gating, masked-span recovery verification, and bounded
iteration — plus a benchmark harness reporting pass@k, time, and token
overhead.
"""
from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def demo_dataset_path() -> Path:
    """Bundled three-problem fixture dataset (JSON lines, CUSTOM schema)."""
    return Path(str(resources.files("reqalign.data").joinpath("demo/problems.jsonl")))


def demo_script_path() -> Path:
    """Scripted-mock responses that drive the bundled fixture deterministically."""
    return Path(str(resources.files("reqalign.data").joinpath("demo/mock_script.json")))
