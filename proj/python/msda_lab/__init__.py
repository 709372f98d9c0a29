"""Multimodal multi-source domain adaptation lab."""

from ._core import (
    Subject,
    estimate_entropy,
    generate_benchmark,
    mmd2,
    read_dataset,
    run_command,
)

__all__ = [
    "Subject",
    "estimate_entropy",
    "generate_benchmark",
    "mmd2",
    "read_dataset",
    "run_command",
]
