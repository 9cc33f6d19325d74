"""Dental arch analysis from intraoral scan meshes.

Pipeline: STL ingestion, rotational parabola fit of the arch, arc-length
flattening, multi-view software rendering, knowledge-constrained structured
inference through a pluggable vision-language backend, and evaluation.
"""
from __future__ import annotations

__version__ = "0.1.0"
