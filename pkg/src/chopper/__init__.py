"""Trace characterization for distributed LLM training on GPUs.

The pipeline runs ingest -> align -> metrics -> breakdown -> report; see
:func:`chopper.pipeline.analyze` for the one-call entry point.
"""

from .ingest import SCHEMA_VERSIONS, emit_canonical, load_canonical
from .model import HardwareSpec, KernelRecord, KernelTable, TraceStore, WorkloadSpec, validate_store

__version__ = "0.1.0"

__all__ = [
    "SCHEMA_VERSIONS", "emit_canonical", "load_canonical", "HardwareSpec", "KernelRecord",
    "KernelTable", "TraceStore", "WorkloadSpec", "validate_store", "__version__",
]
