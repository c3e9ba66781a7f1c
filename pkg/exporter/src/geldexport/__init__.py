"""Frozen-model embedding exporter producing GELD datasets."""

__version__ = "0.1.0"

from .export import ExportJob, export, text_semantic_job  # noqa: F401
from .format import verify_geld, write_geld  # noqa: F401
