"""Produce per-token embedding datasets from real text corpora by running a
pretrained contextual encoder and dumping one hidden layer's vectors."""

__version__ = "0.1.0"

from .exporter import ExportError, ExportSpec, ExportStats, export

__all__ = ["ExportError", "ExportSpec", "ExportStats", "export"]
