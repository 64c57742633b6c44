"""Offline embedding export to the FIGE binary store format."""

from .encoders import ImageEncoder, TextEncoder, get_encoder
from .exporter import (DimDriftError, ExportManifest, export_embeddings,
                       export_empty_text)
from .fige import write_fige

__all__ = [
    "DimDriftError", "ExportManifest", "ImageEncoder", "TextEncoder",
    "export_embeddings", "export_empty_text", "get_encoder", "write_fige",
]
