"""Corpus ingestion, preprocessing and the procedural shapes corpus."""

from .images import ImageReadError, preprocess_image, read_image, write_image
from .manifest import (
    OBJECT_TEMPLATE,
    TEXT_ONLY,
    VISION_TEMPLATES,
    DatasetManifest,
    ManifestError,
    MixtureSpec,
    PairRecord,
    PromptTemplate,
    apply_prompt,
    load_manifest,
    sample_batch,
)

__all__ = [
    "DatasetManifest",
    "ImageReadError",
    "ManifestError",
    "MixtureSpec",
    "OBJECT_TEMPLATE",
    "PairRecord",
    "PromptTemplate",
    "TEXT_ONLY",
    "VISION_TEMPLATES",
    "apply_prompt",
    "load_manifest",
    "preprocess_image",
    "read_image",
    "sample_batch",
    "write_image",
]
