"""Trainable composed-image-retrieval engine over precomputed embeddings.

Subpackages cover binary embedding stores, a small reverse-mode autodiff
core, the variance-guided fusion model, contrastive/triplet losses, an
AdamW training loop, brute-force cosine search, retrieval metrics, and
distribution diagnostics.
"""

__version__ = "0.1.0"

EMPTY_TEXT_ID = "__EMPTY__"
