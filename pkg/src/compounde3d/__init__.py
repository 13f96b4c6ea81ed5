"""Knowledge graph embeddings with compound 3D affine relation operators."""

__version__ = "0.1.0"
