"""Privacy-audit toolkit for embedding-only face recognition models.

Two attack stages against a backbone that exposes embeddings but no
classification layer: a membership classifier over distances between
activations and BN running statistics, and a generator-guided inversion
that optimizes latents to maximize that classifier's output.
"""

__version__ = "0.1.0"
