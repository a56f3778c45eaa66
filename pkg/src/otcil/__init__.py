"""otcil: class-incremental learning on frozen vision-language embeddings.

The engine consumes precomputed token embeddings (a bundle directory of
float32 blobs plus a JSON manifest), learns additive per-session feature
projectors with Gaussian pseudo-feature replay, and classifies by fusing
a global [CLS]-to-text head with a local patch-to-attribute head aligned
by entropy-regularized optimal transport.
"""

__version__ = "0.1.0"
