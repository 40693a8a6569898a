"""Driver situation-awareness prediction toolkit.

Multimodal signal ingestion, 30 s window feature extraction, leaf-wise
gradient-boosted regression, exact Shapley attribution and cross-validated
evaluation, plus a deterministic synthetic experiment generator.
"""

__version__ = "0.1.0"
