"""Cross-lingual fact verification with consistency-regularized translate-train."""

__version__ = "0.1.0"
