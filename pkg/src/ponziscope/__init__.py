"""Forensics toolkit for Bitcoin-based Ponzi schemes.

Reconstructs and quantifies a scheme's operation from transaction records:
transaction typing and cleaning, lifecycle segmentation, income-inequality
and zero-sum metrics, victim/scammer classification, external-service flow
shares, geopolitical money-flow graphs, and a deterministic synthetic-scheme
generator that provides ground truth for every stage.
"""

__version__ = "0.1.0"
