"""Multimodal entailment toolkit.

Text-pair matching with a GRU/interaction-matrix trunk, five-way fused
image+text classification, engineered-feature decision-tree ensembles,
corpus statistics with hypothesis-only bias probes, and a calibrated
synthetic pair generator for end-to-end testing.
"""

__version__ = "0.1.0"
