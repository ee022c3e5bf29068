"""Attention-based multi-input network for bioactivity classification from SMILES."""

__version__ = "0.1.0"
