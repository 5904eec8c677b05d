"""Desk-scale temporal action localization, end to end.

A small float64 tensor core with reverse-mode differentiation, a dual-branch
attention encoder-decoder over per-video feature sequences, set-based
matching losses, mAP evaluation, synthetic data, and a training loop, all
behind one CLI.
"""

__version__ = "0.1.0"
