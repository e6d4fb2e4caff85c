"""Desk-scale selective rationalization toolkit.

Trains selector-predictor rationalizers (unsupervised, supervised,
semi-supervised), discovers shortcut token spans, neutralizes them with
two dedicated training strategies, and augments scarce labeled data by
replacing shortcut tokens with random or retrieval-selected substitutes.
Ships a synthetic shortcut-planted corpus generator and an OOD split so
every claim is checkable on one CPU core.
"""

__version__ = "0.1.0"
