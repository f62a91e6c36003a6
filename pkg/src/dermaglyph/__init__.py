"""Fingerprint-based syndrome classification pipeline.

Library and CLI covering Gabor ridge enhancement, proxy quality gating,
participant-level splits, a small vision-transformer classifier with
5-fold logit-averaged ensembling, ROC/metric evaluation, class-token
attention heatmaps, and a synthetic cohort generator for desk-scale
experiments.
"""

__version__ = "0.1.0"
