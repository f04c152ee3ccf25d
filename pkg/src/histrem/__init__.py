"""Segment-level histologic remission/activity classification pipeline.

Dataset hierarchy is patient -> intestinal segment -> endocytoscopy image.
Segments carry Geboes grades; grades below 3.2 are remission (the negative
class), everything else is activity (the positive class). The package covers
synthetic data generation, preprocessing, class-imbalance resampling, a small
model zoo, deterministic training, majority-vote aggregation, and ROC/AUC
evaluation, plus a grid runner for backbone/size/resampling ablations.
"""

__version__ = "0.1.0"
