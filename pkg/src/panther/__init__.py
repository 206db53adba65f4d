"""Generative pretraining over structured behavioral event sequences.

Two-stage stack: an autoregressive transformer with a sequence-pattern
branch and contrastive profile embeddings is pretrained on tokenized
event streams; downstream consumers score behavior deviations, aggregate
merchant risk, and serve cached embeddings for low-latency fraud scoring.
"""

__version__ = "0.1.0"
