"""Source-free active learning engine for volumetric segmentation.

Scores unlabeled samples (knowledge divergence + segmentation difficulty),
selects annotation batches and reliable pseudo-label sets, and orchestrates
the full iterative adaptation loop, verified end-to-end on a bundled
synthetic benchmark with a tiny native trainer.
"""

__version__ = "0.1.0"
