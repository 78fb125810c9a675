"""xmodal package: audio-visual instance discrimination with cross-modal agreement, on synthetic data.

This package provides:
- synthdata: a seeded two-modality dataset with single-modality confound pairs
- numerics, encoder: a small reverse-mode autodiff tape, Adam, and MLP encoders
- membank, avid_loss: the EMA memory bank and the Self/Cross/Joint NCE objectives
- cma: agreement-set mining, precision@K and the wMPD refinement loss
- trainer: the two-phase training loop with bit-exact checkpoints
- eval, plotter: linear probes, collapse diagnostics and figures
- cli: the ``python -m xmodal`` command line
"""

__version__ = "0.1.0"
