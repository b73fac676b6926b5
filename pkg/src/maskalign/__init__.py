"""Weakly-supervised dense video captioning with complementary differentiable masks.

A small numpy-only reimplementation: a tape-based autodiff engine, a
prefix-visual-token captioner, an event-query localizer that predicts
Gaussian temporal masks, a synthetic weakly-labeled video corpus, and the
dense-captioning evaluation metrics.
"""

__version__ = "0.1.0"
