"""mattekit: self-supervised compositing-inversion pretraining for image matting.

Synthesizes (trimap, pseudo-alpha, composite) training triples from unlabeled
images, trains a small encoder-decoder to invert the compositing equation,
fine-tunes on labeled mattes, and scores predictions with the standard
sum-of-absolute-differences / MSE / gradient / connectivity metrics.
"""

__version__ = "0.1.0"
