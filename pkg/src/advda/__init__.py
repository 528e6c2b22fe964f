"""Adversarial domain adaptation for speaker embeddings.

Wasserstein-critic adaptation of a TDNN embedding extractor, a Gaussian
PLDA verification backend with unsupervised covariance adaptation, and
the detection metrics to evaluate them, all verified at desk scale on a
synthetic multi-domain corpus.
"""

__version__ = "0.1.0"
