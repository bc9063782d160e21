"""clipstrike: saliency-gated generative adversarial perturbations.

Trains a perturbation generator guided by contrastive image-text embeddings
and evaluates attack success (Hamming score, fooling rate) and visual
fidelity (SSIM) against white-box and black-box victim classifiers.
"""

__version__ = "0.1.0"
