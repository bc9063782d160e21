"""Training losses: Frobenius (saliency concentration), norm preservation,
and the margin contrastive term, plus their weighted sum.

All reductions over a batch are arithmetic means, including the final
partial batch. "Direction" of a feature vector means its unit-normalized
form; distances between unit vectors stand in for angular separation.
"""

from dataclasses import dataclass

import torch

from .common import DegenerateEmbeddingError, NonFiniteLossError


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1e-5  # Frobenius weight
    beta: float = 1e-3  # norm weight
    mu: float = 0.5  # contrastive margin

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.mu <= 0:
            raise ValueError("mu must be > 0")


@dataclass(frozen=True)
class LossBreakdown:
    frobenius: float
    norm: float
    contrastive: float
    total: float

    def __post_init__(self):
        for name in ("frobenius", "norm", "contrastive", "total"):
            value = getattr(self, name)
            if not torch.isfinite(torch.as_tensor(value)):
                raise NonFiniteLossError(name, value)


def frobenius_loss(m_scaled: torch.Tensor) -> torch.Tensor:
    """Mean per-sample Frobenius norm of the scaled saliency maps."""
    if m_scaled.min() < 0 or m_scaled.max() > 1:
        raise ValueError("scaled saliency entries must lie in [0,1]")
    per_sample = m_scaled.reshape(m_scaled.shape[0], -1).pow(2).sum(dim=1).sqrt()
    return per_sample.mean()


def norm_loss(z: torch.Tensor, z_prime: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference between per-sample l2 feature norms."""
    if z.shape != z_prime.shape:
        raise ValueError("feature shapes differ")
    return (z.norm(dim=-1) - z_prime.norm(dim=-1)).abs().mean()


def direction(v: torch.Tensor) -> torch.Tensor:
    """Unit-direction of a vector (or of each row of a matrix)."""
    norms = v.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise DegenerateEmbeddingError("degenerate feature: zero vector")
    return v / norms


def contrastive_loss(
    z: torch.Tensor, z_prime: torch.Tensor, rho_min: torch.Tensor, mu: float
) -> torch.Tensor:
    """Pull the perturbed feature's direction onto the least-similar text
    embedding while pushing it at least ``mu`` away from the raw feature's
    direction (hinge on unit-vector distance)."""
    d_z = direction(z)
    d_zp = direction(z_prime)
    d_rho = direction(rho_min)
    attract = (d_zp - d_rho).norm(dim=-1)
    repel = torch.clamp(mu - (d_zp - d_z).norm(dim=-1), min=0.0)
    return (attract + repel).mean()


def total_loss(frobenius, norm, contrastive, weights: LossWeights):
    """Weighted sum alpha*frobenius + beta*norm + contrastive.

    Accepts tensors (for training) or floats. Returns (total, LossBreakdown);
    a non-finite part raises NonFiniteLossError naming the offending term.
    """
    parts = {"frobenius": frobenius, "norm": norm, "contrastive": contrastive}
    for name, part in parts.items():
        if not torch.isfinite(torch.as_tensor(part)).all():
            raise NonFiniteLossError(name, float(part))
    total = weights.alpha * frobenius + weights.beta * norm + contrastive
    breakdown = LossBreakdown(
        frobenius=float(frobenius),
        norm=float(norm),
        contrastive=float(contrastive),
        total=float(total),
    )
    return total, breakdown
