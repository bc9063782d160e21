"""Perturbation generator: shared encoder, perturbation and saliency decoders.

The encoder runs a 7x7 convolution, two stride-2 3x3 convolutions, and a
stack of residual blocks. The perturbation decoder mirrors it with two
stride-2 3x3 transposed convolutions and a 7x7 transposed convolution down
to 3 channels; the saliency decoder is identical except for a 1-channel
final layer. Perturbations are bounded into [-eps, +eps] with eps*tanh so
gradients keep flowing at the bound; a hard clamp remains as a safety net.
"""

from dataclasses import dataclass

import torch
from torch import nn

from .common import project_linf_exact
from .clip_guidance import seeded_init


@dataclass
class GeneratorConfig:
    epsilon: float = 0.2
    base_channels: int = 64
    resblocks: int = 6
    saliency_gating: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.resblocks < 1:
            raise ValueError("resblocks must be >= 1")


@dataclass
class GeneratorOutput:
    """delta: Nx3xHxW in [-epsilon, epsilon]; saliency: Nx1xHxW, unconstrained."""

    delta: torch.Tensor
    saliency: torch.Tensor
    epsilon: float

    def __post_init__(self):
        if self.delta.shape[0] != self.saliency.shape[0]:
            raise ValueError("delta and saliency batch sizes differ")
        if self.delta.shape[-2:] != self.saliency.shape[-2:]:
            raise ValueError("delta and saliency spatial sizes differ")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x):
        return x + self.body(x)


def _decoder(channels: int, out_channels: int) -> nn.Sequential:
    # mirrors the encoder: two stride-2 3x3 deconvs, then a 7x7 deconv head
    return nn.Sequential(
        nn.ConvTranspose2d(channels, channels // 2, 3, stride=2, padding=1, output_padding=1),
        nn.InstanceNorm2d(channels // 2, affine=True),
        nn.ReLU(inplace=True),
        nn.ConvTranspose2d(channels // 2, channels // 4, 3, stride=2, padding=1, output_padding=1),
        nn.InstanceNorm2d(channels // 4, affine=True),
        nn.ReLU(inplace=True),
        nn.ConvTranspose2d(channels // 4, out_channels, 7, padding=3),
    )


class PerturbationGenerator(nn.Module):
    def __init__(self, config: GeneratorConfig):
        super().__init__()
        self.config = config
        c = config.base_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c, 7, padding=3),
            nn.InstanceNorm2d(c, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            nn.InstanceNorm2d(2 * c, affine=True),
            nn.ReLU(inplace=True),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
            nn.InstanceNorm2d(4 * c, affine=True),
            nn.ReLU(inplace=True),
            *[ResBlock(4 * c) for _ in range(config.resblocks)],
        )
        self.perturbation_decoder = _decoder(4 * c, 3)
        self.saliency_decoder = _decoder(4 * c, 1)

    def forward(self, images: torch.Tensor) -> GeneratorOutput:
        n, ch, h, w = images.shape
        if ch != 3:
            raise ValueError("generator expects 3-channel input")
        if h % 4 or w % 4:
            raise ValueError(
                f"input size {h}x{w} incompatible with the built stride schedule "
                "(H and W must be divisible by 4)"
            )
        eps = self.config.epsilon
        features = self.encoder(images)
        raw = self.perturbation_decoder(features)
        delta = (eps * torch.tanh(raw)).clamp(-eps, eps)
        saliency = self.saliency_decoder(features)
        if delta.shape[-2:] != (h, w):
            raise ValueError("decoder output does not match input resolution")
        return GeneratorOutput(delta=delta, saliency=saliency, epsilon=eps)


def build_generator(config: GeneratorConfig, seed: int) -> PerturbationGenerator:
    """Construct a generator with seeded, reproducible initial weights."""
    gen = PerturbationGenerator(config)
    seeded_init(gen, seed)
    return gen


def minmax_scale(saliency: torch.Tensor, tau: float = 1e-8) -> torch.Tensor:
    """Per-sample min-max rescaling of the saliency map into [0,1].

    A map whose range is below ``tau`` scales to all zeros instead of
    dividing by (near) zero.
    """
    if not torch.isfinite(saliency).all():
        raise ValueError("saliency map contains non-finite entries")
    flat = saliency.reshape(saliency.shape[0], -1)
    lo = flat.amin(dim=1).view(-1, *[1] * (saliency.ndim - 1))
    hi = flat.amax(dim=1).view(-1, *[1] * (saliency.ndim - 1))
    span = hi - lo
    degenerate = span < tau
    scaled = (saliency - lo) / torch.where(degenerate, torch.ones_like(span), span)
    return torch.where(
        degenerate.expand_as(scaled), torch.zeros_like(scaled), scaled
    )


def compose_adversarial(
    images: torch.Tensor, output: GeneratorOutput, gating: bool = True
) -> torch.Tensor:
    """Compose x' from a batch and a generator output.

    gating=True:  x' = clamp(x + M_scaled * delta, 0, 1)
    gating=False: x' = clamp(x + delta, 0, 1)

    The clamp realizes the projection onto valid pixel space. The linf
    budget (eps without gating, eps * max(M_scaled) per sample with gating)
    holds exactly for the recomputed difference x' - x.
    """
    if images.shape != output.delta.shape:
        raise ValueError("image and delta shapes differ")
    eps = output.epsilon
    if gating:
        gate = minmax_scale(output.saliency)
        perturbation = gate * output.delta
        per_sample_max = gate.reshape(len(images), -1).amax(dim=1).detach()
        budget = (eps * per_sample_max).view(-1, *[1] * (images.ndim - 1))
    else:
        perturbation = output.delta
        budget = torch.as_tensor(eps, dtype=images.dtype)
    adv = (images + perturbation).clamp(0.0, 1.0)
    return project_linf_exact(adv, images, budget)
