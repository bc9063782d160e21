"""Gradient-based comparison attacks: FGSM and linf PGD.

Both operate against a frozen white-box classifier, use cross-entropy for
single-label targets or summed binary cross-entropy for multi-label
targets, and respect the linf budget exactly (including after floating-
point recomputation of x' - x).
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn.functional as F

from .common import project_linf_exact
from .surrogate import NormalizedModel


@dataclass(frozen=True)
class BaselineSpec:
    kind: str
    epsilon: float
    steps: int = 10
    step_size: Optional[float] = None
    random_start: bool = False

    def __post_init__(self):
        if self.kind not in ("fgsm", "pgd"):
            raise ValueError(f"unknown baseline kind {self.kind!r}")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if self.steps < 1:
            raise ValueError("pgd steps must be >= 1")
        if self.step_size is not None and self.step_size > self.epsilon:
            raise ValueError("step_size must be <= epsilon")

    @property
    def resolved_step_size(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / max(self.steps // 2, 1)


def _target_tensor(label_sets: Sequence, num_classes: int, multilabel: bool) -> torch.Tensor:
    if multilabel:
        target = torch.zeros(len(label_sets), num_classes)
        for i, labels in enumerate(label_sets):
            target[i, list(labels)] = 1.0
        return target
    return torch.tensor([next(iter(labels)) for labels in label_sets])


def _attack_loss(scores: torch.Tensor, target: torch.Tensor, multilabel: bool) -> torch.Tensor:
    if multilabel:
        return F.binary_cross_entropy_with_logits(scores, target, reduction="sum")
    return F.cross_entropy(scores, target)


def _input_gradient(
    model: NormalizedModel, images: torch.Tensor, target: torch.Tensor, multilabel: bool
) -> torch.Tensor:
    inputs = images.clone().detach().requires_grad_(True)
    loss = _attack_loss(model(inputs), target, multilabel)
    (grad,) = torch.autograd.grad(loss, inputs)
    return grad


def fgsm(
    model: NormalizedModel,
    images: torch.Tensor,
    label_sets: Sequence,
    epsilon: float,
    multilabel: bool = False,
    num_classes: Optional[int] = None,
) -> torch.Tensor:
    """Single signed-gradient step: clamp(x + eps * sign(grad), 0, 1)."""
    if label_sets is None or len(label_sets) != len(images):
        raise ValueError("labels required for every image")
    num_classes = num_classes or _infer_classes(model, images)
    target = _target_tensor(label_sets, num_classes, multilabel)
    grad = _input_gradient(model, images, target, multilabel)
    adv = (images + epsilon * grad.sign()).clamp(0.0, 1.0)
    return project_linf_exact(adv.detach(), images, epsilon)


def pgd(
    model: NormalizedModel,
    images: torch.Tensor,
    label_sets: Sequence,
    spec: BaselineSpec,
    multilabel: bool = False,
    num_classes: Optional[int] = None,
    seed: int = 0,
) -> torch.Tensor:
    """Iterative signed-gradient ascent with per-step linf/pixel projection."""
    if label_sets is None or len(label_sets) != len(images):
        raise ValueError("labels required for every image")
    num_classes = num_classes or _infer_classes(model, images)
    target = _target_tensor(label_sets, num_classes, multilabel)
    eps = spec.epsilon
    alpha = spec.resolved_step_size

    adv = images
    if spec.random_start:
        gen = torch.Generator().manual_seed(seed)
        noise = (torch.rand(images.shape, generator=gen) * 2 - 1) * eps
        adv = (images + noise).clamp(0.0, 1.0)

    for _ in range(spec.steps):
        grad = _input_gradient(model, adv, target, multilabel)
        adv = adv + alpha * grad.sign()
        # project onto the eps-ball around x, then onto valid pixel space
        adv = torch.minimum(torch.maximum(adv, images - eps), images + eps)
        adv = adv.clamp(0.0, 1.0)
    return project_linf_exact(adv.detach(), images, eps)


def _infer_classes(model: NormalizedModel, images: torch.Tensor) -> int:
    with torch.no_grad():
        return model(images[:1]).shape[1]


class BaselineAttack:
    """Adapter giving FGSM/PGD the evaluation-matrix attack interface."""

    def __init__(self, spec: BaselineSpec, model: NormalizedModel,
                 multilabel: bool = False, num_classes: Optional[int] = None,
                 seed: int = 0):
        self.spec = spec
        self.model = model
        self.multilabel = multilabel
        self.num_classes = num_classes
        self.seed = seed
        self.name = spec.kind

    def perturb(self, batch) -> torch.Tensor:
        if self.spec.kind == "fgsm":
            return fgsm(
                self.model, batch.images, batch.labels, self.spec.epsilon,
                multilabel=self.multilabel, num_classes=self.num_classes,
            )
        return pgd(
            self.model, batch.images, batch.labels, self.spec,
            multilabel=self.multilabel, num_classes=self.num_classes, seed=self.seed,
        )
