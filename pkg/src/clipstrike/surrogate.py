"""Frozen surrogate classifiers and 512-dim mid-level feature extraction.

The per-architecture registry names the deepest layer whose channel width is
exactly 512; its activation is spatially mean-pooled to an Nx512 matrix that
matches the text/image embedding width. Channel normalization for each
backbone happens here, after perturbation, so perturbations stay in raw
pixel units.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import torch
from torch import nn

from .common import ConfigError, substream_seed
from .clip_guidance import seeded_init
from .data import Dataset, batch_iter

logger = logging.getLogger(__name__)

FEATURE_WIDTH = 512

# deepest 512-channel layer per supported architecture (probe-validated)
LAYER_REGISTRY = {
    "vgg16": "features",
    "vgg19": "features",
    "resnet18": "layer4",
    "resnet50": "layer2",
    "resnet152": "layer2",
    "densenet121": "features.transition3",
    "densenet169": "features.denseblock2",
    "fixture-cnn": "block4",
}

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class FeatureExtractorSpec:
    architecture: str
    layer: str
    expected_width: int = FEATURE_WIDTH


class NormalizedModel(nn.Module):
    """Frozen classifier wrapper applying per-channel input normalization."""

    def __init__(self, net: nn.Module, mean, std):
        super().__init__()
        self.net = net
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.net((images - self.mean) / self.std)

    def freeze(self) -> "NormalizedModel":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


class FixtureCNN(nn.Module):
    """Small classifier for the synthetic fixture; block4 is 512-wide."""

    def __init__(self, num_classes: int = 4):
        super().__init__()
        self.block1 = nn.Sequential(nn.Conv2d(3, 32, 3, stride=2, padding=1), nn.ReLU())
        self.block2 = nn.Sequential(nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU())
        self.block3 = nn.Sequential(nn.Conv2d(64, 128, 3, stride=2, padding=1), nn.ReLU())
        self.block4 = nn.Sequential(
            nn.Conv2d(128, FEATURE_WIDTH, 3, stride=2, padding=1), nn.ReLU()
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(FEATURE_WIDTH, num_classes)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.block4(self.block3(self.block2(self.block1(x))))
        return self.head(self.pool(x).flatten(1))


def _construct_backbone(architecture: str, num_classes: Optional[int] = None) -> nn.Module:
    if architecture == "fixture-cnn":
        return FixtureCNN(num_classes=num_classes or 4)
    try:
        import torchvision.models as tvm
    except ImportError:
        raise ConfigError(
            f"architecture {architecture!r} requires torchvision"
        ) from None
    factories = {
        "vgg16": tvm.vgg16,
        "vgg19": tvm.vgg19,
        "resnet18": tvm.resnet18,
        "resnet50": tvm.resnet50,
        "resnet152": tvm.resnet152,
        "densenet121": tvm.densenet121,
        "densenet169": tvm.densenet169,
    }
    if architecture not in factories:
        raise ConfigError(f"unknown surrogate architecture: {architecture!r}")
    return factories[architecture](weights=None)


def probe_layer_widths(model: nn.Module, image_size: int = 224) -> dict:
    """Run a dummy forward pass and record each named module's channel width."""
    widths = {}
    hooks = []

    def make_hook(name):
        def hook(_mod, _inp, out):
            if torch.is_tensor(out) and out.ndim >= 2:
                widths[name] = out.shape[1]

        return hook

    for name, module in model.named_modules():
        if name:
            hooks.append(module.register_forward_hook(make_hook(name)))
    with torch.no_grad():
        model(torch.zeros(1, 3, image_size, image_size))
    for h in hooks:
        h.remove()
    return widths


def resolve_layer(
    architecture: str,
    layer: Optional[str] = None,
    image_size: int = 224,
    model: Optional[nn.Module] = None,
) -> FeatureExtractorSpec:
    """Pick (or validate) the 512-channel feature layer for an architecture."""
    if layer is None:
        layer = LAYER_REGISTRY.get(architecture)
        if layer is None:
            raise ConfigError(
                f"no compatible feature layer registered for {architecture!r}; "
                "pass surrogate.layer explicitly"
            )
    if model is None:
        model = _construct_backbone(architecture)
    widths = probe_layer_widths(model, image_size=image_size)
    if layer not in widths:
        raise ConfigError(f"layer {layer!r} not found in {architecture}")
    if widths[layer] != FEATURE_WIDTH:
        raise ConfigError(
            f"no compatible feature layer: {architecture}.{layer} outputs "
            f"{widths[layer]} channels, expected {FEATURE_WIDTH}"
        )
    return FeatureExtractorSpec(architecture=architecture, layer=layer)


class FeatureExtractor:
    """Hooks a frozen model's named layer and mean-pools it to Nx512.

    Gradients propagate through to the input batch (the generator trains
    through this path); the model itself never changes.
    """

    def __init__(self, spec: FeatureExtractorSpec, model: NormalizedModel,
                 image_size: Optional[int] = None):
        self.spec = spec
        self.model = model.freeze()
        self.image_size = image_size
        self._captured = None
        target = dict(self.model.net.named_modules())[spec.layer]
        target.register_forward_hook(self._capture)

    def _capture(self, _module, _inputs, output):
        self._captured = output

    def extract_midlevel(self, images: torch.Tensor) -> torch.Tensor:
        if self.image_size is not None and images.shape[-2:] != (
            self.image_size,
            self.image_size,
        ):
            raise ValueError(
                f"feature extractor expects {self.image_size}x{self.image_size} "
                f"input, got {tuple(images.shape[-2:])}"
            )
        self._captured = None
        self.model(images)
        activation = self._captured
        self._captured = None
        if activation.ndim > 2:
            activation = activation.mean(dim=tuple(range(2, activation.ndim)))
        if activation.shape[1] != self.spec.expected_width:
            raise ValueError(
                f"feature width {activation.shape[1]} != {self.spec.expected_width}"
            )
        return activation


def _normalization_for(architecture: str):
    if architecture == "fixture-cnn":
        return (0.5, 0.5, 0.5), (0.5, 0.5, 0.5)
    return IMAGENET_MEAN, IMAGENET_STD


def load_classifier(
    architecture: str,
    weights: str = "random",
    num_classes: Optional[int] = None,
) -> NormalizedModel:
    """Build a frozen classifier: random init, a state-dict path, or
    torchvision pretrained weights (requires download access)."""
    net = _construct_backbone(architecture, num_classes=num_classes)
    if weights == "pretrained":
        if architecture == "fixture-cnn":
            raise ConfigError("fixture-cnn has no pretrained weights; train it")
        import torchvision.models as tvm

        factory = getattr(tvm, architecture.replace("-", "_"))
        net = factory(weights="DEFAULT")
    elif weights not in ("random", "fixture-train"):
        state = torch.load(weights, map_location="cpu", weights_only=True)
        net.load_state_dict(state)
    mean, std = _normalization_for(architecture)
    return NormalizedModel(net, mean, std).freeze()


def build_feature_extractor(
    architecture: str,
    weights: str = "random",
    layer: Optional[str] = None,
    image_size: int = 224,
    num_classes: Optional[int] = None,
) -> FeatureExtractor:
    model = load_classifier(architecture, weights=weights, num_classes=num_classes)
    spec = resolve_layer(architecture, layer=layer, image_size=image_size, model=model.net)
    size_check = image_size if architecture == "fixture-cnn" else None
    return FeatureExtractor(spec, model, image_size=size_check)


def extractor_from_model(
    model: NormalizedModel,
    architecture: str,
    layer: Optional[str] = None,
    image_size: Optional[int] = None,
) -> FeatureExtractor:
    """Wrap an already-built (e.g. fixture-trained) classifier."""
    probe_size = image_size or 224
    spec = resolve_layer(architecture, layer=layer, image_size=probe_size, model=model.net)
    return FeatureExtractor(spec, model, image_size=image_size)


def fit_fixture_cnn(
    dataset: Dataset,
    image_size: int = 64,
    seed: int = 0,
    epochs: int = 30,
    lr: float = 1e-3,
    batch_size: int = 8,
) -> NormalizedModel:
    """Deterministically train the fixture classifier on a fixture dataset.

    Single-label vocabularies train with cross-entropy; multilabel with
    per-class binary cross-entropy. The returned model is frozen.
    """
    num_classes = len(dataset.vocabulary)
    net = FixtureCNN(num_classes=num_classes)
    seeded_init(net, substream_seed(seed, "fixture-cnn"))
    mean, std = _normalization_for("fixture-cnn")
    model = NormalizedModel(net, mean, std)
    optimizer = torch.optim.Adam(model.parameters(), lr=lr)
    model.train()
    for epoch in range(epochs):
        for batch in batch_iter(
            dataset,
            batch_size,
            shuffle=True,
            seed=substream_seed(seed, f"fixture-fit-{epoch}"),
            target_size=image_size,
        ):
            logits = model(batch.images)
            if dataset.vocabulary.multilabel:
                target = torch.zeros_like(logits)
                for i, labels in enumerate(batch.labels):
                    target[i, list(labels)] = 1.0
                loss = nn.functional.binary_cross_entropy_with_logits(logits, target)
            else:
                target = torch.tensor([next(iter(ls)) for ls in batch.labels])
                loss = nn.functional.cross_entropy(logits, target)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
    logger.info("fixture-cnn fitted: final loss %.4f", loss.detach().item())
    return model.freeze()


def save_classifier(model: NormalizedModel, path: Path) -> None:
    torch.save(model.net.state_dict(), path)
