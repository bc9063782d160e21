"""Run configuration: TOML loading, snapshots, hashing, and component
assembly shared by the CLI subcommands.

A run is fully described by one TOML file with [data] [clip] [surrogate]
[generator] [train] sections plus a top-level seed; every artifact embeds
the configuration hash so results stay traceable to their exact settings.
"""

import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import tomlkit

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .common import ConfigError, stable_hash, substream_seed
from .clip_guidance import (
    PromptSet,
    PromptTemplate,
    encode_prompts,
    expand_label_tuples,
    load_encoders,
)
from .data import Dataset, load_dataset
from .generator import GeneratorConfig, build_generator
from .losses import LossWeights
from .surrogate import (
    FeatureExtractor,
    NormalizedModel,
    build_feature_extractor,
    extractor_from_model,
    fit_fixture_cnn,
    load_classifier,
)
from .trainer import TrainComponents, TrainConfig

logger = logging.getLogger(__name__)


@dataclass
class DataConfig:
    name: str = "synthetic-fixture"
    root: str = ""
    image_size: int = 224
    multilabel: Optional[bool] = None


@dataclass
class ClipConfig:
    backbone: str = "vit-b-16"
    fixture: bool = False
    template: str = "a photo of a {label}"
    m_candidates: object = "all"
    pair_limit: int = 380


@dataclass
class SurrogateConfig:
    arch: str = "resnet18"
    layer: Optional[str] = None
    weights: str = "random"
    fit_epochs: int = 30


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    clip: ClipConfig = field(default_factory=ClipConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    surrogate: SurrogateConfig = field(default_factory=SurrogateConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "data": {
                "name": self.data.name,
                "root": str(self.data.root),
                "image_size": self.data.image_size,
                **(
                    {"multilabel": self.data.multilabel}
                    if self.data.multilabel is not None
                    else {}
                ),
            },
            "clip": {
                "backbone": self.clip.backbone,
                "fixture": self.clip.fixture,
                "template": self.clip.template,
                "m_candidates": self.clip.m_candidates,
                "pair_limit": self.clip.pair_limit,
            },
            "surrogate": {
                "arch": self.surrogate.arch,
                **({"layer": self.surrogate.layer} if self.surrogate.layer else {}),
                "weights": str(self.surrogate.weights),
                "fit_epochs": self.surrogate.fit_epochs,
            },
            "generator": {
                "epsilon": self.generator.epsilon,
                "base_channels": self.generator.base_channels,
                "resblocks": self.generator.resblocks,
                "saliency_gating": self.generator.saliency_gating,
            },
            "train": {
                "epochs": self.train.epochs,
                "batch_size": self.train.batch_size,
                "lr": self.train.lr,
                "alpha": self.train.weights.alpha,
                "beta": self.train.weights.beta,
                "mu": self.train.weights.mu,
                "checkpoint_every": self.train.checkpoint_every,
                "weight_decay": self.train.weight_decay,
                **(
                    {"grad_clip": self.train.grad_clip}
                    if self.train.grad_clip is not None
                    else {}
                ),
                "early_stop": self.train.early_stop,
            },
        }

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())


def load_run_config(path: Path, overrides: Optional[dict] = None) -> RunConfig:
    """Parse a TOML run configuration; CLI flag overrides win over the file."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return run_config_from_dict(raw, overrides)


def run_config_from_dict(raw: dict, overrides: Optional[dict] = None) -> RunConfig:
    raw = dict(raw)
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, name = key.partition(".")
        if name:
            raw.setdefault(section, {})[name] = value
        else:
            raw[section] = value
    try:
        data = DataConfig(**raw.get("data", {}))
        clip = ClipConfig(**raw.get("clip", {}))
        surrogate = SurrogateConfig(**raw.get("surrogate", {}))
        generator = GeneratorConfig(**raw.get("generator", {}))
        train_raw = dict(raw.get("train", {}))
        train_raw.pop("seed", None)  # the top-level seed governs; fanned out later
        weights = LossWeights(
            alpha=train_raw.pop("alpha", 1e-5),
            beta=train_raw.pop("beta", 1e-3),
            mu=train_raw.pop("mu", 0.5),
        )
        train = TrainConfig(weights=weights, **train_raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return RunConfig(
        data=data,
        clip=clip,
        generator=generator,
        surrogate=surrogate,
        train=train,
        seed=int(raw.get("seed", 0)),
    )


def write_snapshot(config: RunConfig, run_dir: Path) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    snapshot = run_dir / "config_snapshot.toml"
    payload = config.to_dict()
    payload["config_hash"] = config.config_hash()
    snapshot.write_text(tomlkit.dumps(payload))
    return snapshot


def fixture_run_config(seed: int = 0, epochs: int = 13) -> RunConfig:
    """Desk-scale preset: synthetic data, fixture encoders, small generator."""
    return RunConfig(
        data=DataConfig(name="synthetic-fixture", image_size=64),
        clip=ClipConfig(fixture=True, template="a photo of a {label}"),
        surrogate=SurrogateConfig(arch="fixture-cnn", weights="fixture-train"),
        generator=GeneratorConfig(epsilon=0.2, base_channels=16, resblocks=6),
        train=TrainConfig(epochs=epochs, batch_size=4, lr=1e-3),
        seed=seed,
    )


def build_dataset(config: RunConfig, split: str) -> Dataset:
    return load_dataset(
        config.data.name,
        split,
        root=config.data.root or None,
        seed=config.seed,
        multilabel=config.data.multilabel,
    )


def build_encoder_pair(config: RunConfig):
    return load_encoders(
        backbone=config.clip.backbone,
        fixture=config.clip.fixture,
        seed=substream_seed(config.seed, "clip"),
        image_size=config.data.image_size,
    )


def build_prompt_set(config: RunConfig, dataset: Dataset, text_encoder) -> PromptSet:
    template = PromptTemplate(config.clip.template)
    tuples = expand_label_tuples(
        dataset.vocabulary, template.arity, pair_limit=config.clip.pair_limit
    )
    return encode_prompts(tuples, template, text_encoder)


def build_surrogate_model(config: RunConfig, dataset: Dataset) -> NormalizedModel:
    if config.surrogate.weights == "fixture-train":
        if config.surrogate.arch != "fixture-cnn":
            raise ConfigError("weights='fixture-train' requires arch='fixture-cnn'")
        return fit_fixture_cnn(
            dataset,
            image_size=config.data.image_size,
            seed=substream_seed(config.seed, "surrogate"),
            epochs=config.surrogate.fit_epochs,
        )
    return load_classifier(
        config.surrogate.arch,
        weights=config.surrogate.weights,
        num_classes=len(dataset.vocabulary),
    )


def build_surrogate(config: RunConfig, dataset: Dataset) -> FeatureExtractor:
    model = build_surrogate_model(config, dataset)
    size_check = (
        config.data.image_size if config.surrogate.arch == "fixture-cnn" else None
    )
    return extractor_from_model(
        model,
        config.surrogate.arch,
        layer=config.surrogate.layer,
        image_size=size_check,
    )


def assemble_training(config: RunConfig):
    """Build everything train() needs from one RunConfig.

    Returns (train_config, dataset, components). The generator seed, data
    order, encoder weights, and candidate sampling all fan out from the
    single top-level seed.
    """
    dataset = build_dataset(config, "train")
    text_encoder, image_encoder = build_encoder_pair(config)
    prompts = build_prompt_set(config, dataset, text_encoder)
    extractor = build_surrogate(config, dataset)
    if extractor.spec.expected_width != prompts.embeddings.shape[1]:
        raise ConfigError(
            "surrogate feature width and text embedding width disagree: "
            f"{extractor.spec.expected_width} vs {prompts.embeddings.shape[1]}"
        )
    gen = build_generator(config.generator, substream_seed(config.seed, "generator"))
    train_config = config.train
    train_config.seed = substream_seed(config.seed, "train")
    components = TrainComponents(
        generator=gen,
        generator_config=config.generator,
        extractor=extractor,
        image_encoder=image_encoder,
        prompts=prompts,
        target_size=config.data.image_size,
        m_candidates=config.clip.m_candidates,
    )
    return train_config, dataset, components
