"""Dataset loading, preprocessing, and batching.

Datasets live on disk as ``<root>/<split>/<id>.png`` plus an ``<id>.json``
label sidecar (``{"labels": ["dog", "person"]}``), with an order-significant
``<root>/classes.txt`` vocabulary. A built-in synthetic fixture (colored
shapes on noise backgrounds) makes the whole pipeline runnable without
downloads.

The pipeline carries raw [0,1] pixels; model-specific channel normalization
happens inside the surrogate / encoder adapters so the perturbation budget
stays in pixel units.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .common import ConfigError, substream_seed

logger = logging.getLogger(__name__)

FIXTURE_CLASSES = ("circle", "square", "triangle", "cross")
FIXTURE_TRAIN_SIZE = 64
FIXTURE_TEST_SIZE = 32
FIXTURE_IMAGE_SIZE = 32


@dataclass(frozen=True)
class LabelVocabulary:
    """Ordered class-name list shared by datasets, prompts, and classifiers."""

    classes: tuple
    multilabel: bool = False

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ConfigError("vocabulary needs at least 2 classes")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("vocabulary class names must be unique")
        if any(not c for c in self.classes):
            raise ConfigError("vocabulary class names must be non-empty")

    def __len__(self) -> int:
        return len(self.classes)

    def index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise ConfigError(f"unknown class name: {name!r}") from None

    @classmethod
    def from_file(cls, path: Path, multilabel: bool = False) -> "LabelVocabulary":
        lines = [ln.strip() for ln in Path(path).read_text().splitlines()]
        return cls(classes=tuple(ln for ln in lines if ln), multilabel=multilabel)

    def to_file(self, path: Path) -> None:
        Path(path).write_text("".join(f"{c}\n" for c in self.classes))


@dataclass
class Sample:
    """One image with its label set. Pixels are float32 3xHxW in [0,1]."""

    image: torch.Tensor
    labels: frozenset
    id: str

    def validate(self, vocab: LabelVocabulary) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError(f"sample {self.id}: expected 3xHxW image")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValueError(f"sample {self.id}: pixel values outside [0,1]")
        if any(i >= len(vocab) for i in self.labels):
            raise ValueError(f"sample {self.id}: label index out of range")
        if not vocab.multilabel and len(self.labels) != 1:
            raise ValueError(
                f"sample {self.id}: single-label dataset requires exactly one label"
            )


@dataclass
class ImageBatch:
    """A stacked batch: images Nx3xHxW, per-sample label sets, ids."""

    images: torch.Tensor
    labels: list
    ids: list

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) < 1:
            raise ValueError("batch images must be non-empty Nx3xHxW")
        if not (len(self.images) == len(self.labels) == len(self.ids)):
            raise ValueError("batch fields must have equal length")

    def __len__(self) -> int:
        return len(self.ids)


class Dataset:
    """Materialized sample records with lazy decode and a skip counter.

    Corrupt records (unreadable PNG, bad or missing sidecar) are skipped
    with a logged warning during iteration; ``skipped`` counts them.
    """

    def __init__(self, name: str, split: str, vocabulary: LabelVocabulary, records):
        self.name = name
        self.split = split
        self.vocabulary = vocabulary
        self._records = list(records)
        self.skipped = 0

    def __len__(self) -> int:
        return len(self._records)

    def record_ids(self) -> list:
        return [r["id"] for r in self._records]

    def decode(self, index: int) -> Optional[Sample]:
        """Decode one record; None (plus warning + counter) when corrupt."""
        rec = self._records[index]
        if "sample" in rec:
            return rec["sample"]
        try:
            with Image.open(rec["png"]) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
            sidecar = json.loads(Path(rec["json"]).read_text())
            labels = frozenset(
                self.vocabulary.index(name) for name in sidecar["labels"]
            )
            image = torch.from_numpy(arr).permute(2, 0, 1).contiguous()
            sample = Sample(image=image, labels=labels, id=rec["id"])
            sample.validate(self.vocabulary)
            return sample
        except (OSError, ValueError, KeyError, json.JSONDecodeError, ConfigError) as exc:
            self.skipped += 1
            logger.warning("skipping corrupt sample %s: %s", rec["id"], exc)
            return None

    def __iter__(self) -> Iterator[Sample]:
        for i in range(len(self._records)):
            sample = self.decode(i)
            if sample is not None:
                yield sample


def _draw_shape(img: np.ndarray, class_index: int, rng: np.random.Generator) -> None:
    size = img.shape[1]
    cy, cx = rng.integers(10, size - 10, size=2)
    half = int(rng.integers(5, 9))
    yy, xx = np.mgrid[0:size, 0:size]
    colors = np.array(
        [[0.95, 0.15, 0.15], [0.15, 0.85, 0.15], [0.2, 0.3, 0.95], [0.95, 0.9, 0.2]],
        dtype=np.float32,
    )
    if class_index == 0:
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= half**2
    elif class_index == 1:
        mask = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
    elif class_index == 2:
        mask = (yy >= cy - half) & (yy <= cy + half) & (np.abs(xx - cx) <= (yy - (cy - half)) / 2)
    else:
        arm = max(2, half // 3)
        box = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
        mask = box & ((np.abs(yy - cy) <= arm) | (np.abs(xx - cx) <= arm))
    img[:, mask] = colors[class_index][:, None]


def generate_fixture_samples(split: str, seed: int) -> list:
    """Deterministic synthetic dataset: one colored shape per noisy image."""
    count = FIXTURE_TRAIN_SIZE if split == "train" else FIXTURE_TEST_SIZE
    rng = np.random.default_rng(substream_seed(seed, f"fixture-{split}"))
    samples = []
    for i in range(count):
        class_index = i % len(FIXTURE_CLASSES)
        img = rng.uniform(0.2, 0.8, size=(3, FIXTURE_IMAGE_SIZE, FIXTURE_IMAGE_SIZE))
        img = img.astype(np.float32)
        _draw_shape(img, class_index, rng)
        samples.append(
            Sample(
                image=torch.from_numpy(img),
                labels=frozenset({class_index}),
                id=f"{split}-{i:04d}",
            )
        )
    return samples


def fixture_vocabulary() -> LabelVocabulary:
    return LabelVocabulary(classes=FIXTURE_CLASSES, multilabel=False)


def load_dataset(
    name: str,
    split: str,
    root: Optional[Path] = None,
    seed: int = 0,
    multilabel: Optional[bool] = None,
) -> Dataset:
    """Open a dataset by name.

    ``synthetic-fixture`` is generated in memory; any other name is treated
    as a directory-layout dataset under ``root``. ``multilabel`` overrides
    the inferred vocabulary mode (default: inferred from the sidecars).
    """
    if name == "synthetic-fixture":
        samples = generate_fixture_samples(split, seed)
        records = [{"id": s.id, "sample": s} for s in samples]
        return Dataset(name, split, fixture_vocabulary(), records)

    if root is None:
        raise ConfigError(f"dataset {name!r} requires a root directory")
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset root does not exist: {root}")
    classes_file = root / "classes.txt"
    if not classes_file.is_file():
        raise ConfigError(f"missing vocabulary file: {classes_file}")
    split_dir = root / split
    if not split_dir.is_dir():
        raise ConfigError(f"missing split directory: {split_dir}")

    records = []
    inferred_multi = False
    for png in sorted(split_dir.glob("*.png")):
        sidecar = png.with_suffix(".json")
        records.append({"id": png.stem, "png": png, "json": sidecar})
        try:
            inferred_multi |= len(json.loads(sidecar.read_text())["labels"]) > 1
        except (OSError, KeyError, json.JSONDecodeError):
            pass  # surfaces as a skip at decode time
    if multilabel is None:
        multilabel = inferred_multi
    vocab = LabelVocabulary.from_file(classes_file, multilabel=multilabel)
    return Dataset(name, split, vocab, records)


def preprocess(sample: Sample, target_size: int = 224) -> Sample:
    """Bilinear-resize a sample to ``target_size`` square, clamped to [0,1]."""
    image = sample.image
    if image.ndim != 3 or image.shape[0] != 3:
        raise ValueError("unsupported channel count: expected 3xHxW input")
    if image.shape[1] == target_size and image.shape[2] == target_size:
        return sample
    resized = F.interpolate(
        image.unsqueeze(0),
        size=(target_size, target_size),
        mode="bilinear",
        align_corners=False,
    ).squeeze(0)
    return Sample(image=resized.clamp(0.0, 1.0), labels=sample.labels, id=sample.id)


def batch_iter(
    dataset: Dataset,
    batch_size: int,
    shuffle: bool = False,
    seed: int = 0,
    target_size: Optional[int] = None,
) -> Iterator[ImageBatch]:
    """Yield ImageBatches covering the dataset once, deterministically.

    Identical (dataset, seed, shuffle) produces identical batch contents and
    order. The final batch may be smaller. Every emitted pixel is asserted
    to lie in [0,1].
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(dataset))
    if shuffle:
        np.random.default_rng(seed).shuffle(order)

    pending = []
    for index in order:
        sample = dataset.decode(int(index))
        if sample is None:
            continue
        if target_size is not None:
            sample = preprocess(sample, target_size)
        pending.append(sample)
        if len(pending) == batch_size:
            yield _stack(pending)
            pending = []
    if pending:
        yield _stack(pending)


def _stack(samples: Sequence[Sample]) -> ImageBatch:
    shapes = {tuple(s.image.shape) for s in samples}
    if len(shapes) != 1:
        raise ValueError(f"batch members disagree on shape: {sorted(shapes)}")
    images = torch.stack([s.image for s in samples])
    assert images.min() >= 0 and images.max() <= 1, "pixels escaped [0,1]"
    return ImageBatch(
        images=images,
        labels=[s.labels for s in samples],
        ids=[s.id for s in samples],
    )


def ingest_fixture(root: Path, seed: int = 0) -> None:
    """Materialize the synthetic fixture in the on-disk layout."""
    root = Path(root)
    vocab = fixture_vocabulary()
    root.mkdir(parents=True, exist_ok=True)
    vocab.to_file(root / "classes.txt")
    for split in ("train", "test"):
        split_dir = root / split
        split_dir.mkdir(exist_ok=True)
        for sample in generate_fixture_samples(split, seed):
            write_sample(split_dir, sample, vocab)


def write_sample(split_dir: Path, sample: Sample, vocab: LabelVocabulary) -> None:
    arr = (sample.image.clamp(0, 1).numpy() * 255.0).round().astype(np.uint8)
    Image.fromarray(arr.transpose(1, 2, 0)).save(split_dir / f"{sample.id}.png")
    names = sorted(vocab.classes[i] for i in sample.labels)
    (split_dir / f"{sample.id}.json").write_text(json.dumps({"labels": names}))


def ingest_image_folder(source: Path, root: Path, splits=("train", "test")) -> None:
    """Convert a class-per-subdirectory image tree to the dataset layout.

    Expects ``source/<split>/<class>/<file>.png|jpg``; class names become the
    vocabulary in sorted order.
    """
    source, root = Path(source), Path(root)
    if not source.is_dir():
        raise ConfigError(f"source directory does not exist: {source}")
    class_names = sorted(
        {d.name for split in splits for d in (source / split).iterdir() if d.is_dir()}
    )
    vocab = LabelVocabulary(classes=tuple(class_names), multilabel=False)
    root.mkdir(parents=True, exist_ok=True)
    vocab.to_file(root / "classes.txt")
    for split in splits:
        split_dir = root / split
        split_dir.mkdir(exist_ok=True)
        counter = 0
        for cls in class_names:
            for path in sorted((source / split / cls).glob("*")):
                if path.suffix.lower() not in (".png", ".jpg", ".jpeg"):
                    continue
                with Image.open(path) as im:
                    arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
                sample = Sample(
                    image=torch.from_numpy(arr).permute(2, 0, 1).contiguous(),
                    labels=frozenset({vocab.index(cls)}),
                    id=f"{split}-{counter:06d}",
                )
                write_sample(split_dir, sample, vocab)
                counter += 1
