import json

import pytest
import torch

from clipstrike.common import ConfigError
from clipstrike.data import (
    LabelVocabulary,
    Sample,
    batch_iter,
    ingest_fixture,
    load_dataset,
    preprocess,
)


def test_vocabulary_invariants():
    vocab = LabelVocabulary(classes=("cat", "dog"), multilabel=False)
    assert len(vocab) == 2
    assert vocab.index("dog") == 1
    with pytest.raises(ConfigError):
        LabelVocabulary(classes=("solo",))
    with pytest.raises(ConfigError):
        LabelVocabulary(classes=("a", "a"))
    with pytest.raises(ConfigError):
        LabelVocabulary(classes=("a", ""))
    with pytest.raises(ConfigError):
        vocab.index("bird")


def test_fixture_dataset_shape_and_count(fixture_train):
    samples = list(fixture_train)
    assert len(samples) == 64
    assert len(fixture_train.vocabulary) == 4
    for sample in samples:
        assert sample.image.shape == (3, 32, 32)
        assert 0.0 <= sample.image.min() and sample.image.max() <= 1.0
        assert len(sample.labels) == 1


def test_fixture_determinism():
    a = list(load_dataset("synthetic-fixture", "train", seed=9))
    b = list(load_dataset("synthetic-fixture", "train", seed=9))
    c = list(load_dataset("synthetic-fixture", "train", seed=10))
    assert all(torch.equal(x.image, y.image) for x, y in zip(a, b))
    assert any(not torch.equal(x.image, y.image) for x, y in zip(a, c))


def _write_voc_style(root, entries):
    (root / "test").mkdir(parents=True)
    (root / "classes.txt").write_text("person\ndog\ncat\n")
    from PIL import Image
    import numpy as np

    for name, labels in entries:
        arr = np.random.default_rng(0).integers(0, 255, (16, 16, 3), dtype=np.uint8)
        Image.fromarray(arr).save(root / "test" / f"{name}.png")
        (root / "test" / f"{name}.json").write_text(json.dumps({"labels": labels}))


def test_voc_style_multilabel(tmp_path):
    _write_voc_style(tmp_path, [("a", ["person", "dog"]), ("b", ["cat"])])
    ds = load_dataset("voc-style", "test", root=tmp_path)
    assert ds.vocabulary.multilabel
    samples = {s.id: s for s in ds}
    assert samples["a"].labels == frozenset({0, 1})
    assert len(samples["a"].labels) == 2


def test_duplicate_labels_collapse(tmp_path):
    _write_voc_style(tmp_path, [("a", ["dog", "dog"]), ("b", ["cat", "person"])])
    ds = load_dataset("voc-style", "test", root=tmp_path)
    samples = {s.id: s for s in ds}
    assert samples["a"].labels == frozenset({1})


def test_empty_split_dir(tmp_path):
    (tmp_path / "test").mkdir()
    (tmp_path / "classes.txt").write_text("a\nb\n")
    ds = load_dataset("voc-style", "test", root=tmp_path)
    assert len(list(ds)) == 0


def test_missing_root_is_fatal(tmp_path):
    with pytest.raises(ConfigError):
        load_dataset("voc-style", "test", root=tmp_path / "nope")


def test_corrupt_image_skipped(tmp_path, caplog):
    _write_voc_style(tmp_path, [("good", ["dog"])])
    (tmp_path / "test" / "bad.png").write_bytes(b"not a png")
    (tmp_path / "test" / "bad.json").write_text(json.dumps({"labels": ["dog"]}))
    ds = load_dataset("voc-style", "test", root=tmp_path)
    samples = list(ds)
    assert [s.id for s in samples] == ["good"]
    assert ds.skipped == 1


def test_unknown_label_name_skipped(tmp_path):
    _write_voc_style(tmp_path, [("a", ["zebra"]), ("b", ["dog"])])
    ds = load_dataset("voc-style", "test", root=tmp_path)
    assert [s.id for s in ds] == ["b"]
    assert ds.skipped == 1


def test_preprocess_resizes_to_224():
    sample = Sample(image=torch.rand(3, 32, 32), labels=frozenset({0}), id="x")
    out = preprocess(sample)
    assert out.image.shape == (3, 224, 224)
    assert out.image.min() >= 0 and out.image.max() <= 1


def test_preprocess_identity_at_target_size():
    image = torch.rand(3, 224, 224)
    sample = Sample(image=image, labels=frozenset({0}), id="x")
    out = preprocess(sample)
    assert torch.equal(out.image, image)


def test_preprocess_constant_field():
    sample = Sample(
        image=torch.full((3, 32, 32), 0.37), labels=frozenset({0}), id="x"
    )
    out = preprocess(sample, target_size=96)
    assert torch.allclose(out.image, torch.full((3, 96, 96), 0.37), atol=1e-6)


def test_preprocess_rejects_wrong_channels():
    sample = Sample.__new__(Sample)
    sample.image = torch.rand(1, 32, 32)
    sample.labels = frozenset({0})
    sample.id = "x"
    with pytest.raises(ValueError, match="unsupported channel count"):
        preprocess(sample)


def test_batch_sizes_and_coverage(fixture_train):
    # 10 samples, batch 4 -> sizes [4, 4, 2]
    subset = load_dataset("synthetic-fixture", "train", seed=0)
    subset._records = subset._records[:10]
    batches = list(batch_iter(subset, 4))
    assert [len(b) for b in batches] == [4, 4, 2]
    seen = [i for b in batches for i in b.ids]
    assert sorted(seen) == sorted(subset.record_ids())


def test_batch_iter_seed_determinism(fixture_train):
    ids_a = [i for b in batch_iter(fixture_train, 4, shuffle=True, seed=7) for i in b.ids]
    ids_b = [i for b in batch_iter(fixture_train, 4, shuffle=True, seed=7) for i in b.ids]
    ids_c = [i for b in batch_iter(fixture_train, 4, shuffle=True, seed=8) for i in b.ids]
    assert ids_a == ids_b
    assert ids_a != ids_c


def test_batch_iter_no_shuffle_preserves_order(fixture_train):
    ids = [i for b in batch_iter(fixture_train, 8) for i in b.ids]
    assert ids == fixture_train.record_ids()


def test_batch_pixels_in_unit_range(fixture_train):
    for batch in batch_iter(fixture_train, 16, target_size=64):
        assert batch.images.min() >= 0 and batch.images.max() <= 1


def test_ingest_fixture_roundtrip(tmp_path):
    ingest_fixture(tmp_path, seed=5)
    ondisk = load_dataset("fixture-ondisk", "train", root=tmp_path)
    generated = list(load_dataset("synthetic-fixture", "train", seed=5))
    loaded = {s.id: s for s in ondisk}
    assert len(loaded) == len(generated) == 64
    for ref in generated:
        got = loaded[ref.id]
        assert got.labels == ref.labels
        # PNG round-trip quantizes to 8 bits
        assert (got.image - ref.image).abs().max() <= 0.5 / 255 + 1e-6
