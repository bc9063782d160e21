import numpy as np
import pytest
import torch

from clipstrike.common import DegenerateEmbeddingError
from clipstrike.clip_guidance import (
    FixtureImageEncoder,
    FixtureTextEncoder,
    PromptSet,
    PromptTemplate,
    cosine_similarity,
    encode_image,
    encode_prompts,
    expand_label_tuples,
    select_least_similar,
    select_least_similar_batch,
)
from clipstrike.data import LabelVocabulary

from oracles import least_similar_oracle


def test_template_rendering():
    template = PromptTemplate("a photo of a {label1} and {label2}")
    assert template.render(("dog", "person")) == "a photo of a dog and person"
    single = PromptTemplate("a photo of a {label}")
    assert single.render(("dog",)) == "a photo of a dog"


def test_template_requires_placeholder():
    with pytest.raises(ValueError):
        PromptTemplate("no placeholders here")
    with pytest.raises(ValueError):
        PromptTemplate("a photo of a {label}").render(("a", "b"))


def test_expand_label_tuples_pairs_and_cap():
    vocab = LabelVocabulary(classes=("a", "b", "c"), multilabel=True)
    pairs = expand_label_tuples(vocab, 2)
    assert len(pairs) == 6  # ordered distinct pairs
    assert ("a", "b") in pairs and ("b", "a") in pairs
    assert expand_label_tuples(vocab, 2, pair_limit=4) == pairs[:4]
    assert expand_label_tuples(vocab, 1) == [("a",), ("b",), ("c",)]


def test_encode_prompts_cardinality_and_cache():
    encoder = FixtureTextEncoder(seed=3)
    labels = [(f"class{i}",) for i in range(10)]
    template = PromptTemplate("a photo of a {label}")
    ps1 = encode_prompts(labels, template, encoder)
    ps2 = encode_prompts(labels, template, encoder)
    assert len(ps1) == 10
    assert ps1.embeddings.shape == (10, 512)
    assert ps2 is ps1
    assert encoder.calls == 1


def test_text_encoder_determinism():
    a = FixtureTextEncoder(seed=3).encode_text(["a photo of a dog"])
    b = FixtureTextEncoder(seed=3).encode_text(["a photo of a dog"])
    c = FixtureTextEncoder(seed=4).encode_text(["a photo of a dog"])
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_text_encoder_is_order_sensitive():
    encoder = FixtureTextEncoder(seed=3)
    mat = encoder.encode_text(["dog and person", "person and dog"])
    assert not torch.allclose(mat[0], mat[1])


def test_encode_image_contract(fixture_encoders, fixture_batch):
    _, image_encoder = fixture_encoders
    emb = encode_image(fixture_batch.images, image_encoder)
    assert emb.shape == (4, 512)
    norms = emb.norm(dim=1)
    assert torch.allclose(norms, torch.ones(4), atol=1e-5)

    doubled = torch.cat([fixture_batch.images[:1], fixture_batch.images[:1]])
    pair = encode_image(doubled, image_encoder)
    assert torch.equal(pair[0], pair[1])


def test_encode_image_resolution_check():
    encoder = FixtureImageEncoder(seed=0, image_size=64)
    with pytest.raises(ValueError, match="64x64"):
        encoder.encode_image(torch.rand(1, 3, 32, 32))


def test_cosine_similarity_basics():
    e1 = torch.tensor([1.0, 0.0])
    e2 = torch.tensor([0.0, 1.0])
    assert cosine_similarity(e1, e1) == pytest.approx(1.0)
    assert cosine_similarity(e1, e2) == pytest.approx(0.0)
    assert cosine_similarity(e1, -e1) == pytest.approx(-1.0)
    assert cosine_similarity(5 * e1, 0.3 * e1) == pytest.approx(1.0)
    with pytest.raises(DegenerateEmbeddingError):
        cosine_similarity(e1, torch.zeros(2))


def _prompt_set(rows):
    mat = torch.tensor(rows, dtype=torch.float32)
    mat = mat / mat.norm(dim=1, keepdim=True)
    return PromptSet(
        prompts=[f"p{i}" for i in range(len(rows))],
        embeddings=mat,
        source_labels=[(f"p{i}",) for i in range(len(rows))],
    )


def test_select_least_similar_antipodal():
    prompts = _prompt_set([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    emb, idx = select_least_similar(torch.tensor([1.0, 0.0]), prompts)
    assert idx == 2
    assert torch.allclose(emb, torch.tensor([-1.0, 0.0]))


def test_select_least_similar_single_candidate():
    prompts = _prompt_set([[0.6, 0.8]])
    _, idx = select_least_similar(torch.tensor([1.0, 0.0]), prompts)
    assert idx == 0


def test_select_least_similar_ties_take_lowest_index():
    # both orthogonal candidates tie at cosine 0, below the parallel one
    prompts = _prompt_set([[0.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    _, idx = select_least_similar(torch.tensor([1.0, 0.0]), prompts)
    assert idx == 0


def test_select_matches_bruteforce_and_scaling_invariance():
    rng = np.random.default_rng(42)
    for _ in range(200):
        m, k = int(rng.integers(2, 12)), int(rng.integers(2, 8))
        mat = rng.standard_normal((m, k))
        prompts = _prompt_set(mat.tolist())
        rho = torch.tensor(rng.standard_normal(k), dtype=torch.float32)
        _, idx = select_least_similar(rho, prompts, m_candidates="all")
        assert idx == least_similar_oracle(rho.numpy(), prompts.embeddings.numpy())
        scale = float(rng.uniform(0.01, 100.0))
        _, idx_scaled = select_least_similar(scale * rho, prompts)
        assert idx_scaled == idx


def test_select_subset_is_seeded():
    prompts = _prompt_set(np.random.default_rng(0).standard_normal((10, 4)).tolist())
    rho = torch.tensor([1.0, 0.0, 0.0, 0.0])
    _, a = select_least_similar(rho, prompts, m_candidates=3, seed=5)
    _, b = select_least_similar(rho, prompts, m_candidates=3, seed=5)
    assert a == b


def test_batch_selection_matches_single(fixture_prompts):
    rng = np.random.default_rng(1)
    rho = torch.tensor(rng.standard_normal((3, 512)), dtype=torch.float32)
    picked, indices = select_least_similar_batch(rho, fixture_prompts)
    for i in range(3):
        _, idx = select_least_similar(rho[i], fixture_prompts)
        assert indices[i] == idx
        assert torch.equal(picked[i], fixture_prompts.embeddings[idx])
