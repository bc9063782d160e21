"""Image-text embedding guidance.

Encodes pretext-templated class labels and images into a shared 512-dim
space and selects, per image, the text embedding least cosine-similar to the
image embedding. The backbone is a frozen, pluggable encoder pair: the
default expects an external CLIP ViT-B/16; the fixture pair is a seeded
random frozen projection with the same contract, so everything runs without
model downloads.
"""

import hashlib
import itertools
import logging
import weakref
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn

from .common import DegenerateEmbeddingError, EncoderUnavailableError, substream_seed
from .data import LabelVocabulary

logger = logging.getLogger(__name__)

EMBED_DIM = 512


@dataclass(frozen=True)
class PromptTemplate:
    """A pretext string with {label} (or {label1}/{label2}) placeholders."""

    template: str

    def __post_init__(self):
        if self.arity == 0:
            raise ValueError(
                f"template must contain {{label}} or {{label1}}/{{label2}}: {self.template!r}"
            )

    @property
    def arity(self) -> int:
        if "{label1}" in self.template and "{label2}" in self.template:
            return 2
        if "{label}" in self.template:
            return 1
        return 0

    def render(self, labels: Tuple[str, ...]) -> str:
        if len(labels) != self.arity:
            raise ValueError(f"template arity {self.arity}, got {len(labels)} labels")
        if self.arity == 1:
            text = self.template.replace("{label}", labels[0])
        else:
            text = self.template.replace("{label1}", labels[0]).replace(
                "{label2}", labels[1]
            )
        if "{" in text or "}" in text:
            raise ValueError(f"unfilled placeholder in prompt: {text!r}")
        return text


@dataclass
class PromptSet:
    """Expanded prompts with their unit-normalized embedding matrix."""

    prompts: list
    embeddings: torch.Tensor
    source_labels: list

    def __post_init__(self):
        if len(self.prompts) < 1:
            raise ValueError("prompt set must be non-empty")
        if not torch.isfinite(self.embeddings).all():
            raise ValueError("prompt embeddings contain non-finite entries")
        norms = self.embeddings.norm(dim=1)
        if not torch.allclose(norms, torch.ones_like(norms), atol=1e-5):
            raise ValueError("prompt embedding rows must be unit-normalized")

    def __len__(self) -> int:
        return len(self.prompts)


def expand_label_tuples(
    vocab: LabelVocabulary, arity: int, pair_limit: Optional[int] = None
) -> list:
    """Label tuples to template: singletons, or all ordered distinct pairs.

    The two-label pairing rule is capped at ``pair_limit`` tuples (taken in
    lexicographic order of class indices) to keep prompt sets bounded.
    """
    if arity == 1:
        tuples = [(c,) for c in vocab.classes]
    else:
        tuples = [
            (a, b) for a, b in itertools.permutations(vocab.classes, 2)
        ]
    if pair_limit is not None:
        tuples = tuples[:pair_limit]
    return tuples


def _token_vector(token: str, seed: int, dim: int) -> np.ndarray:
    digest = hashlib.sha256(f"{seed}/{token}".encode()).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "big"))
    return rng.standard_normal(dim).astype(np.float32)


class FixtureTextEncoder:
    """Seeded random frozen text encoder with the CLIP text contract.

    Each token maps to a fixed random vector; a prompt embeds as the
    position-weighted token sum, unit-normalized. Deterministic across
    processes for a given seed.
    """

    def __init__(self, seed: int = 0, embed_dim: int = EMBED_DIM):
        self.seed = seed
        self.embed_dim = embed_dim
        self.calls = 0

    def encode_text(self, prompts: Sequence[str]) -> torch.Tensor:
        self.calls += 1
        rows = []
        for prompt in prompts:
            tokens = prompt.lower().split()
            acc = np.zeros(self.embed_dim, dtype=np.float64)
            for pos, token in enumerate(tokens):
                acc += (pos + 1) * _token_vector(token, self.seed, self.embed_dim)
            rows.append(acc)
        mat = torch.from_numpy(np.stack(rows)).float()
        return _normalize_rows(mat)


class FixtureImageEncoder(nn.Module):
    """Seeded random frozen CNN with the CLIP image contract."""

    def __init__(self, seed: int = 0, embed_dim: int = EMBED_DIM, image_size: int = 224):
        super().__init__()
        self.embed_dim = embed_dim
        self.image_size = image_size
        self.calls = 0
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.AdaptiveAvgPool2d(4),
            nn.Flatten(),
            nn.Linear(64 * 16, embed_dim),
        )
        seeded_init(self, substream_seed(seed, "fixture-image-encoder"))
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        self.calls += 1
        if images.shape[-2:] != (self.image_size, self.image_size):
            raise ValueError(
                f"image encoder expects {self.image_size}x{self.image_size} input, "
                f"got {tuple(images.shape[-2:])}"
            )
        with torch.no_grad():
            out = self.net(images.float())
        return _normalize_rows(out)


def seeded_init(module: nn.Module, seed: int) -> None:
    """Fan-in-scaled normal init for every weight, zeros for biases, seeded."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            fan_in = m.weight.shape[1] * (
                m.weight.shape[2] * m.weight.shape[3] if m.weight.ndim == 4 else 1
            )
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = m.weight.shape[0] * m.weight.shape[2] * m.weight.shape[3]
            std = (2.0 / max(fan_in, 1)) ** 0.5
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.InstanceNorm2d) and m.affine:
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


def load_encoders(
    backbone: str = "vit-b-16",
    fixture: bool = False,
    seed: int = 0,
    image_size: int = 224,
):
    """Return a frozen (text_encoder, image_encoder) pair.

    ``fixture=True`` selects the seeded random pair. Otherwise an installed
    ``open_clip`` with pretrained ViT-B/16 weights is required.
    """
    if fixture:
        return (
            FixtureTextEncoder(seed=substream_seed(seed, "fixture-text-encoder")),
            FixtureImageEncoder(seed=seed, image_size=image_size),
        )
    try:
        import open_clip  # noqa: F401
    except ImportError:
        raise EncoderUnavailableError(
            f"backbone {backbone!r} needs the open_clip package and pretrained "
            "weights; install open-clip-torch and re-run, or set clip.fixture=true "
            "for the download-free fixture encoders"
        ) from None
    return _load_open_clip(backbone, image_size)


def _load_open_clip(backbone: str, image_size: int):
    import open_clip

    arch = {"vit-b-16": "ViT-B-16"}.get(backbone, backbone)
    model, _, _ = open_clip.create_model_and_transforms(arch, pretrained="openai")
    tokenizer = open_clip.get_tokenizer(arch)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)

    class _Text:
        calls = 0

        def encode_text(self, prompts):
            self.calls += 1
            with torch.no_grad():
                emb = model.encode_text(tokenizer(list(prompts)))
            return _normalize_rows(emb.float())

    class _Image:
        calls = 0
        mean = torch.tensor([0.48145466, 0.4578275, 0.40821073]).view(1, 3, 1, 1)
        std = torch.tensor([0.26862954, 0.26130258, 0.27577711]).view(1, 3, 1, 1)

        def encode_image(self, images):
            self.calls += 1
            if images.shape[-2:] != (image_size, image_size):
                raise ValueError(
                    f"image encoder expects {image_size}x{image_size} input"
                )
            with torch.no_grad():
                emb = model.encode_image((images - self.mean) / self.std)
            return _normalize_rows(emb.float())

    return _Text(), _Image()


def _normalize_rows(mat: torch.Tensor) -> torch.Tensor:
    norms = mat.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise DegenerateEmbeddingError("zero-norm embedding row")
    return mat / norms


_PROMPT_CACHE = weakref.WeakKeyDictionary()


def clear_prompt_cache() -> None:
    _PROMPT_CACHE.clear()


def encode_prompts(
    labels: Sequence[Tuple[str, ...]], template: PromptTemplate, encoder
) -> PromptSet:
    """Render and encode prompts, once per (encoder, template, labels) run.

    Repeated calls with the same arguments hit a cache, so the text encoder
    runs exactly once per configuration (observable via ``encoder.calls``).
    """
    if not labels:
        raise ValueError("labels must be non-empty")
    per_encoder = _PROMPT_CACHE.setdefault(encoder, {})
    key = (template.template, tuple(labels))
    if key in per_encoder:
        return per_encoder[key]
    prompts = [template.render(t) for t in labels]
    embeddings = encoder.encode_text(prompts)
    prompt_set = PromptSet(
        prompts=prompts, embeddings=embeddings, source_labels=list(labels)
    )
    per_encoder[key] = prompt_set
    return prompt_set


def encode_image(images: torch.Tensor, encoder) -> torch.Tensor:
    """Encode an image batch to unit-normalized NxK embeddings."""
    emb = encoder.encode_image(images)
    if not torch.isfinite(emb).all():
        raise ValueError("image embeddings contain non-finite entries")
    return emb


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> float:
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        raise DegenerateEmbeddingError("degenerate embedding: zero vector")
    return float(torch.dot(a.flatten(), b.flatten()) / (na * nb))


def select_least_similar(
    rho_img: torch.Tensor,
    prompts: PromptSet,
    m_candidates="all",
    seed: int = 0,
):
    """Pick the prompt embedding minimizing cosine similarity to the image.

    ``m_candidates`` limits the scan to a seeded random subset; "all" (the
    default) scans every prompt. Ties break toward the lowest index.
    Returns (embedding, index into the prompt set).
    """
    total = len(prompts)
    if m_candidates == "all" or m_candidates >= total:
        candidate_idx = np.arange(total)
    else:
        if m_candidates < 1:
            raise ValueError("m_candidates must be >= 1")
        candidate_idx = np.sort(
            np.random.default_rng(seed).choice(total, size=m_candidates, replace=False)
        )
    norm = rho_img.norm()
    if norm == 0:
        raise DegenerateEmbeddingError("degenerate embedding: zero image vector")
    sims = prompts.embeddings[candidate_idx] @ (rho_img / norm)
    best = int(candidate_idx[int(torch.argmin(sims))])
    return prompts.embeddings[best], best


def select_least_similar_batch(
    rho_imgs: torch.Tensor,
    prompts: PromptSet,
    m_candidates="all",
    seed: int = 0,
):
    """Per-row least-similar selection; returns (NxK embeddings, indices)."""
    picks, indices = [], []
    for i in range(len(rho_imgs)):
        emb, idx = select_least_similar(
            rho_imgs[i], prompts, m_candidates=m_candidates, seed=seed + i
        )
        picks.append(emb)
        indices.append(idx)
    return torch.stack(picks), indices
