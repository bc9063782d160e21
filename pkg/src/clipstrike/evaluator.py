"""Attack evaluation: Hamming score, fooling rate, SSIM, and the
surrogate-to-victim transfer matrix (white-box and black-box).

Hamming score is the per-sample intersection-over-union of true and
predicted label sets, averaged and expressed as a percentage; it reduces to
plain accuracy for single-label data. Fooling rate is the clean-minus-
perturbed Hamming score difference. SSIM uses the standard single-scale
form with an 11x11 Gaussian window (sigma 1.5) over valid positions,
averaged across channels.
"""

import csv
import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .common import ClipstrikeError
from .data import Dataset, ImageBatch, batch_iter
from .generator import PerturbationGenerator, compose_adversarial
from .surrogate import NormalizedModel

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class Prediction:
    """Per-class scores and the decoded label set."""

    scores: torch.Tensor
    labels: frozenset


def decode_predictions(
    scores: torch.Tensor, multilabel: bool, threshold: float = 0.5
) -> list:
    """Argmax for single-label models; sigmoid >= threshold for multi-label."""
    if multilabel:
        probs = torch.sigmoid(scores)
        return [
            frozenset(torch.nonzero(row >= threshold).flatten().tolist())
            for row in probs
        ]
    return [frozenset({int(row.argmax())}) for row in scores]


def hamming_score(
    true_sets: Sequence,
    pred_sets: Sequence,
    method: str = "iou",
    num_classes: Optional[int] = None,
) -> float:
    """Label-set agreement as a percentage.

    ``iou`` (default): per-sample |Y ∩ Yhat| / |Y ∪ Yhat|, averaged; this
    reduces to accuracy for single-label data. ``one-minus-loss`` is the
    1 - HammingLoss variant over the full class universe (comparison only;
    requires ``num_classes``).
    """
    if len(true_sets) == 0:
        raise ValueError("empty evaluation set")
    if len(true_sets) != len(pred_sets):
        raise ValueError("label set lists differ in length")
    scores = []
    for truth, pred in zip(true_sets, pred_sets):
        if len(truth) == 0:
            raise ValueError("true label set must be non-empty")
        if method == "iou":
            scores.append(len(truth & pred) / len(truth | pred))
        elif method == "one-minus-loss":
            if num_classes is None:
                raise ValueError("method 'one-minus-loss' requires num_classes")
            scores.append(1.0 - len(truth ^ pred) / num_classes)
        else:
            raise ValueError(f"unknown hamming method {method!r}")
    return 100.0 * sum(scores) / len(scores)


def fooling_rate(hs_raw: float, hs_perturbed: float) -> float:
    """Clean-minus-perturbed Hamming score, signed."""
    if not (0 <= hs_raw <= 100 and 0 <= hs_perturbed <= 100):
        raise ValueError("hamming scores must lie in [0,100]")
    return hs_raw - hs_perturbed


def _gaussian_window(size: int, sigma: float, dtype, device) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype, device=device) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    kernel = g[:, None] * g[None, :]
    return kernel / kernel.sum()


def ssim(
    a: torch.Tensor,
    b: torch.Tensor,
    window_size: int = SSIM_WINDOW,
    sigma: float = SSIM_SIGMA,
    value_range: float = 1.0,
) -> float:
    """Single-scale SSIM between two images (CxHxW or HxW), in [-1, 1]."""
    values = ssim_batch(
        a.unsqueeze(0), b.unsqueeze(0), window_size=window_size,
        sigma=sigma, value_range=value_range,
    )
    return float(values[0])


def ssim_batch(
    a: torch.Tensor,
    b: torch.Tensor,
    window_size: int = SSIM_WINDOW,
    sigma: float = SSIM_SIGMA,
    value_range: float = 1.0,
) -> torch.Tensor:
    """Per-pair SSIM for NxCxHxW batches; channels and positions averaged."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim == 3:
        a, b = a.unsqueeze(1), b.unsqueeze(1)
    if a.ndim != 4:
        raise ValueError("expected NxCxHxW or NxHxW inputs")
    channels = a.shape[1]
    window = _gaussian_window(window_size, sigma, a.dtype, a.device)
    window = window.expand(channels, 1, window_size, window_size).contiguous()

    # valid positions only: windows fully inside the image
    mu_a = F.conv2d(a, window, groups=channels)
    mu_b = F.conv2d(b, window, groups=channels)
    sigma_a = F.conv2d(a * a, window, groups=channels) - mu_a * mu_a
    sigma_b = F.conv2d(b * b, window, groups=channels) - mu_b * mu_b
    sigma_ab = F.conv2d(a * b, window, groups=channels) - mu_a * mu_b

    c1 = (SSIM_K1 * value_range) ** 2
    c2 = (SSIM_K2 * value_range) ** 2
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * sigma_ab + c2)) / (
        (mu_a * mu_a + mu_b * mu_b + c1) * (sigma_a + sigma_b + c2)
    )
    return ssim_map.mean(dim=(1, 2, 3))


class VictimClassifier:
    """A frozen classifier handle evaluated against attacks."""

    def __init__(self, name: str, model: NormalizedModel, multilabel: bool,
                 threshold: float = 0.5):
        self.name = name
        self.model = model.freeze()
        self.multilabel = multilabel
        self.threshold = threshold

    def predict(self, images: torch.Tensor) -> list:
        with torch.no_grad():
            scores = self.model(images)
        return decode_predictions(scores, self.multilabel, self.threshold)


class IdentityAttack:
    """No-op attack; the sanity floor for every metric."""

    name = "identity"

    def perturb(self, batch: ImageBatch) -> torch.Tensor:
        return batch.images


class GeneratorAttack:
    """Apply a trained perturbation generator."""

    def __init__(self, generator: PerturbationGenerator, gating: bool = True,
                 name: str = "generator"):
        self.generator = generator.eval()
        self.gating = gating
        self.name = name

    def perturb(self, batch: ImageBatch) -> torch.Tensor:
        with torch.no_grad():
            out = self.generator(batch.images)
        return compose_adversarial(batch.images, out, gating=self.gating)


@dataclass
class EvalRow:
    surrogate: str
    attack: str
    victim: str
    hamming_raw: float = math.nan
    hamming_perturbed: float = math.nan
    fooling_rate: float = math.nan
    mean_ssim: float = math.nan
    n_samples: int = 0
    status: str = "ok"
    error: str = ""


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    config_hash: str = ""

    def validate(self) -> None:
        for row in self.rows:
            if row.status != "ok":
                continue
            if not (0 <= row.hamming_raw <= 100 and 0 <= row.hamming_perturbed <= 100):
                raise ClipstrikeError(f"hamming out of range in row {row}")
            if row.fooling_rate != row.hamming_raw - row.hamming_perturbed:
                raise ClipstrikeError(f"fooling rate inconsistent in row {row}")
            if not (0 <= row.mean_ssim <= 1):
                raise ClipstrikeError(f"mean ssim out of range in row {row}")

    def to_json(self, path: Path) -> None:
        payload = {"config_hash": self.config_hash, "rows": [asdict(r) for r in self.rows]}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True))

    def to_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["surrogate", "attack", "victim", "hamming_raw", "hamming_perturbed",
                 "fooling_rate", "mean_ssim", "n_samples", "status", "error"]
            )
            for r in self.rows:
                writer.writerow(
                    [r.surrogate, r.attack, r.victim, r.hamming_raw,
                     r.hamming_perturbed, r.fooling_rate, r.mean_ssim,
                     r.n_samples, r.status, r.error]
                )


def evaluate_matrix(
    attack,
    victims: Sequence,
    dataset: Dataset,
    batch_size: int = 8,
    target_size: int = 224,
    surrogate_name: str = "",
    config_hash: str = "",
) -> EvalReport:
    """Run one attack against each victim and collect metric rows.

    ``victims`` holds VictimClassifier instances or (name, builder) pairs;
    a victim whose builder raises is reported as a failed row while the
    rest proceed.
    """
    report = EvalReport(config_hash=config_hash)
    for entry in victims:
        if isinstance(entry, VictimClassifier):
            victim = entry
        else:
            name, builder = entry
            try:
                victim = builder()
            except Exception as exc:  # deliberate: isolate victim failures
                logger.warning("victim %s failed to load: %s", name, exc)
                report.rows.append(
                    EvalRow(surrogate=surrogate_name, attack=attack.name,
                            victim=name, status="failed", error=str(exc))
                )
                continue
        report.rows.append(
            _evaluate_one(attack, victim, dataset, batch_size, target_size, surrogate_name)
        )
    report.validate()
    return report


def _evaluate_one(
    attack, victim: VictimClassifier, dataset: Dataset,
    batch_size: int, target_size: int, surrogate_name: str,
) -> EvalRow:
    truths, preds_raw, preds_adv, ssim_values = [], [], [], []
    for batch in batch_iter(dataset, batch_size, shuffle=False, target_size=target_size):
        adversarial = attack.perturb(batch)
        truths.extend(batch.labels)
        preds_raw.extend(victim.predict(batch.images))
        preds_adv.extend(victim.predict(adversarial))
        ssim_values.extend(ssim_batch(batch.images, adversarial).tolist())
    hs_raw = hamming_score(truths, preds_raw)
    hs_adv = hamming_score(truths, preds_adv)
    return EvalRow(
        surrogate=surrogate_name,
        attack=attack.name,
        victim=victim.name,
        hamming_raw=hs_raw,
        hamming_perturbed=hs_adv,
        fooling_rate=fooling_rate(hs_raw, hs_adv),
        mean_ssim=float(sum(ssim_values) / len(ssim_values)),
        n_samples=len(truths),
    )


def ablate_prompts(templates: Sequence, run_template) -> list:
    """Train + evaluate once per prompt template, identical otherwise.

    ``run_template(template) -> (hamming_score, config_hash)`` is supplied
    by the orchestration layer. Returns (template, HS, hash) rows sorted by
    HS ascending.
    """
    rows = []
    for template in templates:
        hs, cfg_hash = run_template(template)
        rows.append((template.template, hs, cfg_hash))
    return sorted(rows, key=lambda r: r[1])


def export_image_grids(
    dataset: Dataset,
    generator: PerturbationGenerator,
    out_dir: Path,
    gating: bool = True,
    target_size: int = 224,
    limit: int = 8,
) -> list:
    """Write side-by-side raw / perturbed / saliency PNG panels."""
    from .generator import minmax_scale

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    exported = 0
    for batch in batch_iter(dataset, 1, shuffle=False, target_size=target_size):
        if exported >= limit:
            break
        with torch.no_grad():
            out = generator(batch.images)
        adversarial = compose_adversarial(batch.images, out, gating=gating)
        saliency = minmax_scale(out.saliency).expand(-1, 3, -1, -1)
        panel = torch.cat([batch.images, adversarial, saliency], dim=3)[0]
        arr = (panel.clamp(0, 1).numpy() * 255).round().astype(np.uint8)
        path = out_dir / f"grid_{batch.ids[0]}.png"
        Image.fromarray(arr.transpose(1, 2, 0)).save(path)
        paths.append(path)
        exported += 1
    return paths
