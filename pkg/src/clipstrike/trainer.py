"""Training loop: iterate batches, compute guided losses, update the
generator with AdamW, checkpoint, and keep everything reproducible.

Only the generator's weights ever change; the surrogate and the text/image
encoders are frozen. A fixed epoch budget realizes "until convergence",
with an optional plateau-based early stop.
"""

import hashlib
import json
import logging
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .common import CheckpointError, ClipstrikeError, NonFiniteLossError, substream_seed
from .clip_guidance import PromptSet, encode_image, select_least_similar_batch
from .data import Dataset, ImageBatch, batch_iter
from .generator import GeneratorConfig, PerturbationGenerator, compose_adversarial, minmax_scale
from .losses import LossBreakdown, LossWeights, contrastive_loss, frobenius_loss, norm_loss, total_loss
from .surrogate import FeatureExtractor

logger = logging.getLogger(__name__)

LOG_HEADER = "step,epoch,frobenius,norm,contrastive,total"


class TrainingAbortedError(ClipstrikeError):
    """Training stopped on a non-finite loss; the last checkpoint is kept."""


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    checkpoint_every: int = 1
    resume_from: Optional[Path] = None
    weight_decay: float = 0.01
    grad_clip: Optional[float] = None
    early_stop: bool = False
    plateau_epochs: int = 5
    plateau_tol: float = 1e-4

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainComponents:
    """Frozen collaborators plus the one trainable piece (the generator)."""

    generator: PerturbationGenerator
    generator_config: GeneratorConfig
    extractor: FeatureExtractor
    image_encoder: object
    prompts: PromptSet
    target_size: int = 224
    m_candidates: object = "all"


def train_step(
    components: TrainComponents,
    optimizer: torch.optim.Optimizer,
    batch: ImageBatch,
    weights: LossWeights,
    step_seed: int = 0,
    grad_clip: Optional[float] = None,
) -> LossBreakdown:
    """One generator update following the published training sequence."""
    gen = components.generator
    images = batch.images

    rho_img = encode_image(images, components.image_encoder)
    rho_min, _ = select_least_similar_batch(
        rho_img, components.prompts, m_candidates=components.m_candidates, seed=step_seed
    )
    with torch.no_grad():
        z = components.extractor.extract_midlevel(images)

    out = gen(images)
    adversarial = compose_adversarial(
        images, out, gating=components.generator_config.saliency_gating
    )
    z_prime = components.extractor.extract_midlevel(adversarial)

    m_scaled = minmax_scale(out.saliency)
    l_frob = frobenius_loss(m_scaled)
    l_norm = norm_loss(z, z_prime)
    l_contr = contrastive_loss(z, z_prime, rho_min, weights.mu)
    total, breakdown = total_loss(l_frob, l_norm, l_contr, weights)

    optimizer.zero_grad()
    total.backward()
    if grad_clip is not None:
        parameters = [p for group in optimizer.param_groups for p in group["params"]]
        torch.nn.utils.clip_grad_norm_(parameters, grad_clip)
    optimizer.step()
    return breakdown


def _to_numpy_tree(obj):
    if torch.is_tensor(obj):
        return {"__tensor__": True, "data": obj.detach().cpu().numpy()}
    if isinstance(obj, dict):
        return {k: _to_numpy_tree(obj[k]) for k in obj}
    if isinstance(obj, (list, tuple)):
        seq = [_to_numpy_tree(v) for v in obj]
        return seq if isinstance(obj, list) else tuple(seq)
    return obj


def _from_numpy_tree(obj):
    if isinstance(obj, dict):
        if obj.get("__tensor__") is True:
            return torch.from_numpy(np.array(obj["data"])).clone()
        return {k: _from_numpy_tree(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_from_numpy_tree(v) for v in obj]
    if isinstance(obj, tuple):
        return tuple(_from_numpy_tree(v) for v in obj)
    return obj


def save_checkpoint(
    path: Path,
    generator: PerturbationGenerator,
    optimizer: torch.optim.Optimizer,
    epoch: int,
    step: int,
    config_hash: str,
    seed: int,
    loss_tail,
) -> Path:
    """Write a checkpoint blob plus a JSON metadata sidecar.

    Serialization is deterministic: the same state always produces the same
    bytes, so save -> load -> save round-trips byte-identically.
    """
    path = Path(path)
    payload = {
        "epoch": epoch,
        "step": step,
        "theta": {k: v for k, v in sorted(_state_arrays(generator).items())},
        "optimizer": _to_numpy_tree(optimizer.state_dict()),
        "torch_rng": torch.get_rng_state().numpy(),
    }
    blob = pickle.dumps(payload, protocol=4)
    metadata = {
        "epoch": epoch,
        "epsilon": generator.config.epsilon,
        "config_hash": config_hash,
        "seed": seed,
        "loss_history_tail": [float(v) for v in loss_tail],
        "payload_sha256": hashlib.sha256(blob).hexdigest(),
    }
    path.write_bytes(blob)
    path.with_suffix(path.suffix + ".json").write_text(
        json.dumps(metadata, indent=2, sort_keys=True)
    )
    return path


def _state_arrays(module: torch.nn.Module) -> dict:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_checkpoint(
    path: Path,
    generator: PerturbationGenerator,
    optimizer: torch.optim.Optimizer,
    config_hash: str,
) -> dict:
    """Restore generator weights, optimizer moments, and RNG state exactly.

    Refuses to resume when the metadata was tampered with, when the live
    configuration hash differs, or when the epsilon budget disagrees.
    """
    path = Path(path)
    meta_path = path.with_suffix(path.suffix + ".json")
    if not path.is_file() or not meta_path.is_file():
        raise CheckpointError(f"checkpoint or metadata sidecar missing: {path}")
    blob = path.read_bytes()
    metadata = json.loads(meta_path.read_text())
    if hashlib.sha256(blob).hexdigest() != metadata.get("payload_sha256"):
        raise CheckpointError("checkpoint payload does not match metadata checksum")
    if metadata.get("config_hash") != config_hash:
        raise CheckpointError(
            "checkpoint was produced by a different configuration "
            f"({metadata.get('config_hash')} != {config_hash}); refusing to resume"
        )
    if abs(metadata.get("epsilon", -1.0) - generator.config.epsilon) > 1e-12:
        raise CheckpointError(
            f"checkpoint epsilon {metadata.get('epsilon')} != "
            f"live epsilon {generator.config.epsilon}; refusing to resume"
        )
    payload = pickle.loads(blob)
    state = {k: torch.from_numpy(np.array(v)).clone() for k, v in payload["theta"].items()}
    generator.load_state_dict(state)
    optimizer.load_state_dict(_from_numpy_tree(payload["optimizer"]))
    torch.set_rng_state(torch.from_numpy(np.array(payload["torch_rng"])))
    return {"epoch": payload["epoch"], "step": payload["step"], "metadata": metadata}


def train(
    config: TrainConfig,
    dataset: Dataset,
    components: TrainComponents,
    run_dir: Path,
    config_hash: str = "",
) -> Path:
    """Run the full training loop; returns the final checkpoint path."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    log_path = run_dir / "train_log.csv"

    gen = components.generator
    gen.train()
    optimizer = torch.optim.AdamW(
        gen.parameters(), lr=config.lr, weight_decay=config.weight_decay
    )

    start_epoch, step = 1, 0
    if config.resume_from is not None:
        restored = load_checkpoint(config.resume_from, gen, optimizer, config_hash)
        start_epoch = restored["epoch"] + 1
        step = restored["step"]
        logger.info("resumed from %s at epoch %d", config.resume_from, restored["epoch"])
    elif log_path.exists():
        log_path.unlink()

    if not log_path.exists():
        log_path.write_text(LOG_HEADER + "\n")

    epoch_means = []
    last_checkpoint = Path(config.resume_from) if config.resume_from else None
    loss_tail = []

    for epoch in range(start_epoch, config.epochs + 1):
        epoch_totals, log_lines = [], []
        batches = batch_iter(
            dataset,
            config.batch_size,
            shuffle=True,
            seed=substream_seed(config.seed, f"epoch-{epoch}"),
            target_size=components.target_size,
        )
        for batch in batches:
            step += 1
            try:
                breakdown = train_step(
                    components,
                    optimizer,
                    batch,
                    config.weights,
                    step_seed=substream_seed(config.seed, f"mcand-{step}"),
                    grad_clip=config.grad_clip,
                )
            except NonFiniteLossError as exc:
                _flush_log(log_path, log_lines)
                raise TrainingAbortedError(
                    f"aborting at step {step}: {exc}; last good checkpoint: "
                    f"{last_checkpoint}"
                ) from exc
            log_lines.append(
                f"{step},{epoch},{breakdown.frobenius!r},{breakdown.norm!r},"
                f"{breakdown.contrastive!r},{breakdown.total!r}"
            )
            epoch_totals.append(breakdown.total)
            loss_tail = (loss_tail + [breakdown.total])[-5:]
        _flush_log(log_path, log_lines)

        if epoch % config.checkpoint_every == 0 or epoch == config.epochs:
            last_checkpoint = save_checkpoint(
                run_dir / f"gen_epoch_{epoch}.ckpt",
                gen,
                optimizer,
                epoch,
                step,
                config_hash,
                config.seed,
                loss_tail,
            )
        epoch_means.append(float(np.mean(epoch_totals)) if epoch_totals else float("nan"))
        logger.info("epoch %d: mean total loss %.6f", epoch, epoch_means[-1])

        if config.early_stop and _plateaued(epoch_means, config):
            logger.info("early stop: loss plateau at epoch %d", epoch)
            break

    if last_checkpoint is None:
        last_checkpoint = save_checkpoint(
            run_dir / f"gen_epoch_{config.epochs}.ckpt",
            gen, optimizer, config.epochs, step, config_hash, config.seed, loss_tail,
        )
    return Path(last_checkpoint)


def _plateaued(epoch_means, config: TrainConfig) -> bool:
    window = config.plateau_epochs
    if len(epoch_means) < window + 1:
        return False
    reference = epoch_means[-window - 1]
    best_recent = min(epoch_means[-window:])
    improvement = (reference - best_recent) / max(abs(reference), 1e-12)
    return improvement < config.plateau_tol


def _flush_log(log_path: Path, lines) -> None:
    if not lines:
        return
    with open(log_path, "a") as fh:
        for line in lines:
            fh.write(line + "\n")
    lines.clear()
