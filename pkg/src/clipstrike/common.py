"""Shared plumbing: error types, seed fan-out, hashing."""

import hashlib
import json

import torch


class ClipstrikeError(Exception):
    """Base class for all package errors."""


class ConfigError(ClipstrikeError):
    """Bad user input or configuration (CLI exit code 1)."""


class EncoderUnavailableError(ClipstrikeError):
    """A requested encoder backbone could not be loaded."""


class DegenerateEmbeddingError(ClipstrikeError):
    """A zero (or effectively zero) vector where a direction is required."""


class NonFiniteLossError(ClipstrikeError):
    """A loss term evaluated to NaN or infinity."""

    def __init__(self, term: str, value: float):
        self.term = term
        self.value = value
        super().__init__(f"loss term '{term}' is non-finite: {value}")


class CheckpointError(ClipstrikeError):
    """Checkpoint is corrupt or incompatible with the live configuration."""


def substream_seed(master: int, name: str) -> int:
    """Derive a named, stable child seed from a master seed.

    Every randomized component draws its seed through this so a single
    --seed reproduces the whole run while components stay decorrelated.
    """
    digest = hashlib.sha256(f"{master}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big") % (2**31 - 1)


def stable_hash(obj) -> str:
    """Short hex digest of a JSON-serializable object, key-order independent."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def module_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over all parameters and buffers, keyed by name.

    Used to assert the frozen-model contract: surrogate and text/image
    encoders must be bit-identical before and after training.
    """
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def project_linf_exact(adv: torch.Tensor, ref: torch.Tensor, bound) -> torch.Tensor:
    """Force ``(adv - ref).abs() <= bound`` to hold bitwise after recomputation.

    Plain ``ref + delta`` with ``|delta| <= bound`` rounds, so the recomputed
    difference can exceed the bound by one ulp. Violating pixels are nudged
    toward ``ref`` with nextafter until the recomputed difference respects the
    bound exactly. The correction is applied straight-through so gradients are
    those of the uncorrected tensor.

    ``bound`` may be a scalar or broadcastable tensor (per-sample bounds).
    """
    if not torch.is_tensor(bound):
        bound = torch.as_tensor(bound, dtype=adv.dtype)
    lo = torch.maximum(adv, ref - bound)
    hi = torch.minimum(lo, ref + bound)
    fixed = hi
    while True:
        over = (fixed - ref).abs() > bound
        if not bool(over.any()):
            break
        fixed = torch.where(over, torch.nextafter(fixed, ref), fixed)
    if adv.requires_grad:
        return adv + (fixed - adv).detach()
    return fixed
