"""Latent-space design optimization with a trained Cliqueformer.

Dataset samples are encoded, their latents are pushed up the surrogate with
AdamW (whose decoupled weight decay shrinks them toward the origin, where
the clique marginals have mass) and the results are decoded.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .model import Cliqueformer
from .numerics import OptimizerState, adamw_update, make_rng, reparam_sample, split_seeds, torch_generator
from .tasks import DISCRETE, Dataset
from .training import design_tensor


@dataclass
class DesignOptConfig:
    batch_size: int = 1000
    steps: int = 50
    lr: float = 3e-4
    weight_decay: float = 0.5
    decode: str = "argmax"  # or "sample" (discrete designs only)
    explicit_decay: bool = False  # multiply by (1 - wd) before each plain Adam step instead
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.decode not in ("argmax", "sample"):
            raise ValueError("decode must be 'argmax' or 'sample'")


@dataclass
class DesignBatch:
    latents: torch.Tensor
    initial_latents: torch.Tensor
    rows: np.ndarray
    trace: list[float] = field(default_factory=list)
    designs: np.ndarray | None = None


def init_designs(model: Cliqueformer, dataset: Dataset, cfg: DesignOptConfig) -> DesignBatch:
    """Encode ``batch_size`` dataset rows drawn with replacement (eval mode)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    row_seed, noise_seed, _ = split_seeds(cfg.seed, 3)
    rows = make_rng(row_seed).integers(0, len(dataset), cfg.batch_size)
    dtype = next(model.parameters()).dtype
    model.eval()
    with torch.no_grad():
        q = model.encode(design_tensor(dataset, dtype)[torch.as_tensor(rows)])
        z = reparam_sample(q, torch_generator(noise_seed))
    return DesignBatch(latents=z.clone(), initial_latents=z.clone(), rows=rows)


def objective(model: Cliqueformer, Z: torch.Tensor) -> torch.Tensor:
    """Mean surrogate value over the rows of ``Z``."""
    return model.predict(Z).mean()


def ascend(
    Z: torch.Tensor,
    surrogate: Callable[[torch.Tensor], torch.Tensor],
    cfg: DesignOptConfig,
    trace: list | None = None,
) -> torch.Tensor:
    """Maximize ``surrogate`` row-wise from ``Z`` with AdamW; returns the new latents.

    Rows use their own predict-gradients (the sum, not the mean), so the
    trajectory does not depend on the batch size.
    """
    Z = Z.detach().clone()
    decay = 0.0 if cfg.explicit_decay else cfg.weight_decay
    state = OptimizerState(lr=cfg.lr, weight_decay=decay)
    for step in range(cfg.steps):
        if cfg.explicit_decay:
            Z.mul_(1.0 - cfg.weight_decay)
        Zg = Z.requires_grad_(True)
        values = surrogate(Zg)
        (grad,) = torch.autograd.grad(-values.sum(), Zg)
        Z = Zg.detach()
        adamw_update([Z], [grad], state)
        if not torch.isfinite(Z).all():
            raise FloatingPointError(f"non-finite latents at design step {step}")
        if trace is not None:
            trace.append(values.detach().mean().item())
    return Z


def decode_designs(model: Cliqueformer, Z: torch.Tensor, mode: str = "argmax", seed: int = 0) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        out = model.decode(Z)
    if model.config.modality != DISCRETE:
        return out.double().numpy()
    if mode == "sample":
        probs = torch.softmax(out.double(), -1)
        flat = torch.multinomial(probs.reshape(-1, probs.shape[-1]), 1, generator=torch_generator(seed))
        return flat.reshape(probs.shape[:-1]).numpy()
    return out.argmax(-1).numpy()


def optimize_designs(model: Cliqueformer, dataset: Dataset, cfg: DesignOptConfig) -> DesignBatch:
    batch = init_designs(model, dataset, cfg)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        batch.latents = ascend(batch.latents, model.predict, cfg, batch.trace)
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    batch.designs = decode_designs(model, batch.latents, cfg.decode, split_seeds(cfg.seed, 3)[2])
    return batch
