"""Training objective and loop.

Per example the loss is

    warmup * KL(e(z_C | x) || N(0, I))  -  log d(x | z)  +  tau * (y - f(z))^2

with ``C`` one clique drawn uniformly at random and ``z`` a reparameterized
posterior sample.  ``y`` is standardized with the training-set mean and
standard deviation, which are stored on the model.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .fgm import CliqueLayout
from .model import Cliqueformer, CliqueformerConfig
from .numerics import (
    DiagonalGaussian,
    OptimizerState,
    adamw_update,
    categorical_recon_nll,
    gaussian_recon_nll,
    kl_elementwise,
    make_rng,
    reparam_sample,
    split_seeds,
    torch_generator,
)
from .tasks import CONTINUOUS, DISCRETE, Dataset

DTYPES = {"float32": torch.float32, "float64": torch.float64}


@dataclass
class TrainConfig:
    steps: int = 10_000
    batch_size: int = 128
    lr: float = 1e-4
    tau: float = 10.0
    warmup_steps: int = 1000
    vib_weight: float = 1.0  # 0 disables the bottleneck (No-VIB ablation)
    weight_decay: float = 0.01
    clip_norm: float | None = 10.0
    recon_std: float = 1.0  # fixed decoder standard deviation (continuous designs)
    lr_schedule: str = "constant"  # or "cosine": anneal to 0 over ``steps``
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.recon_std <= 0:
            raise ValueError("recon_std must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")


@dataclass
class TrainReport:
    vib: list[float] = field(default_factory=list)
    nll: list[float] = field(default_factory=list)
    mse: list[float] = field(default_factory=list)
    total: list[float] = field(default_factory=list)
    warmup: list[float] = field(default_factory=list)
    wall_clock: float = 0.0

    def __len__(self):
        return len(self.total)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "vib", "nll", "mse", "total"])
            for k, row in enumerate(zip(self.vib, self.nll, self.mse, self.total), 1):
                writer.writerow([k, *(repr(v) for v in row)])


class LossParts(NamedTuple):
    total: torch.Tensor
    vib: torch.Tensor
    nll: torch.Tensor
    mse: torch.Tensor


def warmup_coefficient(step: int, warmup_steps: int) -> float:
    if warmup_steps <= 0:
        return 1.0
    return min(1.0, max(step, 0) / warmup_steps)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "cosine" and cfg.steps > 0:
        return 0.5 * cfg.lr * (1.0 + np.cos(np.pi * step / cfg.steps))
    return cfg.lr


def sample_cliques(layout: CliqueLayout, n: int, generator: torch.Generator | None = None):
    """0-based clique ids drawn uniformly, one per example."""
    return torch.randint(layout.n_clique, (n,), generator=generator)


def vib_term(
    q: DiagonalGaussian,
    layout: CliqueLayout,
    generator: torch.Generator | None = None,
    clique_ids: torch.Tensor | None = None,
) -> torch.Tensor:
    """Per-example KL of one randomly drawn clique marginal from the standard normal."""
    if q.dim != layout.d_z:
        raise ValueError(f"posterior has dimension {q.dim}, layout expects {layout.d_z}")
    kl = kl_elementwise(q)
    squeeze = kl.dim() == 1
    if squeeze:
        kl = kl[None]
    if clique_ids is None:
        clique_ids = sample_cliques(layout, kl.shape[0], generator)
    index = torch.as_tensor(layout.index_matrix())[clique_ids]  # (B, d_clique)
    out = kl.gather(-1, index).sum(-1)
    return out[0] if squeeze else out


def recon_nll(model: Cliqueformer, x: torch.Tensor, z: torch.Tensor, std: float = 1.0) -> torch.Tensor:
    out = model.decode(z)
    if model.config.modality == DISCRETE:
        target = x if x.dim() == 3 else F.one_hot(x, model.config.vocab_size).to(out.dtype)
        return categorical_recon_nll(target, out)
    return gaussian_recon_nll(x, out, std)


def loss_clique(
    model: Cliqueformer,
    x: torch.Tensor,
    y: torch.Tensor,
    warmup_coeff: float = 1.0,
    tau: float = 10.0,
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
    clique_ids: torch.Tensor | None = None,
    recon_std: float = 1.0,
) -> LossParts:
    """Batch-averaged training loss; ``noise``/``clique_ids`` freeze the randomness."""
    if len(x) == 0:
        raise ValueError("empty batch")
    q = model.encode(x)
    z = reparam_sample(q, generator, noise)
    vib = vib_term(q, model.layout, generator, clique_ids)
    nll = recon_nll(model, x, z, recon_std)
    mse = (model.scale_targets(y) - model.predict(z)).pow(2)
    total = warmup_coeff * vib + nll + tau * mse
    return LossParts(total.mean(), vib.mean(), nll.mean(), mse.mean())


def design_tensor(dataset: Dataset, dtype=torch.float32) -> torch.Tensor:
    if dataset.modality == DISCRETE:
        return torch.as_tensor(dataset.designs, dtype=torch.long)
    return torch.as_tensor(dataset.designs, dtype=dtype)


def model_config_matches(dataset: Dataset, config: CliqueformerConfig) -> None:
    if dataset.modality != config.modality:
        raise ValueError(f"dataset is {dataset.modality} but the model expects {config.modality}")
    if dataset.designs.shape[1] != config.input_dim:
        raise ValueError(
            f"dataset designs have {dataset.designs.shape[1]} positions, model expects {config.input_dim}"
        )
    if config.modality == DISCRETE and dataset.vocab_size != config.vocab_size:
        raise ValueError("dataset and model vocabularies differ")


def train(
    dataset: Dataset,
    model_config: CliqueformerConfig,
    train_config: TrainConfig,
    log_every: int = 0,
) -> tuple[Cliqueformer, TrainReport]:
    """Fit a Cliqueformer with mini-batch AdamW; deterministic given the seed."""
    model_config_matches(dataset, model_config)
    init_seed, noise_seed, shuffle_seed = split_seeds(train_config.seed, 3)
    dtype = DTYPES[train_config.dtype]

    torch.manual_seed(init_seed)
    model = Cliqueformer(model_config).to(dtype)
    y_all = torch.as_tensor(dataset.scores, dtype=dtype)
    model.y_shift.fill_(y_all.mean())
    model.y_scale.fill_(y_all.std().clamp_min(1e-12) if len(y_all) > 1 else 1.0)
    x_all = design_tensor(dataset, dtype)

    gen = torch_generator(noise_seed)
    rng = make_rng(shuffle_seed)
    params = [p for p in model.parameters()]
    state = OptimizerState(lr=train_config.lr, weight_decay=train_config.weight_decay)
    report = TrainReport()
    batch = min(train_config.batch_size, len(dataset))
    order, cursor = rng.permutation(len(dataset)), 0
    start = time.perf_counter()
    model.train()
    for step in range(train_config.steps):
        if cursor + batch > len(order):
            order, cursor = rng.permutation(len(dataset)), 0
        rows = torch.as_tensor(order[cursor : cursor + batch])
        cursor += batch
        coeff = train_config.vib_weight * warmup_coefficient(step, train_config.warmup_steps)
        # dropout masks come from the global stream; reseed it per step for reproducibility
        torch.manual_seed(int(rng.integers(2**62)))
        parts = loss_clique(
            model, x_all[rows], y_all[rows], coeff, train_config.tau, gen, recon_std=train_config.recon_std
        )
        if not torch.isfinite(parts.total):
            raise FloatingPointError(
                f"non-finite loss at step {step}: vib={parts.vib.item()} "
                f"nll={parts.nll.item()} mse={parts.mse.item()}"
            )
        grads = torch.autograd.grad(parts.total, params)
        if train_config.clip_norm is not None:
            norm = torch.sqrt(sum(g.pow(2).sum() for g in grads))
            if norm > train_config.clip_norm:
                grads = [g * (train_config.clip_norm / norm) for g in grads]
        state.lr = learning_rate(train_config, step)
        adamw_update(params, grads, state)
        report.vib.append(parts.vib.item())
        report.nll.append(parts.nll.item())
        report.mse.append(parts.mse.item())
        report.total.append(parts.total.item())
        report.warmup.append(coeff)
        if log_every and (step + 1) % log_every == 0:
            print(
                f"step {step + 1}: total={np.mean(report.total[-log_every:]):.4f} "
                f"vib={np.mean(report.vib[-log_every:]):.4f} nll={np.mean(report.nll[-log_every:]):.4f} "
                f"mse={np.mean(report.mse[-log_every:]):.4f}",
                flush=True,
            )
    report.wall_clock = time.perf_counter() - start
    model.eval()
    return model, report
