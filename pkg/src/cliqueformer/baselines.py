"""Reference MBO methods: naive gradient ascent, RWR, COMs and a plain transformer.

Every method takes a :class:`~cliqueformer.tasks.Dataset` and returns
candidates in the dataset's own design format, so one evaluation harness
serves all of them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .model import Cliqueformer, CliqueformerConfig, Tokenizer, TransformerBlock, count_parameters, mlp
from .numerics import OptimizerState, adamw_update, make_rng, split_seeds, torch_generator
from .tasks import CONTINUOUS, DISCRETE, Dataset


@dataclass
class BaselineConfig:
    hidden: int = 256
    activation: str = "leaky_relu"
    train_steps: int = 2000
    batch_size: int = 128
    lr: float = 1e-3
    n_candidates: int = 1000
    design_steps: int = 100
    design_lr: float = 0.05
    # COMs
    alpha: float = 1.0
    inner_steps: int = 10
    inner_lr: float = 0.05
    # RWR
    beta: float | None = None  # defaults to 0.1 * (y_max - y_min)
    rwr_iters: int = 20
    rwr_samples: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.inner_steps < 0 or self.design_steps < 0:
            raise ValueError("step counts must be non-negative")
        if self.beta is not None and self.beta <= 0:
            raise ValueError("beta must be positive")


# ---------------------------------------------------------------------------
# design-space representation


def to_inputs(dataset: Dataset, rows=None) -> torch.Tensor:
    """Float design tensor: raw coordinates, or flattened one-hot rows for sequences."""
    designs = dataset.designs if rows is None else dataset.designs[rows]
    if dataset.modality == DISCRETE:
        return F.one_hot(torch.as_tensor(designs), dataset.vocab_size).double().flatten(1)
    return torch.as_tensor(designs, dtype=torch.float64)


def to_designs(x: torch.Tensor, dataset: Dataset) -> np.ndarray:
    if dataset.modality == DISCRETE:
        return x.view(len(x), -1, dataset.vocab_size).argmax(-1).numpy()
    return x.detach().double().numpy()


def project_simplex_rows(x: torch.Tensor, vocab_size: int) -> torch.Tensor:
    """Clamp at zero and renormalize each position's probability row."""
    rows = x.view(len(x), -1, vocab_size).clamp_min(0.0)
    sums = rows.sum(-1, keepdim=True)
    rows = torch.where(sums > 0, rows / sums.clamp_min(1e-12), torch.full_like(rows, 1.0 / vocab_size))
    return rows.flatten(1)


def gradient_ascent(surrogate, x0: torch.Tensor, steps: int, lr: float, dataset: Dataset) -> torch.Tensor:
    """Plain gradient ascent on ``surrogate`` (simplex-projected for sequences)."""
    x = x0.detach().clone()
    for step in range(steps):
        x.requires_grad_(True)
        with torch.enable_grad():
            (grad,) = torch.autograd.grad(surrogate(x).sum(), x)
        x = (x + lr * grad).detach()
        if dataset.modality == DISCRETE:
            x = project_simplex_rows(x, dataset.vocab_size)
        if not torch.isfinite(x).all():
            raise FloatingPointError(f"non-finite designs at ascent step {step}")
    return x


# ---------------------------------------------------------------------------
# surrogates


class SurrogateMlp(nn.Module):
    def __init__(self, input_dim: int, hidden: int = 256, activation: str = "leaky_relu"):
        super().__init__()
        self.net = mlp([input_dim, hidden, hidden, 1], activation, 0.0)
        self.register_buffer("y_shift", torch.zeros((), dtype=torch.float64))
        self.register_buffer("y_scale", torch.ones((), dtype=torch.float64))

    def forward(self, x):
        return self.net(x).squeeze(-1)


class TransformerRegressor(nn.Module):
    """Tokenizer and encoder blocks of a Cliqueformer with a flatten-pooled MLP head."""

    def __init__(self, config: CliqueformerConfig, head_width: int | None = None):
        super().__init__()
        self.config = config
        dm = config.d_model
        if head_width is None:
            head_width = matched_head_width(config)
        self.tokenizer = Tokenizer(config)
        self.encoder = nn.ModuleList(
            TransformerBlock(dm, config.n_heads, config.ff_hidden, config.dropout, config.activation)
            for _ in range(config.n_blocks)
        )
        self.norm = nn.LayerNorm(dm)
        self.head = mlp(
            [config.input_dim * dm, head_width, config.mlp_hidden, 1], config.activation, config.dropout
        )
        self.register_buffer("y_shift", torch.zeros(()))
        self.register_buffer("y_scale", torch.ones(()))

    def forward(self, x):
        if self.config.modality == DISCRETE and x.dim() == 2 and x.is_floating_point():
            x = x.view(len(x), self.config.input_dim, self.config.vocab_size)
        h = self.tokenizer(x)
        for block in self.encoder:
            h = block(h)
        return self.head(self.norm(h).flatten(1)).squeeze(-1)


def cliqueformer_surrogate_parameters(config: CliqueformerConfig) -> int:
    """Parameters in the encoder and predictor of a Cliqueformer (no decoder)."""
    model = Cliqueformer(config)
    decoder = [model.clique_in, model.decoder, model.decoder_norm, model.output]
    return count_parameters(model) - sum(count_parameters(m) for m in decoder)


def matched_head_width(config: CliqueformerConfig) -> int:
    """Head width giving a TransformerRegressor as many parameters as a Cliqueformer surrogate."""
    target = cliqueformer_surrogate_parameters(config)
    base = TransformerRegressor(config, head_width=1)
    per_unit = count_parameters(TransformerRegressor(config, head_width=2)) - count_parameters(base)
    return max(1, round(1 + (target - count_parameters(base)) / per_unit))


def fit_regressor(
    model: nn.Module,
    x: torch.Tensor,
    y: torch.Tensor,
    cfg: BaselineConfig,
    seed: int,
    penalty=None,
) -> tuple[nn.Module, list[float]]:
    """Minibatch MSE fit with Adam; ``penalty(model, xb)`` adds a regularizer."""
    model.y_shift.fill_(y.mean())
    model.y_scale.fill_(y.std().clamp_min(1e-12) if len(y) > 1 else 1.0)
    target = ((y - model.y_shift) / model.y_scale).to(x.dtype)
    rng = make_rng(seed)
    params = list(model.parameters())
    state = OptimizerState(lr=cfg.lr)
    batch = min(cfg.batch_size, len(y))
    trace = []
    model.train()
    for _ in range(cfg.train_steps):
        rows = torch.as_tensor(rng.integers(0, len(y), batch))
        xb = x[rows]
        loss = (model(xb) - target[rows]).pow(2).mean()
        if penalty is not None:
            reg = penalty(model, xb)
            trace.append(reg.item())
            loss = loss + reg
        grads = torch.autograd.grad(loss, params)
        adamw_update(params, grads, state)
    model.eval()
    return model, trace


def initial_designs(dataset: Dataset, cfg: BaselineConfig, seed: int) -> torch.Tensor:
    rows = make_rng(seed).integers(0, len(dataset), cfg.n_candidates)
    return to_inputs(dataset, rows)


def _frozen(model: nn.Module):
    for p in model.parameters():
        p.requires_grad_(False)
    return model


# ---------------------------------------------------------------------------
# methods


def fit_naive_surrogate(dataset: Dataset, cfg: BaselineConfig) -> SurrogateMlp:
    init_seed, data_seed, _ = split_seeds(cfg.seed, 3)
    x = to_inputs(dataset)
    torch.manual_seed(init_seed)
    model = SurrogateMlp(x.shape[1], cfg.hidden, cfg.activation).double()
    return fit_regressor(model, x, torch.as_tensor(dataset.scores), cfg, data_seed)[0]


def grad_ascent_baseline(dataset: Dataset, cfg: BaselineConfig) -> np.ndarray:
    model = _frozen(fit_naive_surrogate(dataset, cfg))
    x0 = initial_designs(dataset, cfg, split_seeds(cfg.seed, 3)[2])
    return to_designs(gradient_ascent(model, x0, cfg.design_steps, cfg.design_lr, dataset), dataset)


def coms_regularizer(model: nn.Module, xb: torch.Tensor, cfg: BaselineConfig, dataset: Dataset) -> torch.Tensor:
    """``alpha * (mean f on ascended designs - mean f on data)``, ascent not differentiated."""
    if cfg.inner_steps == 0 or cfg.alpha == 0:
        return xb.new_zeros(())
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        x_adv = gradient_ascent(model, xb, cfg.inner_steps, cfg.inner_lr, dataset)
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    return cfg.alpha * (model(x_adv.detach()).mean() - model(xb).mean())


def fit_coms_surrogate(dataset: Dataset, cfg: BaselineConfig) -> tuple[SurrogateMlp, list[float]]:
    init_seed, data_seed, _ = split_seeds(cfg.seed, 3)
    x = to_inputs(dataset)
    torch.manual_seed(init_seed)
    model = SurrogateMlp(x.shape[1], cfg.hidden, cfg.activation).double()
    penalty = lambda m, xb: coms_regularizer(m, xb, cfg, dataset)  # noqa: E731
    return fit_regressor(model, x, torch.as_tensor(dataset.scores), cfg, data_seed, penalty)


def coms_baseline(dataset: Dataset, cfg: BaselineConfig) -> np.ndarray:
    model = _frozen(fit_coms_surrogate(dataset, cfg)[0])
    x0 = initial_designs(dataset, cfg, split_seeds(cfg.seed, 3)[2])
    return to_designs(gradient_ascent(model, x0, cfg.design_steps, cfg.design_lr, dataset), dataset)


def transformer_baseline(
    dataset: Dataset, cfg: BaselineConfig, model_config: CliqueformerConfig, train_steps: int | None = None
) -> np.ndarray:
    """Gradient ascent in design space on an MSE-trained transformer regressor."""
    init_seed, data_seed, x_seed = split_seeds(cfg.seed, 3)
    torch.manual_seed(init_seed)
    model = TransformerRegressor(model_config).double()
    x = to_inputs(dataset)
    fit_cfg = cfg if train_steps is None else BaselineConfig(**{**cfg.__dict__, "train_steps": train_steps})
    model = _frozen(fit_regressor(model, x, torch.as_tensor(dataset.scores), fit_cfg, data_seed)[0])
    x0 = initial_designs(dataset, cfg, x_seed)
    return to_designs(gradient_ascent(model, x0, cfg.design_steps, cfg.design_lr, dataset), dataset)


# ---------------------------------------------------------------------------
# reward-weighted regression


def rwr_weights(y, beta: float) -> np.ndarray:
    """Normalized ``exp((y - max y) / beta)`` weights."""
    y = np.asarray(y, dtype=np.float64)
    w = np.exp((y - y.max()) / beta)
    total = w.sum()
    if not total > 0 or not np.isfinite(total):
        raise ValueError("degenerate reward weights")
    return w / total


@dataclass
class RwrPolicy:
    """Diagonal Gaussian (continuous) or per-position categorical (discrete) policy."""

    mean: np.ndarray | None = None
    var: np.ndarray | None = None
    probs: np.ndarray | None = None

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.probs is not None:
            cum = self.probs.cumsum(-1)
            u = rng.random((n, len(self.probs), 1))
            return np.minimum((u > cum).sum(-1), self.probs.shape[1] - 1)
        return self.mean + np.sqrt(self.var) * rng.standard_normal((n, len(self.mean)))


def fit_policy(designs: np.ndarray, weights: np.ndarray, dataset: Dataset, min_var: float = 1e-6) -> RwrPolicy:
    """Weighted maximum-likelihood policy fit."""
    if dataset.modality == DISCRETE:
        onehot = np.eye(dataset.vocab_size)[designs]
        probs = np.einsum("n,nlv->lv", weights, onehot) + 1e-3
        return RwrPolicy(probs=probs / probs.sum(-1, keepdims=True))
    mean = weights @ designs
    var = weights @ (designs - mean) ** 2
    return RwrPolicy(mean=mean, var=np.maximum(var, min_var))


def rwr_baseline(dataset: Dataset, cfg: BaselineConfig) -> np.ndarray:
    beta = cfg.beta if cfg.beta is not None else 0.1 * (dataset.y_max - dataset.y_min)
    if not beta > 0:
        raise ValueError("beta must be positive")
    model = _frozen(fit_naive_surrogate(dataset, cfg))
    rng = make_rng(split_seeds(cfg.seed, 3)[2])
    policy = fit_policy(dataset.designs, rwr_weights(dataset.scores, beta), dataset)
    for _ in range(cfg.rwr_iters):
        samples = policy.sample(cfg.rwr_samples, rng)
        probe = Dataset(samples, np.zeros(len(samples)), dataset.modality, dataset.vocab_size, 0.0, 1.0)
        with torch.no_grad():
            pred = model(to_inputs(probe)).numpy() * model.y_scale.item() + model.y_shift.item()
        policy = fit_policy(samples, rwr_weights(pred, beta), dataset)
    return policy.sample(cfg.n_candidates, rng)
