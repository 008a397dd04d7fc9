"""Differentiable numerical core.

Gradients come from torch's reverse-mode autograd; this module holds the
pieces built on top of it: diagonal Gaussian posteriors, closed-form KL
terms, reconstruction likelihoods, a functional AdamW step, a finite
difference gradient checker and seeded random streams.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

LOGVAR_MIN = -8.0
LOGVAR_MAX = 8.0
LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# random streams


def make_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def split_seeds(seed: int, n: int) -> list[int]:
    """Derive ``n`` independent child seeds from ``seed``."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)) for c in children]


def torch_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed) & 0x7FFF_FFFF_FFFF_FFFF)
    return gen


# ---------------------------------------------------------------------------
# posteriors and divergences


@dataclass
class DiagonalGaussian:
    """Posterior ``N(mean, diag(exp(log_variance)))``; leading dims are batch dims."""

    mean: torch.Tensor
    log_variance: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_variance.shape:
            raise ValueError(
                f"mean {tuple(self.mean.shape)} and log_variance "
                f"{tuple(self.log_variance.shape)} differ in shape"
            )

    @classmethod
    def from_raw(cls, mean: torch.Tensor, raw_log_variance: torch.Tensor) -> "DiagonalGaussian":
        return cls(mean, raw_log_variance.clamp(LOGVAR_MIN, LOGVAR_MAX))

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(0.5 * self.log_variance)


def _check_indices(indices, dim: int) -> torch.Tensor:
    idx = torch.as_tensor(indices, dtype=torch.long)
    if idx.numel() and (idx.min() < 0 or idx.max() >= dim):
        raise IndexError(f"indices out of range for a {dim}-dimensional posterior")
    return idx


def kl_elementwise(q: DiagonalGaussian) -> torch.Tensor:
    """Per-coordinate ``KL(q_k || N(0, 1))``."""
    return 0.5 * (q.mean.pow(2) + q.log_variance.exp() - 1.0 - q.log_variance)


def kl_to_standard_normal(q: DiagonalGaussian, indices=None) -> torch.Tensor:
    """KL divergence of the marginal of ``q`` on ``indices`` from a standard normal.

    With batch dimensions the result has the batch shape.
    """
    terms = kl_elementwise(q)
    if indices is None:
        return terms.sum(-1)
    idx = _check_indices(indices, q.dim)
    return terms.index_select(-1, idx).sum(-1)


def reparam_sample(
    q: DiagonalGaussian,
    generator: torch.Generator | None = None,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """``mean + std * eps``; pass ``noise`` to freeze ``eps``."""
    if noise is None:
        noise = torch.randn(q.mean.shape, generator=generator, dtype=q.mean.dtype)
    elif noise.shape != q.mean.shape:
        raise ValueError("noise must match the posterior shape")
    return q.mean + q.std * noise


# ---------------------------------------------------------------------------
# reconstruction likelihoods


def gaussian_recon_nll(x: torch.Tensor, x_hat: torch.Tensor, std: float = 1.0) -> torch.Tensor:
    """Fixed-variance Gaussian negative log-likelihood summed over the last axis."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    if not std > 0:
        raise ValueError("std must be positive")
    d = x.shape[-1]
    return 0.5 * ((x - x_hat) / std).pow(2).sum(-1) + d * math.log(std) + 0.5 * d * LOG_2PI


def categorical_recon_nll(onehot_x: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Softmax cross-entropy summed over positions; inputs are ``(..., L, V)``."""
    if onehot_x.shape != logits.shape:
        raise ValueError(f"shape mismatch: {tuple(onehot_x.shape)} vs {tuple(logits.shape)}")
    row_sums = onehot_x.sum(-1)
    if not torch.allclose(row_sums, torch.ones_like(row_sums)):
        raise ValueError("one-hot rows must sum to 1")
    log_probs = torch.log_softmax(logits, dim=-1)
    return -(onehot_x * log_probs).sum((-1, -2))


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    exp_avg: list = field(default_factory=list)
    exp_avg_sq: list = field(default_factory=list)


@torch.no_grad()
def adamw_update(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: OptimizerState,
) -> tuple[Sequence[torch.Tensor], OptimizerState]:
    """One decoupled-weight-decay Adam step, applied in place.

    ``theta <- theta - lr*wd*theta - lr * m_hat / (sqrt(v_hat) + eps)``.
    A ``None`` gradient is treated as zero.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    elif len(state.exp_avg) != len(params):
        raise ValueError("optimizer state does not match the parameter list")
    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"shape mismatch in AdamW update: {tuple(p.shape)} vs {tuple(g.shape)}")
        if state.weight_decay != 0.0:
            p.mul_(1.0 - state.lr * state.weight_decay)
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / bias2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bias1)
    return params, state


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    fn: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    h: float = 1e-5,
) -> float:
    """Max relative deviation between autograd and central finite differences.

    Deviation per coordinate is ``|g - fd| / (|g| + 1e-8)``.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = point.detach().to(torch.float64).clone().requires_grad_(True)
    value = fn(x)
    if not torch.isfinite(value):
        raise FloatingPointError("function value is not finite at the check point")
    (grad,) = torch.autograd.grad(value, x, allow_unused=True)
    if grad is None:
        grad = torch.zeros_like(x)
    grad = grad.reshape(-1)
    flat = x.detach().reshape(-1)
    worst = 0.0
    with torch.no_grad():
        for k in range(flat.numel()):
            plus = flat.clone()
            plus[k] += h
            minus = flat.clone()
            minus[k] -= h
            f_plus = fn(plus.reshape(point.shape))
            f_minus = fn(minus.reshape(point.shape))
            if not (torch.isfinite(f_plus) and torch.isfinite(f_minus)):
                raise FloatingPointError(f"non-finite function value while perturbing coordinate {k}")
            fd = (f_plus - f_minus).item() / (2.0 * h)
            g = grad[k].item()
            worst = max(worst, abs(g - fd) / (abs(g) + 1e-8))
    return worst
