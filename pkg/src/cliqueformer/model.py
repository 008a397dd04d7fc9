"""The Cliqueformer network.

Designs are tokenized, encoded by a stack of pre-norm transformer blocks and
mapped to a diagonal Gaussian over a latent vector ``z``.  The latent is cut
into the overlapping cliques of a chain layout; a shared MLP scores each
clique (tagged with a sinusoidal clique embedding) and the scores are
averaged.  A second transformer decodes the clique slices back to designs.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .fgm import CliqueLayout, make_chain
from .numerics import DiagonalGaussian
from .tasks import CONTINUOUS, DISCRETE

CHECKPOINT_VERSION = 1


@dataclass
class CliqueformerConfig:
    layout: tuple[int, int, int]  # (n_clique, d_clique, d_knot)
    input_dim: int  # d for continuous designs, sequence length L for discrete ones
    modality: str = CONTINUOUS
    vocab_size: int = 0
    d_model: int = 64
    n_blocks: int = 2
    n_heads: int = 2
    ff_hidden: int = 128
    mlp_hidden: int = 256
    dropout: float = 0.5
    activation: str = "gelu"

    def __post_init__(self):
        self.layout = tuple(int(v) for v in self.layout)
        make_chain(*self.layout)
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.mlp_hidden < 1 or self.ff_hidden < 1:
            raise ValueError("hidden widths must be positive")
        if self.modality not in (CONTINUOUS, DISCRETE):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.modality == DISCRETE and self.vocab_size < 2:
            raise ValueError("discrete modality needs vocab_size >= 2")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def clique_layout(self) -> CliqueLayout:
        return make_chain(*self.layout)

    @property
    def d_z(self) -> int:
        return self.clique_layout.d_z

    @property
    def clique_embed_dim(self) -> int:
        d_clique = self.layout[1]
        return d_clique + d_clique % 2


ACTIVATIONS = {
    "gelu": nn.GELU,
    "leaky_relu": lambda: nn.LeakyReLU(0.3),
}


def clique_embedding(i, embed_dim: int, d_model: int | None = None) -> torch.Tensor:
    """Sinusoidal tag of clique ``i`` (1-based); ``i`` may be a tensor of indices.

    Entries ``2j, 2j+1`` are ``sin(i w_j), cos(i w_j)`` with
    ``w_j = 10 ** (-8 j / d_model)``.
    """
    if embed_dim % 2:
        raise ValueError("embed_dim must be even")
    d_model = embed_dim if d_model is None else d_model
    i = torch.as_tensor(i, dtype=torch.float64)
    j = torch.arange(embed_dim // 2, dtype=torch.float64)
    angles = i[..., None] * 10.0 ** (-8.0 * j / d_model)
    out = torch.stack([torch.sin(angles), torch.cos(angles)], dim=-1)
    return out.reshape(*angles.shape[:-1], embed_dim)


def mlp(sizes: list[int], activation: str, dropout: float) -> nn.Sequential:
    layers: list[nn.Module] = []
    for k, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(nn.Linear(n_in, n_out))
        if k < len(sizes) - 2:
            layers += [ACTIVATIONS[activation](), nn.Dropout(dropout)]
    return nn.Sequential(*layers)


class SelfAttention(nn.Module):
    """Multi-head self-attention.

    Keys carry no bias: softmax is invariant to a per-query shift of the
    scores, so a key bias would be a parameter with identically zero gradient.
    """

    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model, bias=False)
        self.q_bias = nn.Parameter(torch.zeros(d_model))
        self.v_bias = nn.Parameter(torch.zeros(d_model))
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x):
        B, T, D = x.shape
        bias = torch.cat([self.q_bias, torch.zeros_like(self.q_bias), self.v_bias])
        q, k, v = (self.qkv(x) + bias).view(B, T, 3, self.n_heads, D // self.n_heads).permute(2, 0, 3, 1, 4)
        h = F.scaled_dot_product_attention(q, k, v)
        return self.out(h.transpose(1, 2).reshape(B, T, D))


class TransformerBlock(nn.Module):
    def __init__(self, d_model, n_heads, ff_hidden, dropout, activation):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = mlp([d_model, ff_hidden, d_model], activation, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x):
        x = x + self.drop(self.attn(self.norm1(x)))
        return x + self.drop(self.ff(self.norm2(x)))


class Tokenizer(nn.Module):
    """Turns a design into ``input_dim`` tokens of width ``d_model``.

    Continuous coordinates get a per-position affine embedding; discrete
    symbols (integer ids or probability rows) index an embedding table.
    Both add a learned position embedding.
    """

    def __init__(self, config: CliqueformerConfig):
        super().__init__()
        self.modality = config.modality
        n, dm = config.input_dim, config.d_model
        self.position = nn.Parameter(0.02 * torch.randn(n, dm))
        if config.modality == CONTINUOUS:
            self.scale = nn.Parameter(torch.randn(n, dm) / math.sqrt(2.0))
        else:
            self.table = nn.Parameter(torch.randn(config.vocab_size, dm) / math.sqrt(2.0))

    def forward(self, x):
        if self.modality == CONTINUOUS:
            if x.dim() != 2 or x.shape[-1] != self.position.shape[0]:
                raise ValueError(f"expected continuous designs of shape (B, {self.position.shape[0]})")
            return x[..., None] * self.scale + self.position
        if x.dtype in (torch.int64, torch.int32):
            emb = self.table[x]
        else:
            if x.dim() != 3 or x.shape[-1] != self.table.shape[0]:
                raise ValueError("expected discrete designs as ids (B, L) or probability rows (B, L, V)")
            emb = x.to(self.table.dtype) @ self.table
        if emb.shape[1] != self.position.shape[0]:
            raise ValueError(f"expected sequences of length {self.position.shape[0]}")
        return emb + self.position


class Cliqueformer(nn.Module):
    def __init__(self, config: CliqueformerConfig):
        super().__init__()
        self.config = config
        layout = config.clique_layout
        dm, d_z = config.d_model, layout.d_z
        n_out = config.input_dim * (config.vocab_size if config.modality == DISCRETE else 1)

        def blocks():
            return nn.ModuleList(
                TransformerBlock(dm, config.n_heads, config.ff_hidden, config.dropout, config.activation)
                for _ in range(config.n_blocks)
            )

        self.tokenizer = Tokenizer(config)
        self.encoder = blocks()
        self.encoder_norm = nn.LayerNorm(dm)
        self.posterior = nn.Linear(config.input_dim * dm, 2 * d_z)

        e = config.clique_embed_dim
        self.predictor = mlp(
            [layout.d_clique + e, config.mlp_hidden, config.mlp_hidden, 1],
            config.activation,
            config.dropout,
        )

        self.clique_in = nn.Linear(layout.d_clique, dm)
        self.decoder = blocks()
        self.decoder_norm = nn.LayerNorm(dm)
        self.output = nn.Linear(layout.n_clique * dm, n_out)

        ids = torch.arange(1, layout.n_clique + 1)
        self.register_buffer("clique_index", torch.as_tensor(layout.index_matrix()), persistent=False)
        self.register_buffer("predictor_tags", clique_embedding(ids, e, dm).float(), persistent=False)
        self.register_buffer("decoder_tags", clique_embedding(ids, dm).float(), persistent=False)
        # target standardization used by the regression term
        self.register_buffer("y_shift", torch.zeros(()))
        self.register_buffer("y_scale", torch.ones(()))

    @property
    def layout(self) -> CliqueLayout:
        return self.config.clique_layout

    def tokenize(self, x):
        return self.tokenizer(x)

    def encode(self, x) -> DiagonalGaussian:
        h = self.tokenizer(x)
        for block in self.encoder:
            h = block(h)
        h = self.encoder_norm(h).flatten(1)
        mean, logvar = self.posterior(h).chunk(2, dim=-1)
        return DiagonalGaussian.from_raw(mean, logvar)

    def slice_cliques(self, z):
        if z.shape[-1] != self.layout.d_z:
            raise ValueError(f"expected latent dimension {self.layout.d_z}, got {z.shape[-1]}")
        return z[..., self.clique_index]  # (..., n_clique, d_clique)

    def predict_cliques(self, z):
        """Per-clique predictor outputs, shape ``(..., n_clique)``."""
        zc = self.slice_cliques(z)
        tags = self.predictor_tags.to(z.dtype).expand(*zc.shape[:-1], -1)
        return self.predictor(torch.cat([zc, tags], dim=-1)).squeeze(-1)

    def predict(self, z):
        return self.predict_cliques(z).mean(-1)

    def decode(self, z):
        """Reconstruction means ``(B, d)`` or logits ``(B, L, V)``."""
        h = self.clique_in(self.slice_cliques(z)) + self.decoder_tags.to(z.dtype)
        for block in self.decoder:
            h = block(h)
        out = self.output(self.decoder_norm(h).flatten(1))
        if self.config.modality == DISCRETE:
            return out.view(-1, self.config.input_dim, self.config.vocab_size)
        return out

    def scale_targets(self, y):
        return (y - self.y_shift) / self.y_scale


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_checkpoint(path, model: Cliqueformer, extra: dict | None = None) -> None:
    torch.save(
        {
            "format": "cliqueformer-checkpoint",
            "version": CHECKPOINT_VERSION,
            "config": asdict(model.config),
            "dtype": str(next(model.parameters()).dtype),
            "state": model.state_dict(),
            "extra": extra or {},
        },
        path,
    )


def load_checkpoint(path) -> tuple[Cliqueformer, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != "cliqueformer-checkpoint":
        raise ValueError(f"{path} is not a Cliqueformer checkpoint")
    if blob["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {blob['version']}")
    model = Cliqueformer(CliqueformerConfig(**blob["config"]))
    if blob["dtype"] == "torch.float64":
        model = model.double()
    model.load_state_dict(blob["state"])
    model.eval()
    return model, blob["extra"]
