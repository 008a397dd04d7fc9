"""Benchmark tasks: latent RBF functions with a validity oracle, TFBind-8.

A latent RBF task draws ``z ~ N(0, I)`` over a chain of triangles, scores it
with a sum of per-clique radial basis mixtures and observes it through
``x = T(z) = concat(z, tanh(W z + b))``.  Designs off the image of ``T`` are
invalid and score 0.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .fgm import CliqueLayout, make_chain
from .numerics import make_rng

CONTINUOUS = "continuous"
DISCRETE = "discrete"

N_CENTERS = 4
RBF_WIDTH = 1.0
DEFAULT_EPS_VALID = 0.1

DNA_ALPHABET = "ACGT"


class InvalidDesignError(ValueError):
    pass


@dataclass
class Dataset:
    designs: np.ndarray
    scores: np.ndarray
    modality: str = CONTINUOUS
    vocab_size: int = 0
    y_min: float = float("nan")
    y_max: float = float("nan")

    def __post_init__(self):
        self.designs = np.asarray(self.designs)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if len(self.scores) < 1:
            raise ValueError("a dataset needs at least one row")
        if len(self.designs) != len(self.scores):
            raise ValueError("designs and scores differ in length")
        if self.modality not in (CONTINUOUS, DISCRETE):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.modality == DISCRETE:
            if self.vocab_size < 1:
                raise ValueError("discrete datasets need a positive vocab_size")
            self.designs = self.designs.astype(np.int64)
            if self.designs.min() < 0 or self.designs.max() >= self.vocab_size:
                raise ValueError("discrete design entries must lie in [0, vocab_size)")
        else:
            self.designs = self.designs.astype(np.float64)
        if np.isnan(self.y_min) or np.isnan(self.y_max):
            self.y_min = float(self.scores.min())
            self.y_max = float(self.scores.max())

    def __len__(self) -> int:
        return len(self.scores)

    @property
    def stats(self) -> tuple[float, float]:
        return (self.y_min, self.y_max)

    @property
    def design_shape(self) -> tuple[int, ...]:
        return tuple(self.designs.shape[1:])

    def subset(self, rows) -> "Dataset":
        return Dataset(self.designs[rows], self.scores[rows], self.modality, self.vocab_size)

    def save(self, path) -> None:
        np.savez(
            path,
            designs=self.designs,
            scores=self.scores,
            modality=np.array(self.modality),
            vocab_size=np.array(self.vocab_size),
            stats=np.array([self.y_min, self.y_max]),
        )

    @classmethod
    def load(cls, path) -> "Dataset":
        with np.load(path) as f:
            y_min, y_max = f["stats"]
            return cls(
                f["designs"],
                f["scores"],
                str(f["modality"]),
                int(f["vocab_size"]),
                float(y_min),
                float(y_max),
            )


# ---------------------------------------------------------------------------
# normalization and filtering


def normalize_score(stats, y):
    """Min-max normalize ``y`` with ``stats = (y_min, y_max)`` (or a Dataset)."""
    if isinstance(stats, Dataset):
        stats = stats.stats
    y_min, y_max = stats
    if not y_max > y_min:
        raise ValueError(f"degenerate normalization stats: y_min={y_min}, y_max={y_max}")
    return (np.asarray(y, dtype=np.float64) - y_min) / (y_max - y_min)


def percentile_filter(dataset: Dataset, p: float = 0.8) -> Dataset:
    """Keep rows scoring strictly below the empirical ``p``-quantile.

    ``p = 1`` keeps everything.  Stats are recomputed on the kept rows.
    """
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    if p == 1:
        keep = np.arange(len(dataset))
    else:
        threshold = np.quantile(dataset.scores, p)
        keep = np.flatnonzero(dataset.scores < threshold)
    if len(keep) == 0:
        raise ValueError("percentile filter would leave the dataset empty")
    return dataset.subset(keep)


# ---------------------------------------------------------------------------
# latent RBF tasks


@dataclass
class LatentRbfTask:
    layout: CliqueLayout
    centers: np.ndarray  # (n_clique, K, 3)
    weights: np.ndarray  # (n_clique, K)
    width: float
    W: np.ndarray  # (d - d_z, d_z)
    b: np.ndarray  # (d - d_z,)
    eps_valid: float
    seed: int

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("RBF width must be positive")
        if self.W.shape != (len(self.b), self.layout.d_z):
            raise ValueError("transform matrix does not match the latent dimension")
        if len(self.b) < 1:
            raise ValueError("observed dimension must exceed the latent dimension")

    @property
    def d_z(self) -> int:
        return self.layout.d_z

    @property
    def observed_dim(self) -> int:
        return self.d_z + len(self.b)

    @property
    def n_triangles(self) -> int:
        return self.layout.n_clique

    def clique_terms(self, z) -> np.ndarray:
        """Per-clique RBF contributions, shape ``(..., n_clique)``."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape[-1] != self.d_z:
            raise ValueError(f"expected latent dimension {self.d_z}, got {z.shape[-1]}")
        zc = z[..., self.layout.index_matrix()]  # (..., n_clique, 3)
        sq = ((zc[..., None, :] - self.centers) ** 2).sum(-1)  # (..., n_clique, K)
        return (self.weights * np.exp(-sq / (2.0 * self.width**2))).sum(-1)

    def value(self, z) -> np.ndarray:
        return self.clique_terms(z).sum(-1)

    def save(self, path) -> None:
        np.savez(
            path,
            kind=np.array("latent_rbf"),
            layout=np.array(self.layout.to_tuple()),
            centers=self.centers,
            weights=self.weights,
            width=np.array(self.width),
            W=self.W,
            b=self.b,
            eps_valid=np.array(self.eps_valid),
            seed=np.array(self.seed),
        )

    @classmethod
    def load(cls, path) -> "LatentRbfTask":
        with np.load(path) as f:
            return cls(
                layout=make_chain(*(int(v) for v in f["layout"])),
                centers=f["centers"],
                weights=f["weights"],
                width=float(f["width"]),
                W=f["W"],
                b=f["b"],
                eps_valid=float(f["eps_valid"]),
                seed=int(f["seed"]),
            )


def generate_latent_rbf(
    n_triangles: int,
    observed_dim: int | None = None,
    n_samples: int = 10_000,
    seed: int = 0,
    eps_valid: float = DEFAULT_EPS_VALID,
) -> tuple[LatentRbfTask, Dataset]:
    """Draw a latent RBF task and ``n_samples`` observations of it."""
    if n_triangles < 1:
        raise ValueError("n_triangles must be >= 1")
    layout = make_chain(n_triangles, 3, 1)
    d_z = layout.d_z
    if observed_dim is None:
        observed_dim = 2 * d_z
    if observed_dim <= d_z:
        raise ValueError(f"observed_dim must exceed the latent dimension {d_z}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = make_rng(seed)
    centers = rng.standard_normal((n_triangles, N_CENTERS, 3))
    weights = rng.uniform(0.5, 1.5, (n_triangles, N_CENTERS))
    W = rng.standard_normal((observed_dim - d_z, d_z)) / np.sqrt(d_z)
    b = rng.standard_normal(observed_dim - d_z)
    task = LatentRbfTask(layout, centers, weights, RBF_WIDTH, W, b, float(eps_valid), int(seed))
    z = rng.standard_normal((n_samples, d_z))
    return task, Dataset(transform(task, z), task.value(z))


def transform(task: LatentRbfTask, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != task.d_z:
        raise ValueError(f"expected latent dimension {task.d_z}, got {z.shape[-1]}")
    return np.concatenate([z, np.tanh(z @ task.W.T + task.b)], axis=-1)


def validity_gap(task: LatentRbfTask, x) -> np.ndarray:
    """Infinity-norm distance between the observed tail and the tail implied by the head."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != task.observed_dim:
        raise ValueError(f"expected observed dimension {task.observed_dim}, got {x.shape[-1]}")
    head, tail = x[..., : task.d_z], x[..., task.d_z :]
    gap = np.abs(tail - np.tanh(head @ task.W.T + task.b)).max(-1)
    return np.where(np.isfinite(gap), gap, np.inf)


def invert_or_reject(task: LatentRbfTask, x):
    """Recover ``z`` from an on-manifold design, or ``None`` if it is invalid."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("invert_or_reject takes a single design; use validity_gap for batches")
    if validity_gap(task, x) <= task.eps_valid:
        return x[: task.d_z].copy()
    return None


# ---------------------------------------------------------------------------
# oracles


class OracleHandle:
    """Ground-truth scorer returning normalized values and validity flags."""

    def __init__(self, stats: tuple[float, float]):
        self.stats = (float(stats[0]), float(stats[1]))

    def raw(self, designs) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def __call__(self, designs) -> tuple[np.ndarray, np.ndarray]:
        values, valid = self.raw(designs)
        normalized = np.where(valid, normalize_score(self.stats, values), 0.0)
        return normalized, valid


class LatentRbfOracle(OracleHandle):
    def __init__(self, task: LatentRbfTask, stats):
        super().__init__(stats)
        self.task = task

    def raw(self, designs):
        x = np.atleast_2d(np.asarray(designs, dtype=np.float64))
        valid = validity_gap(self.task, x) <= self.task.eps_valid
        values = np.zeros(len(x))
        if valid.any():
            values[valid] = self.task.value(x[valid, : self.task.d_z])
        return values, valid


def oracle_score(task: LatentRbfTask, x, stats) -> np.ndarray:
    """Normalized ground-truth value; invalid designs get 0."""
    return LatentRbfOracle(task, stats)(x)[0]


# ---------------------------------------------------------------------------
# TFBind-8


def encode_sequence(seq: str) -> np.ndarray:
    try:
        return np.array([DNA_ALPHABET.index(c) for c in seq], dtype=np.int64)
    except ValueError:
        raise ValueError(f"unknown character in sequence {seq!r}") from None


def decode_sequence(tokens) -> str:
    return "".join(DNA_ALPHABET[int(t)] for t in tokens)


def to_onehot(tokens, vocab_size: int = 4) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    return np.eye(vocab_size)[tokens]


def from_onehot(onehot) -> np.ndarray:
    return np.asarray(onehot).argmax(-1)


class LookupOracle(OracleHandle):
    """Scores discrete designs by exact lookup in a full table."""

    def __init__(self, table: dict[tuple[int, ...], float], stats):
        super().__init__(stats)
        self.table = table

    def raw(self, designs):
        seqs = np.atleast_2d(np.asarray(designs, dtype=np.int64))
        values = np.zeros(len(seqs))
        valid = np.zeros(len(seqs), dtype=bool)
        for row, seq in enumerate(seqs):
            value = self.table.get(tuple(int(t) for t in seq))
            if value is not None:
                values[row], valid[row] = value, True
        return values, valid


def read_tfbind8(path) -> Dataset:
    """Parse ``SEQUENCE<TAB>SCORE`` lines into an unfiltered discrete dataset."""
    seqs, scores = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected SEQUENCE<TAB>SCORE")
        seq, score = parts
        try:
            scores.append(float(score))
        except ValueError:
            raise ValueError(f"{path}:{lineno}: bad score {score!r}") from None
        try:
            seqs.append(encode_sequence(seq.strip().upper()))
        except ValueError as err:
            raise ValueError(f"{path}:{lineno}: {err}") from None
    if not seqs:
        raise ValueError(f"{path}: no records")
    if len({len(s) for s in seqs}) != 1:
        raise ValueError(f"{path}: sequences differ in length")
    return Dataset(np.stack(seqs), np.array(scores), DISCRETE, len(DNA_ALPHABET))


def load_tfbind8(path, p: float = 0.8) -> tuple[Dataset, LookupOracle]:
    """Filtered training data plus an oracle backed by the full table."""
    full = read_tfbind8(path)
    table = {tuple(int(t) for t in seq): float(y) for seq, y in zip(full.designs, full.scores)}
    train = percentile_filter(full, p)
    return train, LookupOracle(table, train.stats)


def write_tfbind8(path, dataset: Dataset) -> None:
    lines = [f"{decode_sequence(s)}\t{float(y)!r}" for s, y in zip(dataset.designs, dataset.scores)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def all_sequences(length: int, vocab_size: int = 4) -> np.ndarray:
    return np.array(list(itertools.product(range(vocab_size), repeat=length)), dtype=np.int64)


def with_eps_valid(task: LatentRbfTask, eps_valid: float) -> LatentRbfTask:
    return replace(task, eps_valid=float(eps_valid))
