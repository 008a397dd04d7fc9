"""Chain-structured functional graphical models over a latent vector.

A layout splits ``d_z`` latent coordinates into ``n_clique`` contiguous
blocks of ``d_clique`` coordinates, where consecutive blocks share
``d_knot`` coordinates (the knots).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CliqueLayout:
    n_clique: int
    d_clique: int
    d_knot: int
    d_z: int = field(init=False)

    def __post_init__(self):
        for name in ("n_clique", "d_clique"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.d_knot, (int, np.integer)) or self.d_knot < 0:
            raise ValueError(f"d_knot must be a non-negative integer, got {self.d_knot!r}")
        if self.d_knot >= self.d_clique:
            raise ValueError(
                f"d_knot ({self.d_knot}) must be smaller than d_clique ({self.d_clique})"
            )
        if self.n_clique > 2 and 2 * self.d_knot > self.d_clique:
            # otherwise clique i would also overlap clique i + 2
            raise ValueError(
                f"d_knot ({self.d_knot}) may be at most half of d_clique ({self.d_clique}) in a chain"
            )
        d_z = self.d_knot + self.n_clique * (self.d_clique - self.d_knot)
        object.__setattr__(self, "d_z", int(d_z))

    @property
    def stride(self) -> int:
        return self.d_clique - self.d_knot

    def clique_indices(self, i: int) -> list[int]:
        return clique_indices(self, i)

    def index_matrix(self) -> np.ndarray:
        """``(n_clique, d_clique)`` integer array; row ``i`` holds clique ``i + 1``."""
        starts = np.arange(self.n_clique) * self.stride
        return starts[:, None] + np.arange(self.d_clique)[None, :]

    def to_tuple(self) -> tuple[int, int, int]:
        return (self.n_clique, self.d_clique, self.d_knot)


def make_chain(n_clique: int, d_clique: int, d_knot: int) -> CliqueLayout:
    return CliqueLayout(int(n_clique), int(d_clique), int(d_knot))


def clique_indices(layout: CliqueLayout, i: int) -> list[int]:
    """Latent indices of clique ``i`` (1-based), in increasing order."""
    if not 1 <= i <= layout.n_clique:
        raise IndexError(f"clique index {i} outside 1..{layout.n_clique}")
    start = (i - 1) * layout.stride
    return list(range(start, start + layout.d_clique))


def knot_multiplicity(layout: CliqueLayout) -> np.ndarray:
    """Number of cliques containing each latent index."""
    counts = np.zeros(layout.d_z, dtype=np.int64)
    np.add.at(counts, layout.index_matrix().ravel(), 1)
    return counts
