"""Hierarchical position embedding built from per-level cell dictionaries.

Level 1 is the finest level (one cell per region); level j groups regions
into b^(j-1) x b^(j-1) blocks.  A region's embedding is the concatenation
of its level-1..L dictionary rows, so two regions in the same level-j block
share that level's sub-vector exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor


def level_widths(d: int, levels: int) -> list[int]:
    """Equal split of d with the remainder given to the finest level."""
    base = d // levels
    widths = [base] * levels
    widths[0] += d - base * levels
    return widths


def build_hierarchy(rows: int, cols: int, levels: int, branching: int = 4) -> list[np.ndarray]:
    """Per-level arrays mapping region index -> linear cell id at that level."""
    if levels < 1:
        raise ValueError("need at least one level")
    if branching < 2:
        raise ValueError("branching factor must be >= 2")
    r, c = np.divmod(np.arange(rows * cols), cols)
    maps = []
    for j in range(levels):
        block = branching ** j
        level_cols = -(-cols // block)
        maps.append((r // block) * level_cols + (c // block))
    return maps


@dataclass
class ScpeTable:
    rows: int
    cols: int
    levels: int
    branching: int
    widths: list[int]
    index_maps: list[np.ndarray]

    @classmethod
    def create(cls, rows: int, cols: int, d: int, levels: int = 3, branching: int = 4) -> "ScpeTable":
        return cls(rows, cols, levels, branching, level_widths(d, levels),
                   build_hierarchy(rows, cols, levels, branching))

    @property
    def level_sizes(self) -> list[int]:
        return [int(m.max()) + 1 for m in self.index_maps]

    @property
    def n_params(self) -> int:
        return sum(c * w for c, w in zip(self.level_sizes, self.widths))

    def init_params(self, params: dict, rng: np.random.Generator, std: float = 0.02) -> None:
        for j, (size, width) in enumerate(zip(self.level_sizes, self.widths), start=1):
            name = f"scpe.level{j}.table"
            params[name] = tc.parameter(rng.normal(0.0, std, size=(size, width)), name)

    def embed(self, params: dict, regions=None) -> Tensor:
        """Position codes for ``regions`` (default: all, in row-major order) -> (len, d)."""
        n = self.rows * self.cols
        idx = np.arange(n) if regions is None else np.asarray(regions, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise IndexError(f"region index out of range [0, {n})")
        parts = [tc.embedding_lookup(params[f"scpe.level{j}.table"], m[idx])
                 for j, m in enumerate(self.index_maps, start=1)]
        return parts[0] if len(parts) == 1 else tc.concat(parts, axis=-1)


def scpe_lookup(region: int, table: ScpeTable, params: dict) -> Tensor:
    return tc.reshape(table.embed(params, [region]), (sum(table.widths),))
