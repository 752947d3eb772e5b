"""Prompt value types shared by the strategies and knowledge pretraining."""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import ops
from .nn import Linear, Module, normal, param
from .tensor import Tensor


@dataclass
class PromptVectors:
    """k × d soft prompt rows plus where they came from."""

    matrix: Tensor
    strategy: str
    instance_id: str = ""

    def __post_init__(self):
        if self.matrix.data.ndim != 2:
            raise ValueError(f"prompt matrix must be 2-D, got shape {self.matrix.shape}")
        if not np.all(np.isfinite(self.matrix.data)):
            raise ValueError("prompt matrix has non-finite values")

    @property
    def k(self) -> int:
        return self.matrix.shape[0]


class PromptTable(Module):
    """|V| × d_p table whose row i is the prompt embedding of token id i,
    followed by a d_p → d projection when d_p differs from the backbone width."""

    def __init__(self, table: np.ndarray, d_model: int, rng: Optional[np.random.Generator] = None,
                 frozen: bool = False, name: str = "table"):
        table = np.array(table, dtype=np.float64)
        self.table = param(f"{name}.weight", table, frozen=frozen)
        d_p = table.shape[1]
        if d_p != d_model:
            rng = rng or np.random.default_rng(0)
            self.projection = Linear(f"{name}.projection", d_p, d_model, rng, bias=False)
        else:
            self.projection = None

    @classmethod
    def random(cls, vocab_size: int, d_model: int, rng: np.random.Generator, dim: Optional[int] = None,
               std: float = 0.02, frozen: bool = False) -> "PromptTable":
        return cls(normal(rng, (vocab_size, dim or d_model), std), d_model, rng, frozen=frozen)

    @property
    def shape(self):
        return self.table.data.shape

    def lookup(self, ids: Sequence[int]) -> Tensor:
        rows = ops.embedding(self.table.tensor, ids)
        return self.projection(rows) if self.projection is not None else rows
