"""Multi-head self-attention over token sequences and learnable positions."""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .nn import LayerNorm, Module, Parameter, fan_in_uniform
from .tensor import Tensor


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """softmax(q k^T / sqrt(d_k)) v over the last two axes."""
    if q.shape[-1] == 0:
        raise ContractError("scaled_dot_attention: d_k must be positive")
    if q.shape != k.shape or k.shape[:-1] != v.shape[:-1]:
        raise DimensionError(f"attention operands disagree: q{q.shape} k{k.shape} v{v.shape}")
    dk = q.shape[-1]
    scores = T.matmul(q, T.transpose(k, _swap_last(k.ndim))) * (1.0 / math.sqrt(dk))
    weights = T.softmax(scores, axis=-1)
    out = T.matmul(weights, v)
    return (out, weights) if return_weights else out


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


class PositionalEncoding(Module):
    """Learnable [N_max, D] table; the first N rows are added to N tokens."""

    def __init__(self, max_tokens: int, dim: int, rng: np.random.Generator | None = None, std: float = 0.02):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.table = Parameter(rng.normal(0.0, std, size=(max_tokens, dim)))

    @property
    def max_tokens(self) -> int:
        return self.table.shape[0]

    def forward(self, tokens: Tensor) -> Tensor:
        return add_positional(tokens, self)


def add_positional(tokens: Tensor, pe: PositionalEncoding) -> Tensor:
    n = tokens.shape[-2]
    if n > pe.max_tokens:
        raise ContractError(f"{n} tokens exceed positional table of {pe.max_tokens}")
    if tokens.shape[-1] != pe.table.shape[1]:
        raise DimensionError(f"token width {tokens.shape[-1]} != positional width {pe.table.shape[1]}")
    rows = pe.table if n == pe.max_tokens else T.getitem(pe.table, slice(0, n))
    return T.add(tokens, rows)


class MultiHeadSelfAttention(Module):
    """Packed Q/K/V/O projections of width D split into ``num_heads`` heads.

    The forward pass applies layer norm to the attention output and adds the
    input back: ``LN(MSA(x)) + x``.  ``pre_norm=True`` switches to
    ``MSA(LN(x)) + x``.
    """

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator | None = None, pre_norm: bool = False):
        super().__init__()
        if num_heads < 1 or dim % num_heads:
            raise ContractError(f"embedding dim {dim} not divisible by {num_heads} heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.dim, self.num_heads, self.pre_norm = dim, num_heads, pre_norm
        self.w_q = Parameter(fan_in_uniform(rng, (dim, dim), dim))
        self.w_k = Parameter(fan_in_uniform(rng, (dim, dim), dim))
        self.w_v = Parameter(fan_in_uniform(rng, (dim, dim), dim))
        self.w_o = Parameter(fan_in_uniform(rng, (dim, dim), dim))
        self.norm = LayerNorm(dim)
        self.last_weights: np.ndarray | None = None

    @property
    def head_dim(self) -> int:
        return self.dim // self.num_heads

    def attend(self, tokens: Tensor) -> Tensor:
        """concat over heads of softmax(QK^T/sqrt(d_k))V, projected by W^O."""
        squeeze = tokens.ndim == 2
        x = T.reshape(tokens, (1,) + tokens.shape) if squeeze else tokens
        B, N, D = x.shape
        m, dk = self.num_heads, self.head_dim

        def heads(w):
            return T.transpose(T.reshape(T.matmul(x, w), (B, N, m, dk)), (0, 2, 1, 3))

        out, weights = scaled_dot_attention(heads(self.w_q), heads(self.w_k), heads(self.w_v), return_weights=True)
        self.last_weights = weights.data
        merged = T.reshape(T.transpose(out, (0, 2, 1, 3)), (B, N, D))
        y = T.matmul(merged, self.w_o)
        return T.reshape(y, (N, D)) if squeeze else y

    def forward(self, tokens: Tensor) -> Tensor:
        if tokens.shape[-2] == 0:
            raise ContractError("msa_forward needs at least one token")
        if tokens.shape[-1] != self.dim:
            raise DimensionError(f"token width {tokens.shape[-1]} != embedding dim {self.dim}")
        if self.pre_norm:
            return T.add(self.attend(self.norm(tokens)), tokens)
        return T.add(self.norm(self.attend(tokens)), tokens)


def msa_forward(tokens: Tensor, params: MultiHeadSelfAttention) -> Tensor:
    return params(tokens)
