"""Kronecker-sum linear maps.

A hypercomplex linear layer parameterizes its weight as a sum of Kronecker
products, W = sum_i A_i (x) B_i, where the A_i are small n x n "rule"
matrices shared across all layers and each B_i is stored as a low-rank
product s_i @ t_i. Everything here is a pure function over tensors; the
trainable module wrappers live in :mod:`compfreeze.compacter`.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class PHMSpec:
    """Shape contract for one hypercomplex linear map.

    n: number of Kronecker summands (and size of each shared rule matrix).
    in_dim / out_dim: the map is in_dim -> out_dim; n must divide both.
    rank: per-summand rank of B_i = s_i @ t_i.
    init_range: half-width of the uniform init for the shared rule matrices.
    """

    n: int
    in_dim: int
    out_dim: int
    rank: int = 1
    init_range: float = 1e-4

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError(f"n must be positive, got {self.n}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError(f"dims must be positive, got {self.in_dim}x{self.out_dim}")
        if self.in_dim % self.n != 0:
            raise ValueError(f"n={self.n} must divide in_dim={self.in_dim}")
        if self.out_dim % self.n != 0:
            raise ValueError(f"n={self.n} must divide out_dim={self.out_dim}")
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if not self.init_range > 0:
            raise ValueError(f"init_range must be > 0, got {self.init_range}")

    @property
    def in_block(self) -> int:
        return self.in_dim // self.n

    @property
    def out_block(self) -> int:
        return self.out_dim // self.n


@dataclass
class FactorSet:
    """Factors of one hypercomplex map.

    shared_a: (n, n, n) stacked rule matrices A_i (usually shared globally).
    s: (n, in_dim/n, rank) left low-rank factors.
    t: (n, rank, out_dim/n) right low-rank factors.
    bias: (out_dim,).

    The entries may be plain tensors or nn.Parameter views; the functions
    below never mutate them.
    """

    shared_a: torch.Tensor
    s: torch.Tensor
    t: torch.Tensor
    bias: torch.Tensor

    def check(self, spec: PHMSpec) -> None:
        n, kb, db, r = spec.n, spec.in_block, spec.out_block, spec.rank
        if tuple(self.shared_a.shape) != (n, n, n):
            raise ValueError(f"shared_a shape {tuple(self.shared_a.shape)} != {(n, n, n)}")
        if tuple(self.s.shape) != (n, kb, r):
            raise ValueError(f"s shape {tuple(self.s.shape)} != {(n, kb, r)}")
        if tuple(self.t.shape) != (n, r, db):
            raise ValueError(f"t shape {tuple(self.t.shape)} != {(n, r, db)}")
        if tuple(self.bias.shape) != (spec.out_dim,):
            raise ValueError(f"bias shape {tuple(self.bias.shape)} != {(spec.out_dim,)}")


@dataclass(frozen=True)
class ParamCount:
    """Stored-entry counts for one hypercomplex map."""

    shared: int
    per_layer: int

    @property
    def total(self) -> int:
        return self.shared + self.per_layer


def kronecker_product(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Kronecker product of two matrices: out[i*m+u, j*l+v] = a[i,j] * b[u,v]."""
    if a.dim() != 2 or b.dim() != 2:
        raise ValueError(f"expected matrices, got shapes {tuple(a.shape)}, {tuple(b.shape)}")
    if not (torch.isfinite(a).all() and torch.isfinite(b).all()):
        raise ValueError("non-finite entries in Kronecker factors")
    p, q = a.shape
    m, l = b.shape
    return (a.unsqueeze(1).unsqueeze(3) * b.unsqueeze(0).unsqueeze(2)).reshape(p * m, q * l)


def phm_compose(spec: PHMSpec, factors: FactorSet) -> torch.Tensor:
    """Materialize W = sum_i A_i (x) (s_i @ t_i), shape (in_dim, out_dim)."""
    factors.check(spec)
    b = torch.bmm(factors.s, factors.t)  # (n, in_block, out_block)
    # einsum indices: A_i[j,k] * B_i[u,v] laid out as (j,u),(k,v) blocks
    w = torch.einsum("ijk,iuv->jukv", factors.shared_a, b)
    return w.reshape(spec.in_dim, spec.out_dim)


def phm_forward(x: torch.Tensor, spec: PHMSpec, factors: FactorSet) -> torch.Tensor:
    """Apply y = x @ W + bias without materializing W.

    Accepts a single vector (in_dim,) or a batch (..., in_dim); output has
    matching leading shape with last dim out_dim.
    """
    factors.check(spec)
    if x.shape[-1] != spec.in_dim:
        raise ValueError(f"input width {x.shape[-1]} != in_dim {spec.in_dim}")
    xr = x.reshape(-1, spec.n, spec.in_block)  # (batch, block j, u)
    b = torch.bmm(factors.s, factors.t)  # (summand i, u, v)
    mixed = torch.einsum("bju,iuv->bijv", xr, b)
    y = torch.einsum("bijv,ijk->bkv", mixed, factors.shared_a)
    return y.reshape(*x.shape[:-1], spec.out_dim) + factors.bias


def phm_param_count(spec: PHMSpec, count_shared_a: bool = False) -> ParamCount:
    """Stored entries: per-layer s/t/bias, plus the n^3 shared rule entries."""
    per_layer = spec.n * spec.rank * (spec.in_block + spec.out_block) + spec.out_dim
    shared = spec.n ** 3 if count_shared_a else 0
    return ParamCount(shared=shared, per_layer=per_layer)


def init_shared_a(n: int, init_range: float, generator: torch.Generator | None = None,
                  dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Uniform(-init_range, init_range) stack of n rule matrices, shape (n, n, n)."""
    u = torch.rand((n, n, n), generator=generator, dtype=dtype)
    return (u * 2.0 - 1.0) * init_range


def init_factors(spec: PHMSpec, shared_a: torch.Tensor, zero_t: bool = False,
                 generator: torch.Generator | None = None,
                 dtype: torch.dtype = torch.float32, s_std: float = 1e-2) -> FactorSet:
    """Fresh low-rank factors referencing an existing shared rule stack.

    With zero_t the right factors and bias start at zero, so the composed map
    is exactly the zero map (used for the up projection of adapter blocks).
    """
    n, kb, db, r = spec.n, spec.in_block, spec.out_block, spec.rank
    s = torch.randn((n, kb, r), generator=generator, dtype=dtype) * s_std
    if zero_t:
        t = torch.zeros((n, r, db), dtype=dtype)
    else:
        t = torch.randn((n, r, db), generator=generator, dtype=dtype) * s_std
    bias = torch.zeros(spec.out_dim, dtype=dtype)
    return FactorSet(shared_a=shared_a, s=s, t=t, bias=bias)
