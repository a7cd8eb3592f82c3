"""Residual bottleneck adapter built from hypercomplex linear maps.

A block is: down-project (hypercomplex, hidden -> bottleneck), nonlinearity,
up-project (hypercomplex, bottleneck -> hidden), residual add. The up
projection's right factors and bias start at zero, so a fresh block is
exactly the identity. Rule matrices A_i live in a registry shared by every
block of a model.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .kron import FactorSet, PHMSpec, init_factors, init_shared_a, phm_compose, phm_param_count

AFTER_FFN_ONLY = "after_ffn_only"
TWO_PER_BLOCK = "two_per_block"
_NONLINEARITIES = {"gelu": torch.nn.functional.gelu, "relu": torch.nn.functional.relu}


@dataclass(frozen=True)
class CompacterConfig:
    """Configuration of the adapter blocks inserted into an encoder."""

    hidden_dim: int
    reduction_factor: int = 16
    n: int = 4
    rank: int = 1
    init_range: float = 1e-4
    nonlinearity: str = "gelu"
    placement_variant: str = AFTER_FFN_ONLY

    def __post_init__(self) -> None:
        if self.hidden_dim % self.reduction_factor != 0:
            raise ValueError(
                f"reduction_factor {self.reduction_factor} must divide hidden_dim {self.hidden_dim}"
            )
        bottleneck = self.hidden_dim // self.reduction_factor
        if self.hidden_dim % self.n != 0 or bottleneck % self.n != 0:
            raise ValueError(
                f"n={self.n} must divide hidden_dim {self.hidden_dim} and bottleneck {bottleneck}"
            )
        if self.nonlinearity not in _NONLINEARITIES:
            raise ValueError(f"unknown nonlinearity {self.nonlinearity!r}")
        if self.placement_variant not in (AFTER_FFN_ONLY, TWO_PER_BLOCK):
            raise ValueError(f"unknown placement variant {self.placement_variant!r}")
        # delegate the remaining numeric checks
        self.down_spec()
        self.up_spec()

    @property
    def bottleneck(self) -> int:
        return self.hidden_dim // self.reduction_factor

    def down_spec(self) -> PHMSpec:
        return PHMSpec(self.n, self.hidden_dim, self.bottleneck, self.rank, self.init_range)

    def up_spec(self) -> PHMSpec:
        return PHMSpec(self.n, self.bottleneck, self.hidden_dim, self.rank, self.init_range)


class SharedARegistry(nn.Module):
    """Lazily-created stacks of rule matrices, one per distinct n.

    Blocks hold a reference to the registry (not to a copy), so a single
    parameter tensor backs every block of a model and trains once.
    """

    def __init__(self, init_range: float = 1e-4, generator: torch.Generator | None = None):
        super().__init__()
        self.init_range = init_range
        self._generator = generator
        self.rules = nn.ParameterDict()

    def get(self, n: int) -> nn.Parameter:
        key = str(n)
        if key not in self.rules:
            self.rules[key] = nn.Parameter(init_shared_a(n, self.init_range, self._generator))
        return self.rules[key]


class PHMLinear(nn.Module):
    """Trainable hypercomplex linear map with an externally shared rule stack."""

    def __init__(self, spec: PHMSpec, shared_a: nn.Parameter, zero_init: bool = False,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.spec = spec
        # tuple wrapper: reference the shared parameter without re-registering it
        self._shared = (shared_a,)
        seed_factors = init_factors(spec, shared_a, zero_t=zero_init, generator=generator)
        self.s = nn.Parameter(seed_factors.s)
        self.t = nn.Parameter(seed_factors.t)
        self.bias = nn.Parameter(seed_factors.bias)

    @property
    def shared_a(self) -> nn.Parameter:
        return self._shared[0]

    def factors(self) -> FactorSet:
        return FactorSet(shared_a=self.shared_a, s=self.s, t=self.t, bias=self.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # adapter maps are narrow, so composing W and using one BLAS matmul
        # beats the materialization-free route; both give identical results
        w = phm_compose(self.spec, self.factors())
        return torch.nn.functional.linear(x, w.t(), self.bias)


class CompacterBlock(nn.Module):
    """Down-project, nonlinearity, up-project, residual add."""

    def __init__(self, config: CompacterConfig, registry: SharedARegistry,
                 generator: torch.Generator | None = None):
        super().__init__()
        self.config = config
        self._registry = (registry,)
        shared = registry.get(config.n)
        self.down = PHMLinear(config.down_spec(), shared, zero_init=False, generator=generator)
        self.up = PHMLinear(config.up_spec(), shared, zero_init=True, generator=generator)
        self._act = _NONLINEARITIES[config.nonlinearity]

    @property
    def registry(self) -> SharedARegistry:
        return self._registry[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.config.hidden_dim:
            raise ValueError(f"input width {x.shape[-1]} != hidden_dim {self.config.hidden_dim}")
        return x + self.up(self._act(self.down(x)))

    def param_count(self, count_shared_a: bool = False) -> int:
        """Stored trainable entries of this block (shared rules counted on request)."""
        down = phm_param_count(self.config.down_spec(), count_shared_a)
        up = phm_param_count(self.config.up_spec(), False)
        return down.total + up.total


def init_block(config: CompacterConfig, registry: SharedARegistry,
               generator: torch.Generator | None = None) -> CompacterBlock:
    """Build a block whose factor sets reference the registry's shared rules."""
    return CompacterBlock(config, registry, generator=generator)
