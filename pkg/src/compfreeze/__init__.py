"""Compacter adapters with layer freezing, plus LLM labelling and fallback routing."""

__version__ = "0.1.0"

from .compacter import CompacterBlock, CompacterConfig, PHMLinear, SharedARegistry
from .freeze import PlacementPlan, TrainableMask, build_trainable_mask, plan_for_strategy
from .kron import FactorSet, PHMSpec, kronecker_product, phm_compose, phm_forward, phm_param_count

__all__ = [
    "CompacterBlock",
    "CompacterConfig",
    "FactorSet",
    "PHMLinear",
    "PHMSpec",
    "PlacementPlan",
    "SharedARegistry",
    "TrainableMask",
    "build_trainable_mask",
    "kronecker_product",
    "phm_compose",
    "phm_forward",
    "phm_param_count",
    "plan_for_strategy",
]
