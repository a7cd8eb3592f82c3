"""Placement plans and trainable-parameter masks.

A plan names which encoder layers (1-based, as in the architecture diagrams)
receive adapter blocks. A mask maps every parameter path of a model to
train/freeze: adapter factors, the shared rule stack, every layer norm and
the task head train; everything else freezes. ``full_finetune`` trains all.

Descriptors are plain (path, shape) listings, so masks and trainable
fractions can be computed for full-size encoder layouts without building
the tensors.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

from .compacter import AFTER_FFN_ONLY, CompacterConfig

ODD_LC = "odd_lc"
EVEN_LC = "even_lc"
UPPER_LC = "upper_lc"
LOWER_LC = "lower_lc"
FULL_FINETUNE = "full_finetune"
SIX_LAYER_STRATEGIES = (ODD_LC, EVEN_LC, UPPER_LC, LOWER_LC)

TRIPLE_GROUPS = ((1, 2, 3), (4, 5, 6), (7, 8, 9), (10, 11, 12))

_SINGLE_RE = re.compile(r"^single\((\d+)\)$")
_TRIPLE_RE = re.compile(r"^triple\((\d+),\s*(\d+),\s*(\d+)\)$")


@dataclass(frozen=True)
class PlacementPlan:
    strategy: str
    layer_indices: frozenset[int]
    num_layers: int = 12

    def __post_init__(self) -> None:
        bad = [i for i in self.layer_indices if not 1 <= i <= self.num_layers]
        if bad:
            raise ValueError(f"layer indices {bad} outside 1..{self.num_layers}")


def plan_for_strategy(strategy: str, num_layers: int = 12) -> PlacementPlan:
    """Parse a strategy name into a plan.

    Accepted: odd_lc, even_lc, upper_lc, lower_lc, full_finetune,
    single(i), triple(a,b,c) with the triple drawn from the four
    contiguous groups of a 12-layer stack.
    """
    name = strategy.strip().lower()
    if name in SIX_LAYER_STRATEGIES:
        if num_layers != 12:
            raise ValueError(f"{name} is defined for 12-layer encoders, got {num_layers}")
        if name == ODD_LC:
            layers = range(1, num_layers + 1, 2)
        elif name == EVEN_LC:
            layers = range(2, num_layers + 1, 2)
        elif name == UPPER_LC:
            layers = range(num_layers // 2 + 1, num_layers + 1)
        else:
            layers = range(1, num_layers // 2 + 1)
        return PlacementPlan(name, frozenset(layers), num_layers)
    if name == FULL_FINETUNE:
        return PlacementPlan(name, frozenset(), num_layers)
    m = _SINGLE_RE.match(name)
    if m:
        idx = int(m.group(1))
        if not 1 <= idx <= num_layers:
            raise ValueError(f"single({idx}) outside 1..{num_layers}")
        return PlacementPlan(name, frozenset({idx}), num_layers)
    m = _TRIPLE_RE.match(name)
    if m:
        group = tuple(int(g) for g in m.groups())
        if group not in TRIPLE_GROUPS:
            raise ValueError(f"triple group {group} not one of {TRIPLE_GROUPS}")
        return PlacementPlan(name, frozenset(group), num_layers)
    raise ValueError(f"unknown strategy {strategy!r}")


# ---------------------------------------------------------------------------
# parameter-path descriptors


@dataclass(frozen=True)
class ParamEntry:
    path: str
    shape: tuple[int, ...]

    @property
    def count(self) -> int:
        return math.prod(self.shape)


@dataclass(frozen=True)
class HeadSpec:
    kind: str  # sequence_classification | token_classification
    num_labels: int
    style: str = "pooled_linear"  # pooled_linear | dense_projection

    def __post_init__(self) -> None:
        if self.kind not in ("sequence_classification", "token_classification"):
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.style not in ("pooled_linear", "dense_projection"):
            raise ValueError(f"unknown head style {self.style!r}")
        if self.num_labels < 1:
            raise ValueError("num_labels must be positive")


def encoder_entries(num_layers: int, hidden: int, ffn: int, vocab: int,
                    max_positions: int, type_vocab: int) -> list[ParamEntry]:
    """Paths and shapes of the bare encoder, matching the torch host's names."""
    e: list[ParamEntry] = [
        ParamEntry("encoder.embeddings.word.weight", (vocab, hidden)),
        ParamEntry("encoder.embeddings.position.weight", (max_positions, hidden)),
        ParamEntry("encoder.embeddings.token_type.weight", (type_vocab, hidden)),
        ParamEntry("encoder.embeddings.norm.weight", (hidden,)),
        ParamEntry("encoder.embeddings.norm.bias", (hidden,)),
    ]
    for i in range(num_layers):
        p = f"encoder.layers.{i}"
        for proj in ("query", "key", "value", "output"):
            e.append(ParamEntry(f"{p}.attention.{proj}.weight", (hidden, hidden)))
            e.append(ParamEntry(f"{p}.attention.{proj}.bias", (hidden,)))
        e.append(ParamEntry(f"{p}.attention.norm.weight", (hidden,)))
        e.append(ParamEntry(f"{p}.attention.norm.bias", (hidden,)))
        e.append(ParamEntry(f"{p}.ffn.intermediate.weight", (ffn, hidden)))
        e.append(ParamEntry(f"{p}.ffn.intermediate.bias", (ffn,)))
        e.append(ParamEntry(f"{p}.ffn.output.weight", (hidden, ffn)))
        e.append(ParamEntry(f"{p}.ffn.output.bias", (hidden,)))
        e.append(ParamEntry(f"{p}.ffn.norm.weight", (hidden,)))
        e.append(ParamEntry(f"{p}.ffn.norm.bias", (hidden,)))
    return e


def _phm_entries(prefix: str, n: int, in_dim: int, out_dim: int, rank: int) -> list[ParamEntry]:
    return [
        ParamEntry(f"{prefix}.s", (n, in_dim // n, rank)),
        ParamEntry(f"{prefix}.t", (n, rank, out_dim // n)),
        ParamEntry(f"{prefix}.bias", (out_dim,)),
    ]


def compacter_entries(plan: PlacementPlan, config: CompacterConfig) -> list[ParamEntry]:
    """Adapter factor paths for every planned layer, plus the shared rule stack."""
    entries: list[ParamEntry] = []
    h, b, n, r = config.hidden_dim, config.bottleneck, config.n, config.rank
    names = ("compacter",) if config.placement_variant == AFTER_FFN_ONLY else ("attn_compacter", "compacter")
    for layer in sorted(plan.layer_indices):
        base = f"encoder.layers.{layer - 1}"
        for name in names:
            entries.extend(_phm_entries(f"{base}.{name}.down", n, h, b, r))
            entries.extend(_phm_entries(f"{base}.{name}.up", n, b, h, r))
    if plan.layer_indices:
        entries.append(ParamEntry(f"shared_phm.rules.{n}", (n, n, n)))
    return entries


def head_entries(head: HeadSpec, hidden: int) -> list[ParamEntry]:
    if head.kind == "sequence_classification" and head.style == "dense_projection":
        return [
            ParamEntry("head.dense.weight", (hidden, hidden)),
            ParamEntry("head.dense.bias", (hidden,)),
            ParamEntry("head.out_proj.weight", (head.num_labels, hidden)),
            ParamEntry("head.out_proj.bias", (head.num_labels,)),
        ]
    return [
        ParamEntry("head.classifier.weight", (head.num_labels, hidden)),
        ParamEntry("head.classifier.bias", (head.num_labels,)),
    ]


def bert_shaped_entries(head: HeadSpec, plan: PlacementPlan,
                        config: CompacterConfig | None = None) -> list[ParamEntry]:
    """12-layer, hidden-768 layout with BERT-base vocabulary sizes (~110M params)."""
    config = config or CompacterConfig(hidden_dim=768)
    return (encoder_entries(12, 768, 3072, 30522, 512, 2)
            + compacter_entries(plan, config) + head_entries(head, 768))


def roberta_shaped_entries(head: HeadSpec, plan: PlacementPlan,
                           config: CompacterConfig | None = None) -> list[ParamEntry]:
    """12-layer, hidden-768 layout with RoBERTa-base vocabulary sizes (~125M params)."""
    config = config or CompacterConfig(hidden_dim=768)
    return (encoder_entries(12, 768, 3072, 50265, 514, 1)
            + compacter_entries(plan, config) + head_entries(head, 768))


# ---------------------------------------------------------------------------
# masks

_TRAINABLE_SEGMENTS = {"compacter", "attn_compacter", "norm"}


def _classify(path: str) -> str:
    segments = path.split(".")
    if segments[0] == "shared_phm":
        return "shared_phm"
    if segments[0] == "head":
        return "head"
    if "compacter" in segments or "attn_compacter" in segments:
        return "compacter"
    if "norm" in segments:
        return "layer_norm"
    if segments[:2] == ["encoder", "embeddings"]:
        return "embeddings"
    return "encoder_frozen"


_ALWAYS_TRAINABLE_GROUPS = {"compacter", "shared_phm", "layer_norm", "head"}


@dataclass
class TrainableMask:
    flags: dict[str, bool]
    trainable_count: int
    total_count: int
    group_counts: dict[str, dict[str, int]] = field(default_factory=dict)

    @property
    def trainable_fraction(self) -> float:
        return self.trainable_count / self.total_count

    def summary(self) -> dict:
        return {
            "trainable_count": self.trainable_count,
            "total_count": self.total_count,
            "trainable_fraction": self.trainable_fraction,
            "groups": self.group_counts,
        }


def build_trainable_mask(descriptor: list[ParamEntry], plan: PlacementPlan) -> TrainableMask:
    """Flag every path train/freeze and account per group.

    Compacter paths only exist where the plan placed blocks, so membership in
    the plan is implied by presence. Layer indices named by the plan must fit
    the descriptor's depth.
    """
    depth = 0
    for entry in descriptor:
        m = re.match(r"encoder\.layers\.(\d+)\.", entry.path)
        if m:
            depth = max(depth, int(m.group(1)) + 1)
    over = [i for i in plan.layer_indices if i > depth]
    if over:
        raise ValueError(f"plan layers {sorted(over)} exceed model depth {depth}")

    flags: dict[str, bool] = {}
    groups: dict[str, dict[str, int]] = {}
    trainable = total = 0
    full = plan.strategy == FULL_FINETUNE
    for entry in descriptor:
        if entry.path in flags:
            raise ValueError(f"duplicate parameter path {entry.path}")
        group = _classify(entry.path)
        on = full or group in _ALWAYS_TRAINABLE_GROUPS
        flags[entry.path] = on
        g = groups.setdefault(group, {"trainable": 0, "frozen": 0})
        g["trainable" if on else "frozen"] += entry.count
        total += entry.count
        trainable += entry.count if on else 0
    return TrainableMask(flags, trainable, total, groups)


def descriptor_from_model(model) -> list[ParamEntry]:
    """(path, shape) listing of a torch module's parameters."""
    return [ParamEntry(name, tuple(p.shape)) for name, p in model.named_parameters()]


def apply_mask(model, mask: TrainableMask) -> None:
    """Set requires_grad per the mask; paths must match the model exactly."""
    seen = set()
    for name, p in model.named_parameters():
        if name not in mask.flags:
            raise ValueError(f"model parameter {name} missing from mask")
        p.requires_grad_(mask.flags[name])
        seen.add(name)
    missing = set(mask.flags) - seen
    if missing:
        raise ValueError(f"mask paths not present in model: {sorted(missing)[:5]}")
