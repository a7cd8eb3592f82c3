"""Host encoder: a 12-layer transformer with pluggable heads and adapter insertion.

The host is deliberately small and deterministic. It mirrors the layout of a
BERT/RoBERTa-base encoder (embeddings + post-norm attention/FFN layers) so
parameter paths line up with the descriptor listings in
:mod:`compfreeze.freeze`, but it can be built at toy sizes (hidden 64) for
CPU tests. No dropout anywhere: runs must be bit-reproducible given a seed.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .compacter import TWO_PER_BLOCK, CompacterBlock, CompacterConfig, SharedARegistry
from .freeze import (
    HeadSpec,
    PlacementPlan,
    TrainableMask,
    apply_mask,
    build_trainable_mask,
    descriptor_from_model,
)

NEG_INF = -1e9  # additive attention mask; finite so padded rows stay NaN-free


@dataclass(frozen=True)
class EncoderDescriptor:
    num_layers: int = 12
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 256
    vocab_size: int = 64
    max_positions: int = 128
    type_vocab_size: int = 2
    head_style: str = "pooled_linear"  # pooled_linear | dense_projection

    def __post_init__(self) -> None:
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(f"num_heads {self.num_heads} must divide hidden_dim {self.hidden_dim}")
        if self.head_style not in ("pooled_linear", "dense_projection"):
            raise ValueError(f"unknown head style {self.head_style!r}")
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size",
                     "max_positions", "type_vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


# ---------------------------------------------------------------------------
# tokenizers

PAD_ID = 0
UNK_ID = 1
CLS_ID = 2


class CharTokenizer:
    """Character-level tokenizer with a fixed alphabet (domains are short strings)."""

    ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789.-_"

    def __init__(self) -> None:
        self._ids = {c: i + 3 for i, c in enumerate(self.ALPHABET)}

    @property
    def vocab_size(self) -> int:
        return len(self._ids) + 3

    def encode(self, text: str) -> list[int]:
        return [self._ids.get(c, UNK_ID) for c in text.lower()]


class WordTokenizer:
    """Whitespace tokenizer over a corpus-built vocabulary; OOV maps to UNK."""

    def __init__(self, vocab: dict[str, int] | None = None) -> None:
        self._ids = dict(vocab) if vocab else {}

    @classmethod
    def fit(cls, texts, max_vocab: int = 4000) -> "WordTokenizer":
        counts: dict[str, int] = {}
        for text in texts:
            for w in text.lower().split():
                counts[w] = counts.get(w, 0) + 1
        ranked = sorted(counts, key=lambda w: (-counts[w], w))[: max_vocab - 3]
        return cls({w: i + 3 for i, w in enumerate(ranked)})

    @property
    def vocab_size(self) -> int:
        return len(self._ids) + 3

    def encode(self, text: str) -> list[int]:
        return [self._ids.get(w, UNK_ID) for w in text.lower().split()]

    def encode_tokens(self, tokens: list[str]) -> list[int]:
        return [self._ids.get(t.lower(), UNK_ID) for t in tokens]

    def to_dict(self) -> dict[str, int]:
        return dict(self._ids)


def encode_classification(texts, tokenizer, max_len: int) -> tuple[torch.Tensor, torch.Tensor]:
    """CLS-prefixed, padded id/mask tensors for sequence classification."""
    rows = []
    for text in texts:
        ids = [CLS_ID] + tokenizer.encode(text)
        rows.append(ids[:max_len])
    width = max((len(r) for r in rows), default=1)
    ids = torch.full((len(rows), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(rows), width), dtype=torch.long)
    for i, r in enumerate(rows):
        ids[i, : len(r)] = torch.tensor(r, dtype=torch.long)
        mask[i, : len(r)] = 1
    return ids, mask


def encode_token_sentences(sentences, tokenizer, tag_vocab: list[str],
                           max_len: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Padded id/mask/tag tensors for token classification; pad tags are -100."""
    tag_ids = {t: i for i, t in enumerate(tag_vocab)}
    tok_rows, tag_rows = [], []
    for sent in sentences:
        toks = tokenizer.encode_tokens(sent.tokens)[:max_len]
        tags = [tag_ids[t] for t in sent.tags][:max_len]
        tok_rows.append(toks)
        tag_rows.append(tags)
    width = max((len(r) for r in tok_rows), default=1)
    ids = torch.full((len(tok_rows), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros((len(tok_rows), width), dtype=torch.long)
    tags = torch.full((len(tok_rows), width), -100, dtype=torch.long)
    for i, (tr, gr) in enumerate(zip(tok_rows, tag_rows)):
        ids[i, : len(tr)] = torch.tensor(tr, dtype=torch.long)
        mask[i, : len(tr)] = 1
        tags[i, : len(gr)] = torch.tensor(gr, dtype=torch.long)
    return ids, mask, tags


# ---------------------------------------------------------------------------
# encoder modules


class Embeddings(nn.Module):
    def __init__(self, desc: EncoderDescriptor):
        super().__init__()
        self.word = nn.Embedding(desc.vocab_size, desc.hidden_dim)
        self.position = nn.Embedding(desc.max_positions, desc.hidden_dim)
        self.token_type = nn.Embedding(desc.type_vocab_size, desc.hidden_dim)
        self.norm = nn.LayerNorm(desc.hidden_dim)

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        positions = torch.arange(token_ids.shape[1], device=token_ids.device)
        types = torch.zeros_like(token_ids)
        x = self.word(token_ids) + self.position(positions)[None, :, :] + self.token_type(types)
        return self.norm(x)


class SelfAttention(nn.Module):
    def __init__(self, hidden: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = hidden // num_heads
        self.query = nn.Linear(hidden, hidden)
        self.key = nn.Linear(hidden, hidden)
        self.value = nn.Linear(hidden, hidden)
        self.output = nn.Linear(hidden, hidden)
        self.norm = nn.LayerNorm(hidden)

    def project(self, x: torch.Tensor, additive_mask: torch.Tensor) -> torch.Tensor:
        b, L, h = x.shape

        def split(t: torch.Tensor) -> torch.Tensor:
            return t.view(b, L, self.num_heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.query(x)), split(self.key(x)), split(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        scores = scores + additive_mask[:, None, None, :]
        weights = torch.softmax(scores, dim=-1)
        ctx = (weights @ v).transpose(1, 2).reshape(b, L, h)
        return self.output(ctx)


class FeedForward(nn.Module):
    def __init__(self, hidden: int, ffn: int):
        super().__init__()
        self.intermediate = nn.Linear(hidden, ffn)
        self.output = nn.Linear(ffn, hidden)
        self.norm = nn.LayerNorm(hidden)

    def transform(self, x: torch.Tensor) -> torch.Tensor:
        return self.output(torch.nn.functional.gelu(self.intermediate(x)))


class EncoderLayer(nn.Module):
    def __init__(self, desc: EncoderDescriptor):
        super().__init__()
        self.attention = SelfAttention(desc.hidden_dim, desc.num_heads)
        self.ffn = FeedForward(desc.hidden_dim, desc.ffn_dim)
        self.attn_compacter: CompacterBlock | None = None
        self.compacter: CompacterBlock | None = None

    def forward(self, x: torch.Tensor, additive_mask: torch.Tensor) -> torch.Tensor:
        a = self.attention.project(x, additive_mask)
        if self.attn_compacter is not None:
            a = self.attn_compacter(a)
        x = self.attention.norm(x + a)
        h = self.ffn.transform(x)
        if self.compacter is not None:
            h = self.compacter(h)
        return self.ffn.norm(x + h)


class TransformerEncoderModel(nn.Module):
    def __init__(self, desc: EncoderDescriptor, seed: int | None = None):
        super().__init__()
        self.desc = desc
        self.embeddings = Embeddings(desc)
        self.layers = nn.ModuleList(EncoderLayer(desc) for _ in range(desc.num_layers))
        if seed is not None:
            self.reset_parameters(seed)

    # Init std 0.1 (not the 0.02 of trained-checkpoint lineages): with a frozen
    # random base, attention must mix token content into the pooled position
    # strongly enough for the adapters and head to have usable features.
    def reset_parameters(self, seed: int, std: float = 0.1) -> None:
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, (nn.Linear, nn.Embedding)):
                module.weight.data.normal_(0.0, std, generator=gen)
                if isinstance(module, nn.Linear) and module.bias is not None:
                    module.bias.data.zero_()
            elif isinstance(module, nn.LayerNorm):
                module.weight.data.fill_(1.0)
                module.bias.data.zero_()

    def forward(self, token_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        if token_ids.shape[1] > self.desc.max_positions:
            raise ValueError(
                f"sequence length {token_ids.shape[1]} exceeds max_positions {self.desc.max_positions}"
            )
        additive = (1.0 - attention_mask.to(self.embeddings.word.weight.dtype)) * NEG_INF
        x = self.embeddings(token_ids)
        for layer in self.layers:
            x = layer(x, additive)
        return x


# ---------------------------------------------------------------------------
# heads


class PooledLinearHead(nn.Module):
    """First-token pooling followed by a linear classifier (BERT-style)."""

    def __init__(self, hidden: int, num_labels: int):
        super().__init__()
        self.classifier = nn.Linear(hidden, num_labels)

    def forward(self, hidden_states: torch.Tensor) -> torch.Tensor:
        return self.classifier(hidden_states[:, 0])


class DenseProjectionHead(nn.Module):
    """Dense + tanh + projection over the first token (RoBERTa-style)."""

    def __init__(self, hidden: int, num_labels: int):
        super().__init__()
        self.dense = nn.Linear(hidden, hidden)
        self.out_proj = nn.Linear(hidden, num_labels)

    def forward(self, hidden_states: torch.Tensor) -> torch.Tensor:
        x = torch.tanh(self.dense(hidden_states[:, 0]))
        return self.out_proj(x)


class TokenHead(nn.Module):
    """Per-position linear classifier for token labelling."""

    def __init__(self, hidden: int, num_labels: int):
        super().__init__()
        self.classifier = nn.Linear(hidden, num_labels)

    def forward(self, hidden_states: torch.Tensor) -> torch.Tensor:
        return self.classifier(hidden_states)


def build_head(head: HeadSpec, desc: EncoderDescriptor) -> nn.Module:
    if head.kind == "token_classification":
        return TokenHead(desc.hidden_dim, head.num_labels)
    if head.style == "dense_projection":
        return DenseProjectionHead(desc.hidden_dim, head.num_labels)
    return PooledLinearHead(desc.hidden_dim, head.num_labels)


# ---------------------------------------------------------------------------
# adapted model


class AdaptedModel(nn.Module):
    """Encoder with inserted adapter blocks, a task head, and its trainable mask."""

    def __init__(self, encoder: TransformerEncoderModel, registry: SharedARegistry,
                 head_module: nn.Module, head_spec: HeadSpec, plan: PlacementPlan,
                 compacter_config: CompacterConfig):
        super().__init__()
        self.encoder = encoder
        self.shared_phm = registry
        self.head = head_module
        self.head_spec = head_spec
        self.plan = plan
        self.compacter_config = compacter_config
        self.mask: TrainableMask | None = None

    def compacter_layers(self) -> dict[int, CompacterBlock]:
        found = {}
        for i, layer in enumerate(self.encoder.layers):
            if layer.compacter is not None:
                found[i + 1] = layer.compacter
        return found

    def forward(self, token_ids: torch.Tensor, attention_mask: torch.Tensor) -> torch.Tensor:
        hidden = self.encoder(token_ids, attention_mask)
        return self.head(hidden)


def insert_compacters(encoder: TransformerEncoderModel, plan: PlacementPlan,
                      config: CompacterConfig, head: HeadSpec,
                      registry: SharedARegistry | None = None,
                      seed: int | None = None) -> AdaptedModel:
    """Attach blocks to the planned layers, build the head, freeze per the plan.

    Mutates the given encoder by attaching new submodules; existing parameters
    are untouched (same tensor objects before and after).
    """
    desc = encoder.desc
    if plan.num_layers != desc.num_layers:
        raise ValueError(f"plan depth {plan.num_layers} != encoder depth {desc.num_layers}")
    if config.hidden_dim != desc.hidden_dim:
        raise ValueError(f"config hidden {config.hidden_dim} != encoder hidden {desc.hidden_dim}")
    gen = torch.Generator().manual_seed(seed) if seed is not None else None
    registry = registry or SharedARegistry(config.init_range, gen)
    for idx in sorted(plan.layer_indices):
        layer = encoder.layers[idx - 1]
        if config.placement_variant == TWO_PER_BLOCK:
            layer.attn_compacter = CompacterBlock(config, registry, generator=gen)
        layer.compacter = CompacterBlock(config, registry, generator=gen)
    head_module = build_head(head, desc)
    if gen is not None:
        for p in head_module.parameters():
            if p.dim() > 1:
                p.data.normal_(0.0, 0.02, generator=gen)
            else:
                p.data.zero_()
    model = AdaptedModel(encoder, registry, head_module, head, plan, config)
    mask = build_trainable_mask(descriptor_from_model(model), plan)
    apply_mask(model, mask)
    model.mask = mask
    return model


def forward_sequence(model: AdaptedModel, token_ids: torch.Tensor,
                     attention_mask: torch.Tensor) -> torch.Tensor:
    if model.head_spec.kind != "sequence_classification":
        raise ValueError("model head is not a sequence classifier")
    if token_ids.shape[0] == 0:
        return torch.zeros((0, model.head_spec.num_labels))
    return model(token_ids, attention_mask)


def forward_tokens(model: AdaptedModel, token_ids: torch.Tensor,
                   attention_mask: torch.Tensor) -> torch.Tensor:
    if model.head_spec.kind != "token_classification":
        raise ValueError("model head is not a token classifier")
    if token_ids.shape[0] == 0:
        return torch.zeros((0, token_ids.shape[1], model.head_spec.num_labels))
    return model(token_ids, attention_mask)


# ---------------------------------------------------------------------------
# checkpoints

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.npz"
DESCRIPTOR_NAME = "descriptor.json"
DELTA_NAME = "delta.npz"
PLAN_NAME = "plan.json"


def _base_state(encoder: TransformerEncoderModel) -> dict:
    """State dict of the unadapted encoder: inserted adapter tensors excluded."""
    return {
        k: v for k, v in encoder.state_dict().items()
        if not {"compacter", "attn_compacter"} & set(k.split("."))
    }


def base_checkpoint_hash(encoder: TransformerEncoderModel) -> str:
    digest = hashlib.sha256()
    for name, p in sorted(_base_state(encoder).items()):
        digest.update(name.encode())
        digest.update(p.detach().cpu().to(torch.float32).numpy().tobytes())
    return digest.hexdigest()


def export_base_checkpoint(encoder: TransformerEncoderModel, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    state = {k: v.detach().cpu().to(torch.float32).numpy() for k, v in _base_state(encoder).items()}
    manifest = {k: list(v.shape) for k, v in state.items()}
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    np.savez(os.path.join(out_dir, WEIGHTS_NAME), **state)
    with open(os.path.join(out_dir, DESCRIPTOR_NAME), "w") as fh:
        json.dump(asdict(encoder.desc), fh, indent=2)
    return base_checkpoint_hash(encoder)


def load_base_checkpoint(in_dir: str) -> TransformerEncoderModel:
    with open(os.path.join(in_dir, DESCRIPTOR_NAME)) as fh:
        desc = EncoderDescriptor(**json.load(fh))
    with open(os.path.join(in_dir, MANIFEST_NAME)) as fh:
        manifest = json.load(fh)
    weights = np.load(os.path.join(in_dir, WEIGHTS_NAME))
    encoder = TransformerEncoderModel(desc)
    state = {}
    for key, shape in manifest.items():
        arr = weights[key]
        if list(arr.shape) != shape:
            raise ValueError(f"checkpoint tensor {key} has shape {arr.shape}, manifest says {shape}")
        state[key] = torch.from_numpy(arr)
    encoder.load_state_dict(state)
    return encoder


def export_delta_checkpoint(model: AdaptedModel, out_dir: str) -> None:
    """Save only the trainable parameters plus the plan; the base is referenced by hash."""
    if model.mask is None:
        raise ValueError("model has no trainable mask")
    os.makedirs(out_dir, exist_ok=True)
    delta = {
        name: p.detach().cpu().to(torch.float32).numpy()
        for name, p in model.named_parameters()
        if model.mask.flags.get(name, False)
    }
    np.savez(os.path.join(out_dir, DELTA_NAME), **delta)
    meta = {
        "strategy": model.plan.strategy,
        "layer_indices": sorted(model.plan.layer_indices),
        "num_layers": model.plan.num_layers,
        "compacter": asdict(model.compacter_config),
        "head": asdict(model.head_spec),
        "base_hash": base_checkpoint_hash(model.encoder),
        "mask_summary": model.mask.summary(),
    }
    with open(os.path.join(out_dir, PLAN_NAME), "w") as fh:
        json.dump(meta, fh, indent=2)


def load_delta_checkpoint(in_dir: str, encoder: TransformerEncoderModel,
                          strict_hash: bool = True) -> AdaptedModel:
    """Re-insert blocks per the saved plan and restore trainable tensors."""
    with open(os.path.join(in_dir, PLAN_NAME)) as fh:
        meta = json.load(fh)
    if strict_hash:
        have = base_checkpoint_hash(encoder)
        if have != meta["base_hash"]:
            raise ValueError(f"base hash mismatch: checkpoint {meta['base_hash'][:12]}…, encoder {have[:12]}…")
    plan = PlacementPlan(meta["strategy"], frozenset(meta["layer_indices"]), meta["num_layers"])
    config = CompacterConfig(**meta["compacter"])
    head = HeadSpec(**meta["head"])
    model = insert_compacters(encoder, plan, config, head, seed=0)
    delta = np.load(os.path.join(in_dir, DELTA_NAME))
    with torch.no_grad():
        params = dict(model.named_parameters())
        for key in delta.files:
            if key not in params:
                raise ValueError(f"delta tensor {key} not present in model")
            params[key].copy_(torch.from_numpy(delta[key]))
    return model
