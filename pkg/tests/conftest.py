"""Shared builders for toy hosts and datasets."""

from __future__ import annotations

import pytest
import torch

from compfreeze.compacter import CompacterConfig
from compfreeze.data import synth_domain_examples
from compfreeze.encoder import (
    CharTokenizer,
    EncoderDescriptor,
    TransformerEncoderModel,
    insert_compacters,
)
from compfreeze.freeze import HeadSpec, plan_for_strategy
from compfreeze.training import encode_dataset


def toy_descriptor(hidden: int = 64, layers: int = 12, vocab: int = 50,
                   head_style: str = "pooled_linear") -> EncoderDescriptor:
    return EncoderDescriptor(
        num_layers=layers, hidden_dim=hidden, num_heads=4, ffn_dim=hidden * 2,
        vocab_size=vocab, max_positions=64, head_style=head_style,
    )


def toy_model(strategy: str = "even_lc", hidden: int = 64, layers: int = 12,
              seed: int = 0, head: HeadSpec | None = None,
              reduction: int = 16, placement: str = "after_ffn_only"):
    desc = toy_descriptor(hidden=hidden, layers=layers)
    encoder = TransformerEncoderModel(desc, seed=seed)
    plan = plan_for_strategy(strategy, layers)
    config = CompacterConfig(hidden_dim=hidden, reduction_factor=reduction,
                             placement_variant=placement)
    head = head or HeadSpec("sequence_classification", 2)
    return insert_compacters(encoder, plan, config, head, seed=seed + 1)


@pytest.fixture
def dga_data():
    examples = synth_domain_examples(40, 40, seed=3)
    tok = CharTokenizer()
    return encode_dataset("dga", examples, tok, max_seq_len=32)


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)
