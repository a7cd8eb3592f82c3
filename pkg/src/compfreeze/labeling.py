"""Zero-shot labelling pipeline: prompt unlabeled inputs, parse, account.

Inputs whose replies fail validation are excluded from the produced dataset
(never defaulted to a guess) but are fully accounted in the QC block, so
output size + excluded = input size always holds.
"""

from __future__ import annotations

import logging
from collections import Counter, deque
from dataclasses import dataclass, field

from .data import TextExample, TokenSentence, decode_spans
from .gateway import (
    GatewayError,
    LLMEndpointConfig,
    PromptTemplate,
    complete,
    complete_many,
    parse_csv_labels,
    parse_token_labels,
    render_prompt,
)
from . import metrics

logger = logging.getLogger(__name__)

DEFAULT_CLASSIFICATION_BATCH = 20  # inputs per call; token sentences go one per call


@dataclass
class LabelledDataset:
    examples: list
    source: str
    qc: dict = field(default_factory=dict)


def _chunks(seq, size):
    for lo in range(0, len(seq), size):
        yield seq[lo: lo + size]


def label_dataset(inputs, template: PromptTemplate, endpoint: LLMEndpointConfig,
                  allowed_labels, transport=None, batch_size: int = DEFAULT_CLASSIFICATION_BATCH,
                  sleep=None, entity_catalog=None, replay_log=None) -> LabelledDataset:
    """One label attempt per input, order preserved, failures accounted.

    Transport errors that survive retries mark the whole call's inputs
    unlabelled and the pipeline continues with the next chunk.
    """
    inputs = list(inputs)
    if not inputs:
        raise ValueError("no inputs to label")
    kwargs = {"sleep": sleep} if sleep is not None else {}
    kwargs["replay_log"] = replay_log
    labelled: dict[int, str] = {}
    unlabelled = 0
    unmatched = 0
    parse_failures = 0
    spurious = 0
    offset = 0
    chunks = list(_chunks(inputs, batch_size))
    completions = complete_many(endpoint,
                                [render_prompt(template, chunk, entity_catalog)
                                 for chunk in chunks],
                                transport=transport, **kwargs)
    for chunk, completion in zip(chunks, completions):
        if isinstance(completion, GatewayError):
            logger.warning("labelling call failed after retries: %s", completion)
            unlabelled += len(chunk)
            offset += len(chunk)
            continue
        parsed = parse_csv_labels(completion.text, allowed_labels)
        parse_failures += len(parsed.failures)
        queues: dict[str, deque] = {}
        for row in parsed.rows:
            queues.setdefault(row.input, deque()).append(row)
        for i, text in enumerate(chunk):
            queue = queues.get(text)
            if queue:
                labelled[offset + i] = queue.popleft().label
            else:
                unmatched += 1
        spurious += sum(len(q) for q in queues.values())
        offset += len(chunk)
    examples = [TextExample(inputs[i], labelled[i]) for i in sorted(labelled)]
    total = len(inputs)
    qc = {
        "total_inputs": total,
        "labelled": len(labelled),
        "invalid": unmatched,
        "unlabelled": unlabelled,
        "coverage": len(labelled) / total,
        "invalid_fraction": unmatched / total,
        "unlabelled_fraction": unlabelled / total,
        "parse_failures": parse_failures,
        "spurious_rows": spurious,
        "per_class": dict(Counter(ex.label for ex in examples)),
    }
    return LabelledDataset(examples, f"llm:{endpoint.model}", qc)


def label_token_sentences(sentences, template: PromptTemplate, endpoint: LLMEndpointConfig,
                          tag_vocab, entity_catalog, transport=None,
                          sleep=None, replay_log=None) -> LabelledDataset:
    """Token labelling, one sentence per call; replies are span-repaired."""
    sentences = list(sentences)
    if not sentences:
        raise ValueError("no sentences to label")
    kwargs = {"sleep": sleep} if sleep is not None else {}
    kwargs["replay_log"] = replay_log
    out: list[TokenSentence] = []
    unlabelled = 0
    invalid = 0
    coerced = 0
    for sent in sentences:
        messages = render_prompt(template, list(sent.tokens), entity_catalog)
        try:
            completion = complete(endpoint, messages, transport=transport, **kwargs)
        except GatewayError as exc:
            logger.warning("token labelling call failed: %s", exc)
            unlabelled += 1
            continue
        result = parse_token_labels(completion.text, tag_vocab, expected_tokens=sent.tokens)
        if result.tags is None:
            invalid += 1
            continue
        coerced += result.coerced
        out.append(TokenSentence(sent.tokens, tuple(result.tags)))
    total = len(sentences)
    qc = {
        "total_inputs": total,
        "labelled": len(out),
        "invalid": invalid,
        "unlabelled": unlabelled,
        "coverage": len(out) / total,
        "invalid_fraction": invalid / total,
        "unlabelled_fraction": unlabelled / total,
        "coerced_tags": coerced,
    }
    return LabelledDataset(out, f"llm:{endpoint.model}", qc)


@dataclass
class AgreementReport:
    overall: float
    per_class: dict[str, float]
    confusion: dict[str, dict[str, int]]
    span_f1: float | None = None

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "per_class": dict(self.per_class),
            "confusion": {g: dict(p) for g, p in self.confusion.items()},
            "span_f1": self.span_f1,
        }


def agreement_report(llm_examples, gold_examples) -> AgreementReport:
    """Exact-match agreement between two labelled datasets over the same inputs."""
    if len(llm_examples) != len(gold_examples):
        raise ValueError(f"size mismatch: {len(llm_examples)} vs {len(gold_examples)}")
    for a, b in zip(llm_examples, gold_examples):
        if a.text != b.text:
            raise ValueError(f"inputs misaligned at {a.text!r} vs {b.text!r}")
    gold = [e.label for e in gold_examples]
    pred = [e.label for e in llm_examples]
    confusion: dict[str, dict[str, int]] = {}
    for g, p in zip(gold, pred):
        confusion.setdefault(g, {}).setdefault(p, 0)
        confusion[g][p] += 1
    per_class = {
        g: row.get(g, 0) / sum(row.values()) for g, row in confusion.items()
    }
    return AgreementReport(metrics.accuracy(gold, pred), per_class, confusion)


def token_agreement_report(llm_sentences, gold_sentences) -> AgreementReport:
    """Token-level agreement plus exact-match span F1 for sentence datasets."""
    if len(llm_sentences) != len(gold_sentences):
        raise ValueError(f"size mismatch: {len(llm_sentences)} vs {len(gold_sentences)}")
    gold_tags: list[str] = []
    pred_tags: list[str] = []
    gold_spans: set = set()
    pred_spans: set = set()
    for i, (a, b) in enumerate(zip(llm_sentences, gold_sentences)):
        if a.tokens != b.tokens:
            raise ValueError(f"sentence {i} tokens misaligned")
        gold_tags.extend(b.tags)
        pred_tags.extend(a.tags)
        gold_spans |= {(i,) + s for s in decode_spans(b.tags)}
        pred_spans |= {(i,) + s for s in decode_spans(a.tags)}
    confusion: dict[str, dict[str, int]] = {}
    for g, p in zip(gold_tags, pred_tags):
        confusion.setdefault(g, {}).setdefault(p, 0)
        confusion[g][p] += 1
    per_class = {g: row.get(g, 0) / sum(row.values()) for g, row in confusion.items()}
    return AgreementReport(
        metrics.accuracy(gold_tags, pred_tags), per_class, confusion,
        span_f1=metrics.span_f1(gold_spans, pred_spans),
    )
