"""Confidence scoring and threshold routing to an LLM fallback.

Local predictions below the threshold are re-asked to the LLM; everything
else keeps the local answer. The merge preserves input order and reports F1
over the whole set before and after. Confidence is the maximum of the
softmax distribution; sentence confidence averages that over non-padding
tokens.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field

from . import metrics
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

logger = logging.getLogger(__name__)

ROUTED_BATCH = 20


def _softmax(logits) -> list[float]:
    vals = [float(v) for v in logits]
    if any(not math.isfinite(v) for v in vals):
        raise ValueError(f"non-finite logits: {vals}")
    top = max(vals)
    exps = [math.exp(v - top) for v in vals]
    norm = sum(exps)
    return [e / norm for e in exps]


CONFIDENCE_MEASURES = ("max_prob", "margin", "neg_entropy")


def confidence_sequence(logits, measure: str = "max_prob") -> float:
    """Confidence in [0, 1] of one logit row (needs >= 2 classes).

    max_prob (default): maximum of the softmax distribution. Alternatives:
    margin = top1 - top2 probability; neg_entropy = 1 - H/H_max.
    """
    vals = list(logits)
    if len(vals) < 2:
        raise ValueError("need at least two logits")
    probs = _softmax(vals)
    if measure == "max_prob":
        return max(probs)
    if measure == "margin":
        top = sorted(probs, reverse=True)
        return top[0] - top[1]
    if measure == "neg_entropy":
        h = -sum(p * math.log(p) for p in probs if p > 0)
        return 1.0 - h / math.log(len(probs))
    raise ValueError(f"unknown confidence measure {measure!r}")


def confidence_sentence(token_logits, padding_mask, measure: str = "max_prob") -> float:
    """Mean over non-padding tokens of the per-token confidence."""
    rows = list(token_logits)
    mask = [bool(m) for m in padding_mask]
    if len(rows) != len(mask):
        raise ValueError(f"{len(rows)} logit rows vs {len(mask)} mask entries")
    kept = [confidence_sequence(row, measure) for row, m in zip(rows, mask) if m]
    if not kept:
        raise ValueError("all positions are padding")
    return sum(kept) / len(kept)


@dataclass(frozen=True)
class RouterConfig:
    threshold: float = 0.75
    task: str = "spam"  # spam | dga | cti
    measure: str = "max_prob"

    def __post_init__(self) -> None:
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.task not in ("spam", "dga", "cti"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.measure not in CONFIDENCE_MEASURES:
            raise ValueError(f"unknown confidence measure {self.measure!r}")


@dataclass
class LocalPrediction:
    """One local model output: text (or token tuple), label(s), confidence."""

    input_id: int
    text: object  # str for classification, tuple[str, ...] for token tasks
    label: object  # str, or tuple of tags
    confidence: float
    gold: object | None = None


@dataclass
class RoutingRecord:
    input_id: int
    text: object
    local_label: object
    confidence: float
    decision: str  # kept | routed
    llm_label: object | None = None
    llm_explanation: str | None = None
    final_label: object = None
    final_source: str = "local"  # local | llm
    fallback_reason: str | None = None
    gold: object | None = None

    def to_json(self) -> str:
        d = asdict(self)
        for key in ("text", "local_label", "llm_label", "final_label", "gold"):
            if isinstance(d[key], tuple):
                d[key] = list(d[key])
        return json.dumps(d)


def partition_by_confidence(predictions, threshold: float):
    """(kept, routed): routed strictly below the threshold."""
    kept = [p for p in predictions if p.confidence >= threshold]
    routed = [p for p in predictions if p.confidence < threshold]
    return kept, routed


@dataclass
class RouterResult:
    records: list[RoutingRecord]
    f1_before: float | None
    f1_after: float | None
    routed_count: int
    kept_count: int

    def report(self) -> dict:
        return {
            "f1_before_llm": self.f1_before,
            "f1_after_llm": self.f1_after,
            "routed": self.routed_count,
            "kept": self.kept_count,
        }


def _task_f1(cfg: RouterConfig, golds, labels) -> float:
    if cfg.task == "cti":
        flat_gold = [t for g in golds for t in g]
        flat_pred = [t for p in labels for t in p]
        return metrics.weighted_f1(flat_gold, flat_pred)
    positive = "spam" if cfg.task == "spam" else "DGA"
    return metrics.binary_f1(list(golds), list(labels), positive)


def _ask_classification(routed, cfg, endpoint, template, allowed_labels, transport, sleep, replay_log=None):
    """LLM answers for routed classification inputs, keyed by prediction id."""
    answers: dict[int, tuple[str, str | None]] = {}
    kwargs = {"sleep": sleep} if sleep is not None else {}
    kwargs["replay_log"] = replay_log
    chunks = [routed[lo: lo + ROUTED_BATCH] for lo in range(0, len(routed), ROUTED_BATCH)]
    completions = complete_many(endpoint,
                                [render_prompt(template, [p.text for p in chunk])
                                 for chunk in chunks],
                                transport=transport, **kwargs)
    for chunk, completion in zip(chunks, completions):
        if isinstance(completion, GatewayError):
            logger.warning("routing call failed, keeping local predictions: %s", completion)
            continue
        parsed = parse_csv_labels(completion.text, allowed_labels, allow_explanation=True)
        queues: dict[str, deque] = {}
        for row in parsed.rows:
            queues.setdefault(row.input, deque()).append(row)
        for p in chunk:
            queue = queues.get(p.text)
            if queue:
                row = queue.popleft()
                answers[p.input_id] = (row.label, row.explanation)
    return answers


def _ask_tokens(routed, endpoint, template, tag_vocab, entity_catalog, transport, sleep, replay_log=None):
    answers: dict[int, tuple[tuple[str, ...], str | None]] = {}
    kwargs = {"sleep": sleep} if sleep is not None else {}
    kwargs["replay_log"] = replay_log
    for p in routed:
        messages = render_prompt(template, list(p.text), entity_catalog)
        try:
            completion = complete(endpoint, messages, transport=transport, **kwargs)
        except GatewayError as exc:
            logger.warning("routing call failed for sentence %d: %s", p.input_id, exc)
            continue
        result = parse_token_labels(completion.text, tag_vocab, expected_tokens=p.text)
        if result.tags is not None:
            answers[p.input_id] = (tuple(result.tags), None)
    return answers


def route_and_merge(predictions, cfg: RouterConfig, endpoint: LLMEndpointConfig,
                    template: PromptTemplate, allowed_labels=None, tag_vocab=None,
                    entity_catalog=None, transport=None, sleep=None,
                    replay_log=None) -> RouterResult:
    """Partition by threshold, ask the LLM for the routed side, merge in order.

    An endpoint failure or unparseable reply falls back to the local
    prediction, flagged on the record. F1 before/after is computed over the
    whole prediction set whenever golds are present.
    """
    predictions = list(predictions)
    kept, routed = partition_by_confidence(predictions, cfg.threshold)
    if cfg.task == "cti":
        if tag_vocab is None:
            raise ValueError("token routing needs tag_vocab")
        answers = _ask_tokens(routed, endpoint, template, tag_vocab, entity_catalog,
                              transport, sleep, replay_log)
    else:
        if allowed_labels is None:
            raise ValueError("classification routing needs allowed_labels")
        answers = _ask_classification(routed, cfg, endpoint, template, allowed_labels,
                                      transport, sleep, replay_log)
    routed_ids = {p.input_id for p in routed}
    records = []
    for p in predictions:
        rec = RoutingRecord(
            input_id=p.input_id, text=p.text, local_label=p.label,
            confidence=p.confidence, decision="routed" if p.input_id in routed_ids else "kept",
            gold=p.gold, final_label=p.label,
        )
        if rec.decision == "routed":
            if p.input_id in answers:
                label, explanation = answers[p.input_id]
                rec.llm_label = label
                rec.llm_explanation = explanation
                rec.final_label = label
                rec.final_source = "llm"
            else:
                rec.fallback_reason = "llm output missing or unparseable"
        records.append(rec)
    f1_before = f1_after = None
    if all(p.gold is not None for p in predictions) and predictions:
        golds = [p.gold for p in predictions]
        f1_before = _task_f1(cfg, golds, [p.label for p in predictions])
        f1_after = _task_f1(cfg, golds, [r.final_label for r in records])
    return RouterResult(records, f1_before, f1_after, len(routed), len(kept))


def write_routing_transcript(records, path: str) -> None:
    """One RoutingRecord per line, JSON."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


# ---------------------------------------------------------------------------
# producing predictions from a trained model


def predictions_from_model(model, data, batch_size: int = 64,
                           measure: str = "max_prob") -> list[LocalPrediction]:
    """Score an encoded dataset into routable predictions (ids follow input order)."""
    from .training import predict

    logits = predict(model, data, batch_size)
    preds: list[LocalPrediction] = []
    if data.token_level:
        for i in range(len(data)):
            mask = data.mask[i].tolist()
            rows = logits[i].tolist()
            conf = confidence_sentence(rows, mask, measure)
            n = sum(mask)
            tag_ids = logits[i, :n].argmax(-1).tolist()
            tags = tuple(data.label_names[t] for t in tag_ids)
            gold_ids = [g for g in data.labels[i].tolist() if g != -100]
            gold = tuple(data.label_names[g] for g in gold_ids)
            preds.append(LocalPrediction(i, tuple(data.texts[i]), tags, conf, gold))
    else:
        for i in range(len(data)):
            row = logits[i].tolist()
            conf = confidence_sequence(row, measure)
            label = data.label_names[int(logits[i].argmax())]
            gold = data.label_names[int(data.labels[i])]
            preds.append(LocalPrediction(i, data.texts[i], label, conf, gold))
    return preds
