"""Chat-completion gateway: prompt templates, transport with retries, parsers.

The wire format is the common JSON chat shape ({"model": ..., "messages":
[...]}) with a bearer token read from an environment variable. Every test
path runs against in-process mock transports (scripted, oracle,
noisy-oracle); the HTTP transport is opt-in.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import random
import re
import time
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)


class GatewayError(Exception):
    """Base for transport and protocol failures."""


class TransportError(GatewayError):
    """Retryable failure that survived every retry (network, 5xx, timeout)."""


class RequestRejected(GatewayError):
    """Non-retryable HTTP 4xx."""

    def __init__(self, status: int, detail: str = ""):
        super().__init__(f"HTTP {status}: {detail}")
        self.status = status


class TemplateError(GatewayError):
    """Unresolved or unknown placeholder during rendering."""


# ---------------------------------------------------------------------------
# prompt templates


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    instruction: str
    system: str | None = None
    input_header: str = "Input:"


SPAM_PROMPT = PromptTemplate(
    name="spam",
    instruction=(
        "Classify the following input sentences as `ham' or `spam'. "
        "Provide the classification result in csv format, including the "
        "original input sentence and the predicted label."
    ),
    input_header="Input:",
)

DGA_PROMPT = PromptTemplate(
    name="dga",
    instruction=(
        "Classify the domain names as `DGA' or `Non-DGA'. Provide the "
        "classification result in csv format, including the original domain "
        "names and the predicted label."
    ),
    input_header="Input Domains:",
)

CTI_SIMPLE_PROMPT = PromptTemplate(
    name="cti_simple",
    instruction=(
        "Considering the following named entities, {list_of_entities}, your "
        "task is to classify each token to one of the labels provided. For "
        "each token provided, generate a corresponding label from the list. "
        "Ensure that the output is in format: input_token, predicted_label"
    ),
    input_header="Input:",
)

CTI_DETAILED_PROMPT = PromptTemplate(
    name="cti_detailed",
    system=(
        "You are an expert Named Entity Recognition (NER) system that follows "
        "the task description given. You will classify named entities using "
        "the BIOES labeling format, where `B-' indicates beginning of a "
        "multi-token entity, `I-' indicates inside of multi-token entity and "
        "`E-' indicates end of multi-token entity. `S-' indicates a single "
        "token entity and `O' refers to token not part of any entity."
    ),
    instruction=(
        "Consider the following named entities, {list_of_entities}, your task "
        "is to identify and classify each token to named entities. You will "
        "use the following description of named entities:\n"
        "{entity_descriptions}\n"
        "Classification Rules:\n"
        "1. While classifying, carefully consider the named entities "
        "definitions and labels of named entities provided.\n"
        "2. Only output the labeled entities in BIOES format, without any "
        "explanations or extra text.\n"
        "3. For tokens not belonging to any entity, mark them as O (Outside).\n"
        "Output Format: Ensure that the output is in format: input token, "
        "predicted label"
    ),
    input_header="Input:",
)

TEMPLATES = {t.name: t for t in (SPAM_PROMPT, DGA_PROMPT, CTI_SIMPLE_PROMPT, CTI_DETAILED_PROMPT)}

_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")


def _csv_block(values) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for v in values:
        writer.writerow([v])
    return buf.getvalue()


def render_prompt(template: PromptTemplate, inputs, entity_catalog=None) -> list[dict]:
    """Chat messages for a batch of inputs; byte-stable and injective.

    entity_catalog: list of (label, description) pairs backing the
    {list_of_entities} / {entity_descriptions} placeholders. Inputs are
    embedded csv-quoted, one record per line, under a header that carries
    the count, so distinct input lists always render to distinct bytes.
    """
    inputs = list(inputs)
    if not inputs:
        raise ValueError("no inputs to render")
    context = {}
    if entity_catalog:
        context["list_of_entities"] = ", ".join(label for label, _ in entity_catalog)
        context["entity_descriptions"] = "\n".join(
            f"- {label}: {desc}" for label, desc in entity_catalog
        )

    def fill(text: str) -> str:
        def sub(match: re.Match) -> str:
            key = match.group(1)
            if key not in context:
                raise TemplateError(f"unresolved placeholder {{{key}}} in template {template.name}")
            return context[key]

        return _PLACEHOLDER_RE.sub(sub, text)

    user = (
        fill(template.instruction)
        + f"\n\n{template.input_header} ({len(inputs)} rows, csv)\n"
        + _csv_block(inputs)
    )
    messages = []
    if template.system:
        messages.append({"role": "system", "content": fill(template.system)})
    messages.append({"role": "user", "content": user})
    return messages


_INPUT_BLOCK_RE = re.compile(r"\((\d+) rows, csv\)\n", re.DOTALL)


def extract_request_inputs(body: dict) -> list[str]:
    """Recover the raw inputs from a rendered request (exact inverse of render)."""
    user = next(m["content"] for m in body["messages"] if m["role"] == "user")
    match = _INPUT_BLOCK_RE.search(user)
    if not match:
        raise ValueError("request carries no input block")
    n = int(match.group(1))
    block = user[match.end():]
    rows = [r[0] for r in csv.reader(io.StringIO(block)) if r]
    if len(rows) != n:
        raise ValueError(f"input block announced {n} rows, parsed {len(rows)}")
    return rows


# ---------------------------------------------------------------------------
# endpoint + transport


@dataclass(frozen=True)
class LLMEndpointConfig:
    base_url: str = "http://localhost:8080/v1/chat/completions"
    model: str = "gpt-4"
    credential_env: str = "LLM_API_KEY"
    timeout_s: float = 30.0
    max_retries: int = 3
    backoff_base_s: float = 0.5
    max_in_flight: int = 4

    def __post_init__(self) -> None:
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if not self.timeout_s > 0:
            raise ValueError("timeout_s must be > 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


@dataclass
class TransportResponse:
    status: int
    payload: dict | None = None
    detail: str = ""


class TransportFailure(Exception):
    """Raised by transports for retryable conditions (connection, timeout)."""


class HttpTransport:
    """POSTs the chat body; bearer token from the configured env var."""

    def __init__(self, config: LLMEndpointConfig):
        self.config = config

    def __call__(self, body: dict) -> TransportResponse:
        import requests

        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.config.credential_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        try:
            resp = requests.post(self.config.base_url, json=body, headers=headers,
                                 timeout=self.config.timeout_s)
        except requests.exceptions.RequestException as exc:
            raise TransportFailure(str(exc)) from exc
        try:
            payload = resp.json()
        except ValueError:
            payload = None
        return TransportResponse(resp.status_code, payload, resp.text[:500])


@dataclass
class Completion:
    text: str
    latency_s: float
    attempts: int
    model: str
    usage: dict | None = None


def complete(endpoint: LLMEndpointConfig, messages, transport=None,
             sleep=time.sleep, replay_log=None) -> Completion:
    """One chat completion with exponential-backoff retries.

    Retryable: transport failures and HTTP 5xx. Non-retryable: HTTP 4xx.
    The messages object is never mutated, and a success is returned
    immediately (a retry can never duplicate one).
    """
    transport = transport or HttpTransport(endpoint)
    body = {"model": endpoint.model, "messages": [dict(m) for m in messages]}
    last_error: Exception | None = None
    for attempt in range(endpoint.max_retries + 1):
        start = time.perf_counter()
        try:
            resp = transport(body)
        except TransportFailure as exc:
            last_error = exc
            logger.warning("transport failure on attempt %d: %s", attempt + 1, exc)
        else:
            latency = time.perf_counter() - start
            if 200 <= resp.status < 300:
                try:
                    text = resp.payload["choices"][0]["message"]["content"]
                except (TypeError, KeyError, IndexError) as exc:
                    raise GatewayError(f"malformed completion payload: {resp.payload!r:.200}") from exc
                usage = resp.payload.get("usage") if isinstance(resp.payload, dict) else None
                completion = Completion(text, latency, attempt + 1, endpoint.model, usage)
                if replay_log is not None:
                    replay_log.record(body, completion)
                return completion
            if 400 <= resp.status < 500:
                raise RequestRejected(resp.status, resp.detail)
            last_error = TransportFailure(f"HTTP {resp.status}: {resp.detail}")
            logger.warning("retryable status on attempt %d: HTTP %d", attempt + 1, resp.status)
        if attempt < endpoint.max_retries:
            sleep(endpoint.backoff_base_s * (2 ** attempt))
    raise TransportError(
        f"gave up after {endpoint.max_retries + 1} attempts: {last_error}"
    ) from last_error


def complete_many(endpoint: LLMEndpointConfig, message_batches, transport=None,
                  sleep=time.sleep, replay_log=None):
    """Bounded-concurrency completions; results align with the input order.

    Failures are returned in-place as the raised GatewayError rather than
    aborting the whole batch.
    """
    from concurrent.futures import ThreadPoolExecutor

    batches = list(message_batches)

    def one(messages):
        try:
            return complete(endpoint, messages, transport=transport, sleep=sleep,
                            replay_log=replay_log)
        except GatewayError as exc:
            return exc

    if endpoint.max_in_flight <= 1 or len(batches) <= 1:
        return [one(m) for m in batches]
    with ThreadPoolExecutor(max_workers=endpoint.max_in_flight) as pool:
        return list(pool.map(one, batches))


# ---------------------------------------------------------------------------
# replay log


def _body_key(body: dict) -> str:
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


class ReplayLogger:
    """Appends request/response transcripts as JSON lines."""

    def __init__(self, path: str):
        import threading

        self.path = path
        self._lock = threading.Lock()

    def record(self, body: dict, completion: Completion) -> None:
        entry = {
            "key": _body_key(body),
            "request": body,
            "response": completion.text,
            "latency_s": completion.latency_s,
        }
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry) + "\n")


class ReplayTransport:
    """Serves recorded responses keyed by request hash, for offline reruns."""

    def __init__(self, path: str):
        import threading

        self._queues: dict[str, list[str]] = {}
        self._lock = threading.Lock()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                entry = json.loads(line)
                self._queues.setdefault(entry["key"], []).append(entry["response"])

    def __call__(self, body: dict) -> TransportResponse:
        key = _body_key(body)
        with self._lock:
            queue = self._queues.get(key)
            if not queue:
                raise TransportFailure(f"no recorded response for request {key[:12]}…")
            return _ok(queue.pop(0))


# ---------------------------------------------------------------------------
# mock transports


def _ok(text: str) -> TransportResponse:
    return TransportResponse(200, {"choices": [{"message": {"content": text}}]})


class ScriptedTransport:
    """Plays back a fixed script; entries may be reply text, a TransportFailure
    instance (retryable), or a TransportResponse (arbitrary status).

    Replies are consumed in call order, so scripted runs should stay
    sequential (max_in_flight 1); the lock only guards the queue itself.
    """

    def __init__(self, script):
        import threading

        self.script = list(script)
        self.calls = 0
        self._lock = threading.Lock()

    def __call__(self, body: dict) -> TransportResponse:
        with self._lock:
            if not self.script:
                raise TransportFailure("script exhausted")
            self.calls += 1
            item = self.script.pop(0)
        if isinstance(item, TransportFailure):
            raise item
        if isinstance(item, TransportResponse):
            return item
        return _ok(str(item))


class OracleTransport:
    """Answers classification requests from a gold input->label mapping."""

    def __init__(self, gold: dict[str, str]):
        self.gold = dict(gold)

    def reply_rows(self, inputs) -> list[tuple[str, str]]:
        return [(text, self.gold[text]) for text in inputs]

    def __call__(self, body: dict) -> TransportResponse:
        inputs = extract_request_inputs(body)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        for text, label in self.reply_rows(inputs):
            writer.writerow([text, label])
        return _ok(buf.getvalue())


class NoisyOracleTransport(OracleTransport):
    """Oracle that flips each answer to a wrong label with probability p.

    The flip decision is a seeded hash of the input text, so results are
    deterministic per (seed, input) regardless of batching, retries, or
    request concurrency.
    """

    def __init__(self, gold: dict[str, str], labels, p: float, seed: int = 0):
        super().__init__(gold)
        self.labels = list(labels)
        self.p = p
        self.seed = seed

    def _draw(self, text: str, salt: str) -> float:
        digest = hashlib.sha256(f"{self.seed}:{salt}:{text}".encode()).digest()
        return int.from_bytes(digest[:8], "big") / 2 ** 64

    def reply_rows(self, inputs) -> list[tuple[str, str]]:
        rows = []
        for text in inputs:
            label = self.gold[text]
            if self._draw(text, "flip") < self.p:
                wrong = [l for l in self.labels if l != label]
                label = wrong[int(self._draw(text, "pick") * len(wrong))]
            rows.append((text, label))
        return rows


class AdversarialTransport(OracleTransport):
    """Always answers a wrong label (binary tasks: the other one)."""

    def __init__(self, gold: dict[str, str], labels):
        super().__init__(gold)
        self.labels = list(labels)

    def reply_rows(self, inputs) -> list[tuple[str, str]]:
        rows = []
        for text in inputs:
            wrong = [l for l in self.labels if l != self.gold[text]]
            rows.append((text, wrong[0]))
        return rows


class TokenOracleTransport:
    """Answers token-labelling requests from gold sentences keyed by token tuple."""

    def __init__(self, gold_sentences):
        self.gold = {tuple(s.tokens): list(s.tags) for s in gold_sentences}

    def tags_for(self, tokens: tuple[str, ...]) -> list[str]:
        return self.gold[tokens]

    def __call__(self, body: dict) -> TransportResponse:
        tokens = tuple(extract_request_inputs(body))
        tags = self.tags_for(tokens)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        for token, tag in zip(tokens, tags):
            writer.writerow([token, tag])
        return _ok(buf.getvalue())


# ---------------------------------------------------------------------------
# response parsing


@dataclass(frozen=True)
class LabelRow:
    input: str
    label: str
    explanation: str | None = None


@dataclass(frozen=True)
class ParseFailure:
    raw_line: str
    reason: str


@dataclass
class ParsedLabels:
    rows: list[LabelRow] = field(default_factory=list)
    failures: list[ParseFailure] = field(default_factory=list)

    @property
    def line_count(self) -> int:
        return len(self.rows) + len(self.failures)


def parse_csv_labels(text: str, allowed_labels, allow_explanation: bool = False) -> ParsedLabels:
    """Split reply lines into (input, label[, explanation]) rows and failures.

    Every non-blank line lands in exactly one bucket. Labels match the
    allowed set case-insensitively and are returned in canonical casing.
    """
    canonical = {label.lower(): label for label in allowed_labels}
    parsed = ParsedLabels()
    for line in text.splitlines():
        if not line.strip():
            continue
        fields = next(csv.reader(io.StringIO(line)), [])
        max_fields = 3 if allow_explanation else 2
        if len(fields) < 2 or len(fields) > max_fields:
            parsed.failures.append(ParseFailure(line, f"malformed row ({len(fields)} fields)"))
            continue
        label = fields[1].strip()
        if label.lower() not in canonical:
            parsed.failures.append(ParseFailure(line, f"invalid-label {label!r}"))
            continue
        explanation = fields[2].strip() if len(fields) == 3 else None
        parsed.rows.append(LabelRow(fields[0], canonical[label.lower()], explanation))
    return parsed


@dataclass
class TokenLabelResult:
    rows: list[LabelRow] = field(default_factory=list)
    failures: list[ParseFailure] = field(default_factory=list)
    aligned: bool = True
    tags: list[str] | None = None
    coerced: int = 0


def parse_token_labels(text: str, tag_vocab, expected_tokens=None) -> TokenLabelResult:
    """Parse token,tag lines, check alignment with the sent tokens, repair spans.

    Tags outside the vocabulary fail as invalid-tag; an echoed token sequence
    differing from the request records an alignment failure. Valid, aligned
    output is span-repaired (invalid transitions coerced to O, counted).
    """
    from .data import repair_bioes

    vocab = set(tag_vocab)
    result = TokenLabelResult()
    for line in text.splitlines():
        if not line.strip():
            continue
        fields = next(csv.reader(io.StringIO(line)), [])
        if len(fields) != 2:
            result.failures.append(ParseFailure(line, f"malformed row ({len(fields)} fields)"))
            continue
        token, tag = fields[0].strip(), fields[1].strip()
        if tag not in vocab:
            result.failures.append(ParseFailure(line, f"invalid-tag {tag!r}"))
            continue
        result.rows.append(LabelRow(token, tag))
    if expected_tokens is not None:
        echoed = [r.input for r in result.rows]
        if list(expected_tokens) != echoed:
            result.aligned = False
            result.failures.append(
                ParseFailure(" ".join(echoed[:8]), "echoed tokens misaligned with request")
            )
    if result.aligned and not any(f.reason.startswith(("invalid-tag", "malformed")) for f in result.failures):
        tags = [r.label for r in result.rows]
        result.tags, result.coerced = repair_bioes(tags)
    return result
