"""Dataset ingestion, validation, sampling, and desk-scale synthetic corpora.

Three task shapes: spam (text,label csv), domain classification (one domain
per line, label attached by source file), and token-labelled threat-report
sentences in two-column CoNLL layout with BIOES tags over 21 entity types.
Loaders are lossless modulo quarantine: every input row ends up either in
the result or in the quarantine list with a reason.
"""

from __future__ import annotations

import csv
import json
import logging
import random
import re
from dataclasses import dataclass, field

logger = logging.getLogger(__name__)


class InvalidDataError(ValueError):
    """Input file unusable as a whole (empty, missing columns)."""


# ---------------------------------------------------------------------------
# label vocabularies

SPAM_LABELS = ("ham", "spam")
DGA_LABELS = ("Non-DGA", "DGA")

# Short tag codes for the 21 entity categories; the long names are the
# documented meaning (see README for the full mapping table).
ENTITY_TYPES: dict[str, str] = {
    "APT": "threat participant or campaign group",
    "SECTEAM": "security team or vendor",
    "IDTY": "authentication identity",
    "OS": "operating system",
    "EMAIL": "email address",
    "LOC": "location",
    "TIME": "time expression",
    "IP": "IP address",
    "DOM": "domain name",
    "URL": "URL",
    "PROT": "protocol",
    "FILE": "file name",
    "TOOL": "tool",
    "MD5": "MD5 hash",
    "SHA1": "SHA1 hash",
    "SHA2": "SHA2 hash",
    "MAL": "malware",
    "ENCR": "encryption algorithm",
    "ACT": "attack action",
    "VULNAME": "vulnerability name",
    "VULID": "vulnerability identifier",
}

BIOES_PREFIXES = ("B", "I", "E", "S")


def tag_vocabulary(entity_types=None) -> list[str]:
    """O plus B-/I-/E-/S- per type: 85 tags for the full 21-type catalog."""
    types = list(entity_types or ENTITY_TYPES)
    return ["O"] + [f"{p}-{t}" for t in types for p in BIOES_PREFIXES]


TAG_VOCAB = tag_vocabulary()


# ---------------------------------------------------------------------------
# containers


@dataclass(frozen=True)
class TextExample:
    text: str
    label: str


@dataclass(frozen=True)
class TokenSentence:
    tokens: tuple[str, ...]
    tags: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.tokens) != len(self.tags):
            raise ValueError(f"{len(self.tokens)} tokens vs {len(self.tags)} tags")


@dataclass
class LoadResult:
    examples: list
    quarantined: list[tuple[str, str]]  # (row repr, reason)
    counts: dict[str, int] = field(default_factory=dict)

    @property
    def total_rows(self) -> int:
        return len(self.examples) + len(self.quarantined)


@dataclass
class DatasetSplit:
    train: list
    test: list
    provenance: str


# ---------------------------------------------------------------------------
# BIOES machinery


@dataclass(frozen=True)
class TagViolation:
    position: int
    rule: str

    def __str__(self) -> str:
        return f"position {self.position}: {self.rule}"


def _parse_tag(tag: str, types) -> tuple[str | None, str | None]:
    """(prefix, type) for a well-formed tag, (None, None) otherwise; O -> ("O", None)."""
    if tag == "O":
        return "O", None
    if len(tag) > 2 and tag[1] == "-" and tag[0] in BIOES_PREFIXES and tag[2:] in types:
        return tag[0], tag[2:]
    return None, None


def validate_bioes(tags, entity_types=None) -> list[TagViolation]:
    """Check that the sequence is in the language (O | S-X | B-X I-X* E-X)* per type.

    Returns an empty list when valid; otherwise one violation per broken rule,
    naming the position.
    """
    types = set(entity_types or ENTITY_TYPES)
    violations: list[TagViolation] = []
    open_type: str | None = None
    for i, tag in enumerate(tags):
        prefix, etype = _parse_tag(tag, types)
        if prefix is None:
            violations.append(TagViolation(i, f"unknown tag {tag!r}"))
            open_type = None
            continue
        if open_type is not None:
            if prefix == "I" and etype == open_type:
                continue
            if prefix == "E" and etype == open_type:
                open_type = None
                continue
            violations.append(TagViolation(i, f"open {open_type} span interrupted by {tag}"))
            open_type = None
            # fall through: re-evaluate this tag against closed state
        if prefix == "O" or prefix == "S":
            continue
        if prefix == "B":
            open_type = etype
        else:  # I or E with no open span
            violations.append(TagViolation(i, f"{tag} without a matching B-{etype}"))
    if open_type is not None:
        violations.append(TagViolation(len(tags) - 1, f"B-{open_type} span never closed"))
    return violations


def repair_bioes(tags, entity_types=None) -> tuple[list[str], int]:
    """Coerce every tag that breaks span structure to O; never invent spans.

    Returns the repaired sequence (always valid) and the number of coerced
    positions.
    """
    types = set(entity_types or ENTITY_TYPES)
    out = list(tags)
    coerced = 0
    pending: list[int] = []  # indices of the currently open, unclosed span
    open_type: str | None = None

    def flush_pending() -> None:
        nonlocal coerced, open_type
        for idx in pending:
            out[idx] = "O"
            coerced += 1
        pending.clear()
        open_type = None

    for i, tag in enumerate(tags):
        prefix, etype = _parse_tag(tag, types)
        if prefix is None:
            flush_pending()
            out[i] = "O"
            coerced += 1
        elif prefix == "O":
            flush_pending()
        elif prefix == "S":
            flush_pending()
        elif prefix == "B":
            flush_pending()
            pending.append(i)
            open_type = etype
        elif prefix == "I":
            if open_type == etype:
                pending.append(i)
            else:
                flush_pending()
                out[i] = "O"
                coerced += 1
        else:  # E
            if open_type == etype:
                pending.clear()
                open_type = None
            else:
                flush_pending()
                out[i] = "O"
                coerced += 1
    flush_pending()
    return out, coerced


def decode_spans(tags, entity_types=None) -> set[tuple[int, int, str]]:
    """(start, end inclusive, type) for every complete span in a valid sequence."""
    types = set(entity_types or ENTITY_TYPES)
    spans: set[tuple[int, int, str]] = set()
    start: int | None = None
    open_type: str | None = None
    for i, tag in enumerate(tags):
        prefix, etype = _parse_tag(tag, types)
        if prefix == "S":
            spans.add((i, i, etype))
            start, open_type = None, None
        elif prefix == "B":
            start, open_type = i, etype
        elif prefix == "E" and open_type == etype and start is not None:
            spans.add((start, i, etype))
            start, open_type = None, None
        elif prefix == "I" and open_type == etype:
            continue
        else:
            start, open_type = None, None
    return spans


# ---------------------------------------------------------------------------
# loaders


def load_spam(path: str) -> LoadResult:
    """Read a text,label csv; labels normalized to lowercase ham/spam."""
    examples: list[TextExample] = []
    quarantined: list[tuple[str, str]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise InvalidDataError(f"{path}: empty file")
        fields = {name.strip().lower(): name for name in reader.fieldnames}
        if "text" not in fields or "label" not in fields:
            raise InvalidDataError(f"{path}: need text,label columns, got {reader.fieldnames}")
        for row in reader:
            text = (row.get(fields["text"]) or "").strip()
            label = (row.get(fields["label"]) or "").strip().lower()
            if not text:
                quarantined.append((json.dumps(row), "empty text"))
            elif label not in SPAM_LABELS:
                quarantined.append((json.dumps(row), f"unknown label {label!r}"))
            else:
                examples.append(TextExample(text, label))
    if not examples and not quarantined:
        raise InvalidDataError(f"{path}: no data rows")
    for row, reason in quarantined:
        logger.warning("spam loader rejected row (%s): %s", reason, row[:200])
    counts = {label: sum(1 for e in examples if e.label == label) for label in SPAM_LABELS}
    return LoadResult(examples, quarantined, counts)


def load_dga(benign_path: str, dga_path: str, benign_n: int = 10000,
             dga_n: int = 10261, seed: int = 0) -> LoadResult:
    """One domain per line per file; labels attached by source.

    Oversized files are randomly subsampled to the requested sizes. Domains
    appearing in both files are kept with both labels but flagged in counts.
    """

    def read_lines(p: str) -> tuple[list[str], list[tuple[str, str]]]:
        good, bad = [], []
        with open(p, encoding="utf-8") as fh:
            for raw in fh:
                domain = raw.strip()
                if not domain:
                    continue  # blank separator lines are not data rows
                if any(c.isspace() for c in domain):
                    bad.append((raw.rstrip("\n"), "whitespace in domain"))
                else:
                    good.append(domain)
        return good, bad

    rng = random.Random(seed)
    benign, bad_b = read_lines(benign_path)
    dga, bad_d = read_lines(dga_path)
    if len(benign) > benign_n:
        benign = rng.sample(benign, benign_n)
    if len(dga) > dga_n:
        dga = rng.sample(dga, dga_n)
    dupes = sorted(set(benign) & set(dga))
    if dupes:
        logger.warning("domains appear in both files: %s", dupes[:10])
    examples = [TextExample(d, "Non-DGA") for d in benign] + [TextExample(d, "DGA") for d in dga]
    quarantined = bad_b + bad_d
    counts = {"Non-DGA": len(benign), "DGA": len(dga), "duplicates": len(dupes)}
    if not examples:
        raise InvalidDataError("no domains loaded")
    return LoadResult(examples, quarantined, counts)


def load_aptner(path: str, entity_types=None) -> LoadResult:
    """Two-column token/tag lines; blank lines separate sentences.

    Sentences with unknown tags, malformed lines, or invalid BIOES structure
    are quarantined with the first broken rule as reason.
    """
    vocab = set(tag_vocabulary(entity_types))
    sentences: list[TokenSentence] = []
    quarantined: list[tuple[str, str]] = []
    tokens: list[str] = []
    tags: list[str] = []
    problems: list[str] = []

    def finish() -> None:
        nonlocal tokens, tags, problems
        if tokens or problems:
            reason = None
            if problems:
                reason = problems[0]
            else:
                bad = [t for t in tags if t not in vocab]
                if bad:
                    reason = f"unknown tag {bad[0]!r}"
                else:
                    violations = validate_bioes(tags, entity_types)
                    if violations:
                        reason = str(violations[0])
            if reason is None:
                sentences.append(TokenSentence(tuple(tokens), tuple(tags)))
            else:
                quarantined.append((" ".join(tokens) or "<malformed>", reason))
        tokens, tags, problems = [], [], []

    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line.strip():
                finish()
                continue
            parts = line.split()
            if len(parts) < 2:
                problems.append(f"malformed line {line!r}")
                continue
            tokens.append(parts[0])
            tags.append(parts[-1])
    finish()
    if not sentences and not quarantined:
        raise InvalidDataError(f"{path}: no sentences")
    counts = {
        "sentences": len(sentences),
        "tokens": sum(len(s.tokens) for s in sentences),
        "entities": sum(len(decode_spans(s.tags)) for s in sentences),
    }
    return LoadResult(sentences, quarantined, counts)


# ---------------------------------------------------------------------------
# sampling and splits


@dataclass
class BalancedSample:
    examples: list[TextExample]
    per_class: dict[str, int]
    balanced: bool


def balanced_sample(examples: list[TextExample], n: int, seed: int) -> BalancedSample:
    """Deterministic class-balanced subset; per-class counts within one item.

    If a class is too small for an even share, takes what exists, fills from
    the others, and reports the achieved balance.
    """
    if n > len(examples):
        raise ValueError(f"requested {n} from {len(examples)} examples")
    rng = random.Random(seed)
    by_label: dict[str, list[TextExample]] = {}
    for ex in examples:
        by_label.setdefault(ex.label, []).append(ex)
    labels = sorted(by_label)
    for label in labels:
        rng.shuffle(by_label[label])
    share, extra = divmod(n, len(labels))
    want = {label: share + (1 if i < extra else 0) for i, label in enumerate(labels)}
    picked: dict[str, list[TextExample]] = {}
    short = 0
    for label in labels:
        take = min(want[label], len(by_label[label]))
        short += want[label] - take
        picked[label] = by_label[label][:take]
    # backfill shortfall from classes with spare examples
    for label in labels:
        while short > 0 and len(picked[label]) < len(by_label[label]):
            picked[label].append(by_label[label][len(picked[label])])
            short -= 1
    out = [ex for label in labels for ex in picked[label]]
    rng.shuffle(out)
    per_class = {label: len(picked[label]) for label in labels}
    balanced = max(per_class.values()) - min(per_class.values()) <= 1
    if not balanced:
        logger.warning("balanced_sample achieved %s for n=%d", per_class, n)
    return BalancedSample(out, per_class, balanced)


def stratified_split(examples, test_fraction: float = 0.2, seed: int = 0,
                     label_of=None) -> DatasetSplit:
    """Per-class deterministic shuffle split; works on any labelled sequence."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    label_of = label_of or (lambda ex: ex.label)
    rng = random.Random(seed)
    by_label: dict[str, list] = {}
    for ex in examples:
        by_label.setdefault(label_of(ex), []).append(ex)
    train, test = [], []
    for label in sorted(by_label):
        pool = by_label[label]
        rng.shuffle(pool)
        cut = max(1, int(round(len(pool) * test_fraction))) if len(pool) > 1 else 0
        test.extend(pool[:cut])
        train.extend(pool[cut:])
    rng.shuffle(train)
    rng.shuffle(test)
    return DatasetSplit(train, test, f"stratified 80/20 seed={seed}")


def plain_split(items, test_fraction: float = 0.2, seed: int = 0) -> DatasetSplit:
    """Unstratified deterministic split, for token sentences."""
    rng = random.Random(seed)
    pool = list(items)
    rng.shuffle(pool)
    cut = int(round(len(pool) * test_fraction))
    return DatasetSplit(pool[cut:], pool[:cut], f"plain {1 - test_fraction:.0%}/{test_fraction:.0%} seed={seed}")


# ---------------------------------------------------------------------------
# synthetic corpora (CI never needs the licensed datasets)

_WORDS = (
    "market report update meeting agenda budget status project schedule office "
    "travel invoice review notes quarterly client lunch draft final team plan "
    "contract summary data energy forecast delivery payment vendor order support "
    "network server backup account access release version change request ticket "
    "shop cloud mail news blog store media game play book music photo video home "
    "tech web app site link page search portal hub lab info help desk"
).split()

_SPAM_PHRASES = (
    "win money now", "free offer expires today", "click here to claim your prize",
    "lowest price guaranteed act fast", "congratulations you are selected",
    "urgent wire transfer needed", "limited time investment opportunity",
    "earn cash from home instantly", "cheap meds no prescription", "you won the lottery",
)

_HAM_PHRASES = (
    "please review the attached report", "meeting moved to thursday afternoon",
    "can you send the quarterly numbers", "lunch at noon works for me",
    "draft agenda for tomorrow attached", "thanks for the update on the project",
    "reminder to submit your timesheet", "notes from the client call attached",
    "the build is green after the fix", "travel approval for next week confirmed",
)


def synth_spam_examples(n: int, seed: int = 0) -> list[TextExample]:
    """Templated ham/spam texts, half and half."""
    rng = random.Random(seed)
    out = []
    for i in range(n):
        spam = i % 2 == 1
        phrases = _SPAM_PHRASES if spam else _HAM_PHRASES
        body = [rng.choice(phrases)]
        body.extend(rng.choice(_WORDS) for _ in range(rng.randint(2, 6)))
        rng.shuffle(body)
        out.append(TextExample(" ".join(body), "spam" if spam else "ham"))
    return out


_TLDS = (".com", ".net", ".org", ".io")


def synth_domain_examples(n_benign: int, n_dga: int, seed: int = 0) -> list[TextExample]:
    """Dictionary-word domains vs uniformly random machine-generated strings."""
    rng = random.Random(seed)
    alphabet = "abcdefghijklmnopqrstuvwxyz0123456789"
    out = []
    for _ in range(n_benign):
        words = [rng.choice(_WORDS) for _ in range(rng.randint(1, 2))]
        sep = rng.choice(["", "-"])
        out.append(TextExample(sep.join(words) + rng.choice(_TLDS), "Non-DGA"))
    for _ in range(n_dga):
        length = rng.randint(10, 24)
        name = "".join(rng.choice(alphabet) for _ in range(length))
        out.append(TextExample(name + rng.choice(_TLDS), "DGA"))
    rng.shuffle(out)
    return out


_APT_NAMES = ("redfox", "stonepanda", "darkhydra", "nightwolf")
_MALWARE = ("lockbit", "emotet", "plugx", "shamoon")
_LOCATIONS = ("europe", "singapore", "brazil", "canada")
_TOOLS = ("mimikatz", "cobalt strike", "psexec", "nmap")


def synth_apt_sentences(n: int, seed: int = 0) -> list[TokenSentence]:
    """Templated threat-report sentences with valid BIOES tags."""
    rng = random.Random(seed)
    out = []
    for _ in range(n):
        apt = rng.choice(_APT_NAMES)
        mal = rng.choice(_MALWARE)
        loc = rng.choice(_LOCATIONS)
        tool = rng.choice(_TOOLS).split()
        tokens = ["the", "group", apt, "deployed", mal, "against", "targets", "in", loc, "using"]
        tags = ["O", "O", "S-APT", "O", "S-MAL", "O", "O", "O", "S-LOC", "O"]
        tokens.extend(tool)
        if len(tool) == 1:
            tags.append("S-TOOL")
        else:
            tags.extend(["B-TOOL"] + ["I-TOOL"] * (len(tool) - 2) + ["E-TOOL"])
        out.append(TokenSentence(tuple(tokens), tuple(tags)))
    return out


# ---------------------------------------------------------------------------
# QC reporting

_URL_LIKE = re.compile(r"^(https?://|www\.)|\.(com|net|org|io)(/|$)", re.IGNORECASE)


def suspicious_o_tokens(sentences) -> list[dict]:
    """URL-shaped tokens labelled O, listed for human review (never auto-fixed)."""
    findings = []
    for si, sent in enumerate(sentences):
        for ti, (token, tag) in enumerate(zip(sent.tokens, sent.tags)):
            if tag == "O" and _URL_LIKE.search(token):
                findings.append({"sentence": si, "position": ti, "token": token})
    return findings


def write_qc_report(report: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)


def write_classification_csv(examples, path: str) -> None:
    """text,label csv in the exact shape load_spam ingests."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["text", "label"])
        for ex in examples:
            writer.writerow([ex.text, ex.label])
