"""Loaders, BIOES validation against a DFA oracle, sampling, synthetics."""

import itertools
import random
import re

import pytest

from compfreeze.data import (
    ENTITY_TYPES,
    InvalidDataError,
    TAG_VOCAB,
    TextExample,
    TokenSentence,
    balanced_sample,
    decode_spans,
    load_aptner,
    load_dga,
    load_spam,
    repair_bioes,
    stratified_split,
    suspicious_o_tokens,
    synth_apt_sentences,
    synth_domain_examples,
    synth_spam_examples,
    tag_vocabulary,
    validate_bioes,
)

TWO_TYPES = ("X", "Y")
TWO_TYPE_SYMBOLS = ["O"] + [f"{p}-{t}" for t in TWO_TYPES for p in "BIES"]

# Regex-DFA oracle over a compressed alphabet: each tag becomes one character.
_CHAR = {"O": "o",
         "B-X": "b", "I-X": "i", "E-X": "e", "S-X": "s",
         "B-Y": "B", "I-Y": "I", "E-Y": "E", "S-Y": "S"}
_ORACLE = re.compile(r"(o|s|S|bi*e|BI*E)*$")


def oracle_accepts(tags) -> bool:
    return _ORACLE.fullmatch("".join(_CHAR[t] for t in tags)) is not None


class TestValidateBioes:
    def test_all_outside_ok(self):
        assert validate_bioes(["O", "O", "O"]) == []

    def test_full_span_ok(self):
        assert validate_bioes(["B-MAL", "I-MAL", "E-MAL"]) == []

    def test_two_token_span_ok(self):
        assert validate_bioes(["B-APT", "E-APT"]) == []

    def test_single_token_span_ok(self):
        assert validate_bioes(["S-DOM"]) == []

    def test_type_switch_mid_span(self):
        violations = validate_bioes(["B-MAL", "E-APT"])
        assert violations and violations[0].position == 1

    def test_inside_without_begin(self):
        violations = validate_bioes(["I-APT"])
        assert violations and "without" in violations[0].rule

    def test_unknown_tag(self):
        violations = validate_bioes(["URL"])
        assert violations and "unknown" in violations[0].rule

    def test_exhaustive_vs_dfa_oracle(self):
        # every tag string of length <= 4 over a two-type alphabet (9^1..9^4)
        checked = 0
        for length in range(1, 5):
            for tags in itertools.product(TWO_TYPE_SYMBOLS, repeat=length):
                ours = validate_bioes(tags, TWO_TYPES) == []
                assert ours == oracle_accepts(tags), tags
                checked += 1
        assert checked == 9 + 81 + 729 + 6561


class TestRepair:
    def test_valid_sequence_untouched(self):
        tags = ["O", "B-MAL", "I-MAL", "E-MAL", "S-APT"]
        fixed, coerced = repair_bioes(tags)
        assert fixed == tags and coerced == 0

    def test_unterminated_span_coerced(self):
        fixed, coerced = repair_bioes(["B-MAL", "I-MAL"])
        assert fixed == ["O", "O"] and coerced == 2

    def test_orphan_inside_coerced(self):
        fixed, coerced = repair_bioes(["I-APT", "O"])
        assert fixed == ["O", "O"] and coerced == 1

    def test_type_switch_coerced_not_guessed(self):
        fixed, coerced = repair_bioes(["B-MAL", "E-APT", "S-DOM"])
        assert fixed == ["O", "O", "S-DOM"] and coerced == 2

    def test_repair_always_yields_valid(self):
        rng = random.Random(0)
        symbols = TWO_TYPE_SYMBOLS + ["garbage"]
        for _ in range(500):
            tags = [rng.choice(symbols) for _ in range(rng.randint(1, 10))]
            fixed, _ = repair_bioes(tags, TWO_TYPES)
            assert validate_bioes(fixed, TWO_TYPES) == []


class TestDecodeSpans:
    def test_spans_extracted(self):
        tags = ["O", "B-MAL", "E-MAL", "S-APT", "O"]
        assert decode_spans(tags) == {(1, 2, "MAL"), (3, 3, "APT")}


class TestTagVocabulary:
    def test_85_tags(self):
        assert len(TAG_VOCAB) == 4 * 21 + 1 == 85
        assert TAG_VOCAB[0] == "O"
        assert len(ENTITY_TYPES) == 21

    def test_reduced_vocab(self):
        assert len(tag_vocabulary(TWO_TYPES)) == 9


class TestLoadSpam:
    def write(self, tmp_path, rows):
        path = tmp_path / "spam.csv"
        path.write_text("text,label\n" + "\n".join(rows) + "\n")
        return str(path)

    def test_single_row(self, tmp_path):
        res = load_spam(self.write(tmp_path, ["hello,ham"]))
        assert len(res.examples) == 1
        assert res.examples[0].label == "ham"

    def test_label_normalization(self, tmp_path):
        res = load_spam(self.write(tmp_path, ['"win cash now","Spam "']))
        assert res.examples[0].label == "spam"

    def test_unknown_label_quarantined(self, tmp_path):
        res = load_spam(self.write(tmp_path, ["hello,ham", "weird,banana"]))
        assert len(res.examples) == 1
        assert len(res.quarantined) == 1
        assert res.total_rows == 2

    def test_counts_reported(self, tmp_path):
        res = load_spam(self.write(tmp_path, ["a,ham", "b,ham", "c,spam"]))
        assert res.counts == {"ham": 2, "spam": 1}

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(InvalidDataError):
            load_spam(str(path))

    def test_missing_columns_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(InvalidDataError):
            load_spam(str(path))


class TestLoadDga:
    def test_two_small_files(self, tmp_path):
        benign = tmp_path / "benign.txt"
        benign.write_text("good.com\nnice.net\nshop.org\n")
        dga = tmp_path / "dga.txt"
        dga.write_text("qx1z.com\nzzk9.net\nppqq.io\n")
        res = load_dga(str(benign), str(dga))
        assert len(res.examples) == 6
        assert res.counts["Non-DGA"] == 3 and res.counts["DGA"] == 3

    def test_duplicates_flagged_and_kept(self, tmp_path):
        benign = tmp_path / "benign.txt"
        benign.write_text("same.com\nother.com\n")
        dga = tmp_path / "dga.txt"
        dga.write_text("same.com\n")
        res = load_dga(str(benign), str(dga))
        assert res.counts["duplicates"] == 1
        assert len(res.examples) == 3

    def test_malformed_rows_quarantined(self, tmp_path):
        benign = tmp_path / "benign.txt"
        benign.write_text("ok.com\nbad domain.com\n\n")
        dga = tmp_path / "dga.txt"
        dga.write_text("x.io\n")
        res = load_dga(str(benign), str(dga))
        assert len(res.quarantined) == 1  # blank line skipped by strip -> empty quarantined
        reasons = {r for _, r in res.quarantined}
        assert "whitespace in domain" in reasons

    def test_subsampling(self, tmp_path):
        benign = tmp_path / "benign.txt"
        benign.write_text("\n".join(f"site{i}.com" for i in range(50)) + "\n")
        dga = tmp_path / "dga.txt"
        dga.write_text("\n".join(f"x{i}.io" for i in range(50)) + "\n")
        res = load_dga(str(benign), str(dga), benign_n=10, dga_n=20, seed=1)
        assert res.counts["Non-DGA"] == 10 and res.counts["DGA"] == 20


class TestLoadAptner:
    def write(self, tmp_path, blocks):
        path = tmp_path / "ner.txt"
        path.write_text("\n\n".join("\n".join(b) for b in blocks) + "\n")
        return str(path)

    def test_single_token_span(self, tmp_path):
        res = load_aptner(self.write(tmp_path, [["evil.com S-DOM"]]))
        assert len(res.examples) == 1
        assert res.examples[0].tags == ("S-DOM",)

    def test_two_token_span(self, tmp_path):
        res = load_aptner(self.write(tmp_path, [["lazarus B-APT", "group E-APT"]]))
        assert len(res.examples) == 1

    def test_orphan_inside_quarantined(self, tmp_path):
        res = load_aptner(self.write(tmp_path, [["group I-APT"]]))
        assert len(res.examples) == 0 and len(res.quarantined) == 1

    def test_unknown_tag_quarantined(self, tmp_path):
        res = load_aptner(self.write(tmp_path, [["x B-NOPE", "y E-NOPE"]]))
        assert len(res.quarantined) == 1
        assert "unknown tag" in res.quarantined[0][1]

    def test_malformed_line_quarantined(self, tmp_path):
        res = load_aptner(self.write(tmp_path, [["loneword"], ["ok O"]]))
        assert len(res.examples) == 1 and len(res.quarantined) == 1

    def test_counts(self, tmp_path):
        res = load_aptner(self.write(tmp_path, [
            ["the O", "lazarus B-APT", "group E-APT"],
            ["evil.com S-DOM"],
        ]))
        assert res.counts == {"sentences": 2, "tokens": 4, "entities": 2}


class TestBalancedSample:
    def make(self, n_ham, n_spam):
        return ([TextExample(f"h{i}", "ham") for i in range(n_ham)]
                + [TextExample(f"s{i}", "spam") for i in range(n_spam)])

    def test_small_balance(self):
        sample = balanced_sample(self.make(3, 3), 4, seed=0)
        assert sample.per_class == {"ham": 2, "spam": 2}
        assert sample.balanced

    def test_200_from_balanced_pool(self):
        sample = balanced_sample(self.make(150, 150), 200, seed=1)
        assert sample.per_class == {"ham": 100, "spam": 100}

    def test_208_subset(self):
        sample = balanced_sample(self.make(150, 150), 208, seed=2)
        assert sample.per_class == {"ham": 104, "spam": 104}
        assert len(sample.examples) == 208

    def test_deterministic(self):
        pool = self.make(50, 50)
        a = balanced_sample(pool, 20, seed=9).examples
        b = balanced_sample(pool, 20, seed=9).examples
        assert a == b

    def test_minority_shortfall_reported(self):
        sample = balanced_sample(self.make(10, 3), 10, seed=0)
        assert sample.per_class["spam"] == 3
        assert sample.per_class["ham"] == 7
        assert not sample.balanced

    def test_oversized_request_rejected(self):
        with pytest.raises(ValueError):
            balanced_sample(self.make(2, 2), 5, seed=0)


class TestSplitsAndSynthetics:
    def test_stratified_split_disjoint(self):
        examples = synth_spam_examples(100, seed=0)
        split = stratified_split(examples, 0.2, seed=1)
        assert len(split.train) + len(split.test) == 100
        assert set(id(e) for e in split.train).isdisjoint(id(e) for e in split.test)
        test_spam = sum(1 for e in split.test if e.label == "spam")
        assert 8 <= test_spam <= 12  # roughly stratified

    def test_synth_domains_labels(self):
        examples = synth_domain_examples(30, 20, seed=2)
        counts = {"Non-DGA": 0, "DGA": 0}
        for e in examples:
            counts[e.label] += 1
        assert counts == {"Non-DGA": 30, "DGA": 20}

    def test_synth_apt_sentences_valid(self):
        for sent in synth_apt_sentences(50, seed=3):
            assert validate_bioes(sent.tags) == []
            assert all(t in TAG_VOCAB for t in sent.tags)

    def test_suspicious_o_tokens(self):
        sents = [TokenSentence(("visit", "http://bad.example/x", "now"), ("O", "O", "O"))]
        findings = suspicious_o_tokens(sents)
        assert len(findings) == 1 and findings[0]["position"] == 1
