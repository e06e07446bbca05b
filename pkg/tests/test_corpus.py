"""
Gradus QR v1.0 - Corpus Tests
Loading, pronoun replacement, difficulty scoring and partitioning
"""

import json

import numpy as np
import pytest

from src.core.corpus import (
    DEFAULT_SCHEME,
    Interval,
    IntervalScheme,
    RuleAnnotation,
    class_statistics,
    difficulty_score,
    eleven_class_scheme,
    equal_width_scheme,
    load_annotations,
    load_corpus,
    make_record,
    partition,
    partition_from_labels,
    pronoun_replace,
    rule_frequency,
    save_corpus,
    scheme_by_name,
    score_corpus,
    ten_bin_scheme,
    tercile_partition,
)
from src.core.exceptions import (
    DuplicateRecord,
    InvalidScheme,
    ParseError,
    SchemaError,
    ScoreRange,
    TooFewRecords,
    UnknownRecord,
)
from src.core.textmetrics import tokenize


def write_lines(path, rows):
    path.write_text("".join(json.dumps(row) + "\n" for row in rows), encoding="utf-8")
    return path


ROW = {"dialogue_id": "d1", "turn": 1, "question": "why ?", "history": ["robert left the band ."],
       "rewrite": "why did robert leave the band ?"}


class TestLoadCorpus:
    def test_well_formed_file(self, tmp_path):
        rows = [dict(ROW, turn=i + 1) for i in range(3)]
        records = load_corpus(write_lines(tmp_path / "c.jsonl", rows))
        assert len(records) == 3
        assert records[0].record_id == "d1#1"
        assert records[0].question == ("why", "?")

    def test_missing_rewrite_reports_line(self, tmp_path):
        bad = {k: v for k, v in ROW.items() if k != "rewrite"}
        with pytest.raises(SchemaError) as info:
            load_corpus(write_lines(tmp_path / "c.jsonl", [ROW, bad]))
        assert info.value.line == 2
        assert info.value.field == "rewrite"

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("", encoding="utf-8")
        assert load_corpus(path) == []

    def test_malformed_json(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text("{not json\n", encoding="utf-8")
        with pytest.raises(ParseError):
            load_corpus(path)

    def test_duplicate_record_id_reports_both_lines(self, tmp_path):
        rows = [dict(ROW, turn=0, history=[], question="who is robert ?", rewrite="who is robert ?"),
                dict(ROW, turn=0, history=[])]
        with pytest.raises(SchemaError) as info:
            load_corpus(write_lines(tmp_path / "c.jsonl", rows))
        assert info.value.line == 2
        assert "d1#0" in info.value.message
        assert "line 1" in info.value.message

    def test_save_load_keeps_class(self, tmp_path, tiny_records):
        save_corpus(tiny_records, tmp_path / "out.jsonl")
        loaded = load_corpus(tmp_path / "out.jsonl")
        assert [r.class_label for r in loaded] == [r.class_label for r in tiny_records]
        assert loaded == tiny_records


class TestPronounReplace:
    def test_single_pronoun_substitution(self):
        q = tokenize("did he win any awards ?")
        rewrite = tokenize("did robert fripp win any awards ?")
        assert pronoun_replace(q, rewrite) == rewrite

    def test_no_pronoun(self):
        q = tokenize("why did the band split ?")
        assert pronoun_replace(q, tokenize("why did the band king crimson split ?")) == q

    def test_trailing_clause_not_explained(self):
        q = tokenize("are there other aspects ?")
        rewrite = tokenize("are there other aspects of the album besides the fire ?")
        assert pronoun_replace(q, rewrite) == q

    def test_two_pronouns_left_alone(self):
        q = tokenize("did he meet her ?")
        assert pronoun_replace(q, tokenize("did robert meet anna ?")) == q


class TestDifficultyScore:
    def test_identity(self):
        rec = make_record("who is robert fripp ?", "who is robert fripp ?")
        assert difficulty_score(rec) == 1.0

    def test_pronoun_rule_on(self, awards_record):
        assert difficulty_score(awards_record, apply_pronoun_rule=True) == 1.0

    def test_pronoun_rule_never_lowers_score(self, tiny_records):
        on = score_corpus(tiny_records, apply_pronoun_rule=True)
        off = score_corpus(tiny_records, apply_pronoun_rule=False)
        assert all(a >= b for a, b in zip(on, off))

    def test_hand_counted_without_rule(self):
        rec = make_record("did he win any awards", "did robert fripp win any awards")
        assert difficulty_score(rec, apply_pronoun_rule=False) == pytest.approx(0.3499, abs=1e-4)


class TestSchemes:
    @pytest.mark.parametrize("z,label", [(0.0, "hard"), (0.2, "hard"), (0.2000001, "medium"), (0.5, "medium"),
                                         (0.51, "easy"), (1.0, "easy")])
    def test_default_boundaries(self, z, label):
        assert DEFAULT_SCHEME.classify(z) == label

    def test_random_scores_land_in_exactly_one_class(self):
        scores = np.random.default_rng(0).random(10_000)
        for z in scores:
            owners = [iv.label for iv in DEFAULT_SCHEME.intervals if iv.contains(float(z))]
            assert owners == [DEFAULT_SCHEME.classify(float(z))]

    def test_left_closed_scheme(self):
        scheme = scheme_by_name("left_closed")
        assert scheme.classify(0.2) == "medium"
        assert scheme.classify(0.5) == "easy"

    def test_out_of_range_score(self):
        with pytest.raises(ScoreRange):
            DEFAULT_SCHEME.classify(1.5)

    def test_overlapping_intervals_rejected(self):
        with pytest.raises(InvalidScheme):
            IntervalScheme((Interval("a", 0.0, 0.6), Interval("b", 0.5, 1.0)))

    def test_gap_rejected(self):
        with pytest.raises(InvalidScheme):
            IntervalScheme((Interval("a", 0.0, 0.4), Interval("b", 0.5, 1.0)))

    def test_shared_closed_boundary_rejected(self):
        with pytest.raises(InvalidScheme):
            IntervalScheme((Interval("a", 0.0, 0.5), Interval("b", 0.5, 1.0)))

    def test_ten_bins(self):
        scheme = ten_bin_scheme()
        assert scheme.classify(0.1) == "0"
        assert scheme.classify(0.15) == "1"
        assert scheme.classify(1.0) == "9"

    def test_eleven_classes_isolate_exact_one(self):
        scheme = eleven_class_scheme()
        assert len(scheme.labels) == 11
        assert scheme.classify(1.0) == "10"
        assert scheme.classify(0.95) == "9"

    def test_equal_width_and_unknown_name(self):
        assert equal_width_scheme(1).classify(0.7) == "0"
        assert scheme_by_name("equal_width:4").classify(0.3) == "1"
        with pytest.raises(InvalidScheme):
            scheme_by_name("quartiles")


class TestPartition:
    def test_total_and_disjoint(self, tiny_records):
        scores = score_corpus(tiny_records)
        part = partition(tiny_records, scores, DEFAULT_SCHEME)
        assert len(part.assignments) == len(tiny_records)
        assert set(part.assignments.values()) <= set(DEFAULT_SCHEME.labels)
        assert sum(part.sizes().values()) == len(tiny_records)
        assert sum(part.proportions().values()) == pytest.approx(1.0)

    def test_duplicate_ids_rejected(self):
        exact = make_record("who is robert ?", "who is robert ?", dialogue_id="d1")
        long = make_record("why ?", "why did robert leave the band in the end ?", dialogue_id="d1")
        with pytest.raises(DuplicateRecord) as info:
            partition([exact, long], [1.0, 0.05])
        assert info.value.record_id == "d1#0"

    def test_unknown_record(self, tiny_records):
        part = partition(tiny_records, score_corpus(tiny_records))
        with pytest.raises(UnknownRecord):
            part.label_of("missing#0")

    def test_labels_from_gold(self, tiny_records):
        labels = {r.record_id: r.class_label for r in tiny_records}
        part = partition_from_labels(tiny_records, labels, ("hard", "medium", "easy"))
        assert part.sizes() == {"hard": 2, "medium": 2, "easy": 2}

    def test_class_statistics(self, tiny_records):
        part = partition(tiny_records, score_corpus(tiny_records))
        stats = class_statistics(tiny_records, part)
        assert list(stats.index) == ["hard", "medium", "easy"]
        assert stats["count"].sum() == len(tiny_records)


class TestTercilePartition:
    def _records(self, n):
        return [make_record(" ".join(["w"] * (i + 1)), "x y z", dialogue_id=f"r{i}") for i in range(n)]

    def test_balanced_sizes(self):
        part = tercile_partition(self._records(6), "len_q")
        assert part.sizes() == {"D1": 2, "D2": 2, "D3": 2}

    def test_remainder_goes_first(self):
        part = tercile_partition(self._records(7), "len_q")
        assert part.sizes() == {"D1": 3, "D2": 2, "D3": 2}
        assert part.label_of("r0#0") == "D1"
        assert part.label_of("r6#0") == "D3"

    def test_length_ratio(self):
        rec = make_record("a b c d e", "a b c d e f g h i j")
        part = tercile_partition([rec] + self._records(2), "len_ratio")
        assert part.scores[rec.record_id] == pytest.approx(0.5)

    def test_duplicate_ids_rejected(self):
        records = self._records(3)
        with pytest.raises(DuplicateRecord):
            tercile_partition(records + [records[0]], "len_q")

    def test_too_few_records(self):
        with pytest.raises(TooFewRecords):
            tercile_partition(self._records(2), "bleu")


class TestRuleFrequency:
    def test_counts_per_class(self, tiny_records):
        labels = {r.record_id: "easy" for r in tiny_records}
        part = partition_from_labels(tiny_records, labels, ("easy",))
        annotations = [RuleAnnotation("t0#2", (1,)), RuleAnnotation("t1#2", (1, 2))]
        result = rule_frequency(annotations, part)
        assert result["easy"]["counts"][1] == 2
        assert result["easy"]["counts"][2] == 1
        assert result["easy"]["distribution"][1] == pytest.approx(2 / 3)

    def test_no_annotations(self, tiny_records):
        part = partition(tiny_records, score_corpus(tiny_records))
        result = rule_frequency([], part)
        assert all(sum(entry["counts"].values()) == 0 for entry in result.values())

    def test_load_annotations(self, tmp_path):
        path = write_lines(tmp_path / "ann.jsonl", [{"record_id": "t0#2", "rules": [1, 6]}])
        assert load_annotations(path) == [RuleAnnotation("t0#2", (1, 6))]
        bad = write_lines(tmp_path / "bad.jsonl", [{"record_id": "t0#2", "rules": [9]}])
        with pytest.raises(SchemaError):
            load_annotations(bad)
