"""
Gradus QR v1.0 - Harness Tests
Synthetic corpora, conversion, analysis helpers, reporting and the resumable pipeline
"""

import json

import pandas as pd
import pytest

from src.analytics.executive_reporting.report_generator import ReportGenerator, parameter_table, ten_bin_eval
from src.core.corpus import DEFAULT_SCHEME, difficulty_score, load_corpus, make_record, ten_bin_scheme
from src.core.exceptions import ConfigError, EmptyClass, InvalidScheme, ParseError, SchemaError, StageError
from src.core.experiment_engine import (
    ExperimentEngine,
    HeatmapResult,
    PipelineConfig,
    difficulty_measure_analysis,
)
from src.data_processing.extractors.corpus_converter import convert_canard, convert_file, convert_qrecc
from src.data_processing.generators.synthetic_corpus import SyntheticSpec, gen_synthetic, write_synthetic
from src.utils.analytics import binned_means, get_class_distribution, paired_bootstrap, rank_correlation, trend_arrow
from src.utils.config import Config
from src.utils.data_loader import write_json, write_jsonl

SMALL = {"train": 30, "valid": 30, "test": 30}


def tiny_pipeline(**overrides):
    values = dict(d_model=8, n_heads=2, n_layers=1, ffn_dim=16, adapter_bottleneck=4, max_seq_len=40,
                  max_decode_len=8, pretrain_epochs=1, epochs=1, classifier_epochs=1, batch_size=32,
                  beam_width=2, learning_rate=0.01, pretrain_lr=0.01)
    values.update(overrides)
    return PipelineConfig(**values)


def score_row(record_id, z, label, bleu):
    return {"record_id": record_id, "z": z, "class": label, "bleu": bleu, "rouge1": bleu, "rouge2": bleu,
            "rougeL": bleu, "output_tokens": []}


@pytest.fixture(scope="module")
def synthetic():
    return gen_synthetic(SyntheticSpec(seed=5, counts=SMALL))


class TestSyntheticCorpus:
    def test_deterministic_in_seed(self, synthetic):
        again = gen_synthetic(SyntheticSpec(seed=5, counts=SMALL))
        assert again == synthetic

    def test_class_sizes_and_labels(self, synthetic):
        for split in ("train", "valid", "test"):
            labels = [rec.class_label for rec in synthetic[split]]
            assert {label: labels.count(label) for label in set(labels)} == {"hard": 30, "medium": 30, "easy": 30}

    def test_labels_agree_with_scores(self, synthetic):
        for rec in synthetic["train"]:
            assert DEFAULT_SCHEME.classify(difficulty_score(rec)) == rec.class_label

    def test_easy_recipe_is_pronoun_substitution(self, synthetic):
        easy = [rec for rec in synthetic["train"] if rec.class_label == "easy"]
        assert all(difficulty_score(rec, apply_pronoun_rule=True) == 1.0 for rec in easy)

    def test_too_few_per_class(self):
        with pytest.raises(ConfigError):
            SyntheticSpec(counts={"train": 10, "valid": 30, "test": 30})

    def test_written_files_load(self, tmp_path):
        paths = write_synthetic(SyntheticSpec(seed=2, counts=SMALL), tmp_path)
        assert len(load_corpus(paths["valid"])) == 90


class TestCorpusConverter:
    def test_canard(self, tmp_path):
        rows = [
            {"History": ["who is robert fripp ?", "a guitarist ."], "Question": "did he win any awards ?",
             "Rewrite": "did robert fripp win any awards ?", "QuAC_dialog_id": "C_1", "Question_no": 2},
            {"History": [], "Question": "  ", "Rewrite": "who is he ?", "QuAC_dialog_id": "C_2", "Question_no": 1},
        ]
        path = tmp_path / "canard.json"
        path.write_text(json.dumps(rows), encoding="utf-8")
        records = convert_canard(path)
        assert len(records) == 1
        assert records[0].record_id == "C_1#1"
        assert records[0].history[1] == ("a", "guitarist", ".")

    def test_qrecc_writes_corpus(self, tmp_path):
        rows = [{"Context": ["what is kyoto ?"], "Question": "where is it ?", "Rewrite": "where is kyoto ?",
                 "Conversation_no": 7, "Turn_no": 2}]
        src = tmp_path / "qrecc.json"
        src.write_text(json.dumps(rows), encoding="utf-8")
        stats = convert_file("qrecc", src, tmp_path / "out.jsonl")
        assert stats["converted"] == 1
        assert load_corpus(tmp_path / "out.jsonl")[0].rewrite == ("where", "is", "kyoto", "?")

    def test_missing_field_and_bad_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps([{"Question": "why ?"}]), encoding="utf-8")
        with pytest.raises(SchemaError):
            convert_qrecc(path)
        path.write_text("[{", encoding="utf-8")
        with pytest.raises(ParseError):
            convert_qrecc(path)


class TestAnalytics:
    def test_class_distribution_lists_every_class(self):
        counts = get_class_distribution(["easy", "hard", "easy", None], ["hard", "medium", "easy"])
        assert counts == {"hard": 1, "medium": 0, "easy": 2}

    def test_binned_means(self):
        bins = binned_means([0.05, 0.1, 0.15, 0.95], [0.2, 0.4, 0.5, 0.9], ten_bin_scheme())
        assert bins[0]["count"] == 2
        assert bins[0]["bleu"] == pytest.approx(0.3)
        assert bins[1]["bleu"] == pytest.approx(0.5)
        assert bins[5]["bleu"] is None
        assert bins[9]["count"] == 1

    def test_ten_bins_all_exact(self):
        result = ten_bin_eval([score_row(f"r{i}", 1.0, "easy", 0.8) for i in range(4)])
        populated = [b for b in result["bins"] if b["count"]]
        assert [b["label"] for b in populated] == ["9"]
        assert result["spearman"] is None

    def test_rank_correlation(self):
        assert rank_correlation([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
        assert rank_correlation([1, 2, 3], [10, 20, 25]) == pytest.approx(1.0)
        assert rank_correlation([1], [2]) is None
        assert rank_correlation([1, 2, 3], [5, 5, 5]) is None

    def test_paired_bootstrap(self):
        a = [0.5, 0.6, 0.7, 0.8]
        result = paired_bootstrap(a, [v - 0.1 for v in a], n_resamples=200)
        assert result["delta"] == pytest.approx(0.1)
        assert result["p_value"] == 0.0
        assert result["ci_low"] == pytest.approx(0.1)
        with pytest.raises(ValueError):
            paired_bootstrap([0.1], [0.1, 0.2])

    @pytest.mark.parametrize("values,arrow", [
        ([0.1, 0.2, 0.2], "↑"),
        ([0.9, 0.3], "↓"),
        ([0.1, 0.3, 0.2], "↕"),
        ([None, 0.4], "-"),
    ])
    def test_trend_arrow(self, values, arrow):
        assert trend_arrow(values) == arrow

    def test_difficulty_measure_table(self, tiny_records):
        table = difficulty_measure_analysis(tiny_records, {rec.record_id: 1.0 for rec in tiny_records})
        assert list(table["scorer"]) == ["len_q", "len_rewrite", "len_ratio", "rouge_l", "bleu"]
        assert set(table["value_trend"]) <= {"↑", "-"}
        assert (table["bleu_std"] == 0.0).all()

    def test_heatmap_diagonal(self):
        assert HeatmapResult(["a", "b"], [[0.9, 0.1], [0.2, 0.8]]).diagonal_wins() == 2
        assert HeatmapResult(["a", "b"], [[0.1, 0.9], [0.2, None]]).diagonal_wins() == 0

    def test_parameter_table_reference_rows(self):
        rows = parameter_table(None)
        assert [round(r["ratio"], 4) for r in rows] == [0.1272, 0.0848, 0.0213]


class TestReport:
    def _run_dir(self, tmp_path):
        run = tmp_path / "run"
        write_json(run / Config.CONFIG_DIR / "run.json", {"labels": ["hard", "medium", "easy"], "seed": 3})
        shared = [score_row("a", 0.1, "hard", 0.2), score_row("b", 0.4, "medium", 0.5),
                  score_row("c", 1.0, "easy", 0.9), score_row("d", 1.0, "easy", 0.7)]
        better = [dict(row, bleu=row["bleu"] + 0.05) for row in shared]
        write_jsonl(run / Config.SCORES_DIR / "systems" / "S.jsonl", shared)
        write_jsonl(run / Config.SCORES_DIR / "systems" / "saf.jsonl", better)
        return run

    def test_built_from_score_files(self, tmp_path):
        report = ReportGenerator(self._run_dir(tmp_path)).build()
        assert report.per_class["S"]["per_class"] == pytest.approx({"hard": 0.2, "medium": 0.5, "easy": 0.8})
        assert report.per_class["S"]["mean_over_classes"] == pytest.approx(0.5)
        assert report.per_class["S"]["class_counts"] == {"hard": 1, "medium": 1, "easy": 2}
        assert report.per_class["saf"]["overall"] == pytest.approx(0.625)
        assert report.significance["saf"]["delta"] == pytest.approx(0.05)
        assert report.ten_bin["bins"][9]["count"] == 2
        assert report.heatmap is None

    def test_written_tables(self, tmp_path):
        run = self._run_dir(tmp_path)
        path = ReportGenerator(run).build().write(run / Config.REPORT_DIR)
        assert json.loads(path.read_text(encoding="utf-8"))["labels"] == ["hard", "medium", "easy"]
        table = pd.read_csv(run / Config.REPORT_DIR / "per_class.csv")
        assert set(table["system"]) == {"S", "saf"}


class TestPipelineConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            PipelineConfig(gamma=2.0)
        with pytest.raises(ConfigError):
            PipelineConfig(max_seq_len=16, max_decode_len=16)
        with pytest.raises(InvalidScheme):
            PipelineConfig(scheme="quartiles")

    def test_from_file(self, tmp_path):
        path = tmp_path / "p.conf"
        path.write_text("seed = 4\nscheme = left_closed  # left-closed\n", encoding="utf-8")
        cfg = PipelineConfig.from_file(path, gamma=0.25)
        assert (cfg.seed, cfg.scheme, cfg.gamma) == (4, "left_closed", 0.25)
        path.write_text("seeds = 4\n", encoding="utf-8")
        with pytest.raises(ConfigError):
            PipelineConfig.from_file(path)


class TestExperimentEngine:
    def test_score_stage_resumes(self, tmp_path, tiny_records):
        corpora = {"train": tiny_records}
        first = ExperimentEngine(tmp_path / "run", tiny_pipeline())
        scores, fp = first.stage_score(corpora)
        second = ExperimentEngine(tmp_path / "run", tiny_pipeline())
        again, fp_again = second.stage_score(corpora)
        assert second.stats["stages_skipped"] == ["score"]
        assert again == scores and fp_again == fp

    def test_changed_input_reruns(self, tmp_path, tiny_records):
        ExperimentEngine(tmp_path / "run", tiny_pipeline()).stage_score({"train": tiny_records})
        engine = ExperimentEngine(tmp_path / "run", tiny_pipeline())
        engine.stage_score({"train": tiny_records[:4]})
        assert engine.stats["stages_run"] == ["score"]

    def test_heatmap_empty_class_before_training(self, tmp_path, tiny_records):
        engine = ExperimentEngine(tmp_path / "run", tiny_pipeline())
        with pytest.raises(EmptyClass):
            engine.heatmap_experiment(tiny_records, [], tiny_records, k=11)
        assert not (tmp_path / "run" / Config.CHECKPOINT_DIR / "base.ckpt").exists()

    def test_gamma_sweep_needs_values(self, tmp_path, tiny_records):
        engine = ExperimentEngine(tmp_path / "run", tiny_pipeline())
        with pytest.raises(ConfigError):
            engine.gamma_sweep(tiny_records, [], tiny_records, [])
        with pytest.raises(ConfigError):
            engine.gamma_sweep(tiny_records, [], tiny_records, [0.5, 1.5])

    @pytest.mark.slow
    def test_missing_test_split(self, tmp_path, synthetic):
        engine = ExperimentEngine(tmp_path / "run", tiny_pipeline())
        with pytest.raises(StageError) as info:
            engine.run_pipeline(synthetic["train"], synthetic["valid"][:6], None)
        assert info.value.stage == "evaluate"
        marker = json.loads((tmp_path / "run" / Config.STAGES_DIR / "evaluate.json").read_text(encoding="utf-8"))
        assert marker["status"] == "failed"

    @pytest.mark.slow
    def test_end_to_end_and_resume(self, tmp_path, synthetic):
        train, valid, test = synthetic["train"], synthetic["valid"][:9], synthetic["test"][:12]
        engine = ExperimentEngine(tmp_path / "run", tiny_pipeline())
        report = engine.run_pipeline(train, valid, test)

        systems = {"S", "P-hard", "P-medium", "P-easy", "mix_gold", "uniform", "saf", "predicted_route", "sad"}
        assert set(report.per_class) == systems
        for entry in report.per_class.values():
            assert 0.0 <= entry["overall"] <= 1.0
            assert entry["records"] == len(test)
        assert (tmp_path / "run" / Config.REPORT_DIR / "report.json").exists()

        resumed = ExperimentEngine(tmp_path / "run", tiny_pipeline())
        resumed.run_pipeline(train, valid, test)
        assert resumed.stats["stages_run"] == []
        assert {"pretrain", "shared", "saf", "sad", "evaluate"} <= set(resumed.stats["stages_skipped"])

    def test_records_without_exact_rewrite_have_no_top_class(self):
        rec = make_record("why ?", "why did robert leave ?")
        assert difficulty_score(rec) < 1.0
