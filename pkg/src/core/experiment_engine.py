"""
Gradus QR v1.0 - Experiment Engine
Resumable end-to-end pipeline and the analysis experiments built on it

Pipeline stages:
score -> partition -> pretrain -> shared -> private_<class> -> saf -> sad -> evaluate
"""

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.analytics.executive_reporting.report_generator import ExperimentReport, ReportGenerator
from src.analytics.predictive_models.ensemble import (
    EnsembleBundle,
    EnsembleRewriter,
    load_classifier,
    sad_train,
    saf_train,
    save_classifier,
)
from src.analytics.predictive_models.training import (
    EvaluationReport,
    ModelRewriter,
    TrainConfig,
    evaluate,
    pretrain_base,
    train_private,
    train_shared,
)
from src.core.corpus import (
    TERCILE_LABELS,
    TERCILE_SCORERS,
    DifficultyPartition,
    UtteranceRecord,
    eleven_class_scheme,
    equal_width_scheme,
    partition,
    scheme_by_name,
    score_corpus,
    DEFAULT_SCHEME,
    tercile_partition,
)
from src.core.exceptions import ConfigError, EmptyClass, GradusError, IntegrityError, StageError
from src.core.seqmodel import (
    AdaptedModel,
    AdapterSet,
    BaseWeights,
    ModelConfig,
    Vocabulary,
    load_adapters,
    load_base,
    save_adapters,
    save_base,
    vocabulary_from_records,
)
from src.utils.analytics import mean_and_std, trend_arrow
from src.utils.config import Config, parse_flat_config, write_flat_config
from src.utils.data_loader import ScoreFileLoader, read_json, read_jsonl, write_json, write_jsonl

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")


@dataclass
class PipelineConfig:
    seed: int = 17
    scheme: str = "default"
    apply_pronoun_rule: bool = True
    vocab_max_size: Optional[int] = None
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 2
    ffn_dim: int = 64
    adapter_bottleneck: int = 16
    max_seq_len: int = 48
    dropout: float = 0.0
    pretrain_epochs: int = 8
    pretrain_lr: float = 2e-3
    epochs: int = 12
    learning_rate: float = 2e-3
    batch_size: int = 32
    classifier_epochs: int = 3
    classifier_lr: float = 1e-2
    classification_weight: float = 1.0
    gamma: float = Config.DISTILL_GAMMA
    beam_width: int = Config.BEAM_WIDTH
    validation_beam: int = 1
    max_decode_len: int = 32
    workers: int = 1
    heatmap_from_scratch: bool = False

    def __post_init__(self):
        scheme_by_name(self.scheme)
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}", gamma=self.gamma)
        if self.max_decode_len >= self.max_seq_len:
            raise ConfigError("max_decode_len must be below max_seq_len")

    @classmethod
    def from_file(cls, path, **overrides) -> "PipelineConfig":
        settings = parse_flat_config(path)
        unknown = set(settings) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown pipeline keys: {sorted(unknown)}", path=str(path))
        settings.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**settings)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def with_overrides(self, **overrides) -> "PipelineConfig":
        values = self.to_dict()
        values.update(overrides)
        return PipelineConfig(**values)

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, d_model=self.d_model, n_heads=self.n_heads,
                           n_enc_layers=self.n_layers, n_dec_layers=self.n_layers, ffn_dim=self.ffn_dim,
                           adapter_bottleneck=self.adapter_bottleneck, max_seq_len=self.max_seq_len,
                           dropout=self.dropout)

    def pretrain_config(self) -> TrainConfig:
        return TrainConfig(mode="finetune_all", learning_rate=self.pretrain_lr, epochs=self.pretrain_epochs,
                           batch_size=self.batch_size, seed=self.seed)

    def adapter_config(self, **overrides) -> TrainConfig:
        values = dict(mode="adapter_only", learning_rate=self.learning_rate, epochs=self.epochs,
                      batch_size=self.batch_size, seed=self.seed, gamma=self.gamma,
                      classification_weight=self.classification_weight, validation_beam=self.validation_beam,
                      test_beam=self.beam_width, max_decode_len=self.max_decode_len, workers=self.workers)
        values.update(overrides)
        return TrainConfig(**values)


def _digest(payload: Any) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode("utf-8")).hexdigest()


def corpus_fingerprint(records: Sequence[UtteranceRecord]) -> str:
    return _digest([rec.to_json() for rec in records])


@dataclass
class HeatmapResult:
    labels: List[str]
    matrix: List[List[Optional[float]]]

    def diagonal_wins(self) -> int:
        """Rows whose diagonal entry is at least the row mean"""
        wins = 0
        for i, row in enumerate(self.matrix):
            present = [v for v in row if v is not None]
            if row[i] is not None and present and row[i] >= float(np.mean(present)):
                wins += 1
        return wins


class ExperimentEngine:
    """Runs the pipeline inside one run directory, skipping stages whose inputs are unchanged"""

    def __init__(self, run_dir, config: Optional[PipelineConfig] = None, show_progress: bool = False):
        self.run_dir = Path(run_dir)
        self.config = config or PipelineConfig()
        self.show_progress = show_progress
        for name in (Config.CONFIG_DIR, Config.CHECKPOINT_DIR, Config.SCORES_DIR, Config.LOGS_DIR,
                     Config.STAGES_DIR, Config.REPORT_DIR):
            (self.run_dir / name).mkdir(parents=True, exist_ok=True)
        self.stats = {"stages_run": [], "stages_skipped": []}
        self._cache: Dict[str, Any] = {}
        write_flat_config(self.run_dir / Config.CONFIG_DIR / "pipeline.conf", self.config.to_dict())
        logger.info(f"🚀 Experiment engine initialized at {self.run_dir} (seed {self.config.seed})")

    # paths
    def _checkpoint(self, name: str) -> Path:
        return self.run_dir / Config.CHECKPOINT_DIR / f"{name}.ckpt"

    def _marker(self, stage: str) -> Path:
        return self.run_dir / Config.STAGES_DIR / f"{stage}.json"

    @property
    def event_log(self) -> Path:
        return self.run_dir / Config.LOGS_DIR / "train_events.jsonl"

    def _stage(self, stage: str, inputs: Dict[str, Any], run: Callable[[], Tuple[Any, Dict[str, Any]]],
               load: Callable[[Dict[str, Any]], Any]) -> Tuple[Any, str]:
        """
        Run or resume one stage

        Returns:
            The stage result and the stage fingerprint (used as input of later stages)
        """
        fingerprint = _digest({"stage": stage, **inputs})
        marker = self._marker(stage)
        if marker.exists():
            previous = read_json(marker)
            if previous.get("status") == "done" and previous.get("fingerprint") == fingerprint:
                try:
                    result = load(previous.get("outputs", {}))
                    self.stats["stages_skipped"].append(stage)
                    logger.info(f"⏭️ Stage '{stage}' up to date, skipped")
                    return result, fingerprint
                except (OSError, KeyError, IntegrityError) as e:
                    logger.warning(f"⚠️ Stage '{stage}' outputs unusable ({e}); rerunning")

        logger.info(f"🚀 Stage '{stage}'")
        started = time.perf_counter()
        try:
            result, outputs = run()
        except GradusError as e:
            write_json(marker, {"stage": stage, "fingerprint": fingerprint, "status": "failed", "error": e.to_dict()})
            raise
        except Exception as e:
            write_json(marker, {"stage": stage, "fingerprint": fingerprint, "status": "failed",
                                "error": {"error": type(e).__name__, "message": str(e)}})
            raise StageError(stage, f"stage '{stage}' failed: {e}") from e
        write_json(marker, {"stage": stage, "fingerprint": fingerprint, "status": "done", "outputs": outputs,
                            "wall_time": round(time.perf_counter() - started, 3)})
        self.stats["stages_run"].append(stage)
        return result, fingerprint

    # stages
    def stage_score(self, corpora: Dict[str, Sequence[UtteranceRecord]]) -> Tuple[Dict[str, List[float]], str]:
        cfg = self.config
        inputs = {"corpora": {s: corpus_fingerprint(r) for s, r in corpora.items()},
                  "pronoun_rule": cfg.apply_pronoun_rule}

        def run():
            scores = {}
            for split, records in corpora.items():
                scores[split] = score_corpus(records, cfg.apply_pronoun_rule)
                write_jsonl(self.run_dir / Config.SCORES_DIR / f"difficulty_{split}.jsonl",
                            ({"record_id": r.record_id, "z": z} for r, z in zip(records, scores[split])))
            return scores, {"splits": sorted(corpora)}

        def load(outputs):
            scores = {}
            for split in outputs["splits"]:
                rows = read_jsonl(self.run_dir / Config.SCORES_DIR / f"difficulty_{split}.jsonl")
                scores[split] = [row["z"] for row in rows]
            return scores

        return self._stage("score", inputs, run, load)

    def stage_partition(self, corpora: Dict[str, Sequence[UtteranceRecord]], scores: Dict[str, List[float]],
                        upstream: str) -> Tuple[Dict[str, DifficultyPartition], str]:
        scheme = scheme_by_name(self.config.scheme)

        def run():
            parts = {}
            for split, records in corpora.items():
                parts[split] = partition(records, scores[split], scheme)
                write_jsonl(self.run_dir / Config.SCORES_DIR / f"partition_{split}.jsonl",
                            ({"record_id": r.record_id, "z": parts[split].scores[r.record_id],
                              "class": parts[split].assignments[r.record_id]} for r in records))
                logger.info(f"📊 {split} class sizes: {parts[split].sizes()}")
            return parts, {"labels": list(scheme.labels)}

        def load(outputs):
            return {split: partition(records, scores[split], scheme) for split, records in corpora.items()}

        return self._stage("partition", {"upstream": upstream, "scheme": self.config.scheme}, run, load)

    def stage_pretrain(self, train: Sequence[UtteranceRecord], upstream: str) -> Tuple[Tuple[BaseWeights, Vocabulary], str]:
        cfg = self.config
        path = self._checkpoint("base")

        def run():
            vocab = vocabulary_from_records(train, cfg.vocab_max_size)
            vocab.save(self.run_dir / Config.VOCAB_FILE)
            base = pretrain_base(train, vocab, cfg.model_config(len(vocab)), cfg.pretrain_config(),
                                 event_log=self.event_log, show_progress=self.show_progress)
            fingerprint = save_base(base, vocab, path)
            return (base, vocab), {"checkpoint": path.name, "fingerprint": fingerprint}

        def load(outputs):
            base, vocab = load_base(path)
            if base.fingerprint() != outputs["fingerprint"]:
                raise IntegrityError("base checkpoint changed on disk")
            return base, vocab

        inputs = {"upstream": upstream, "corpus": corpus_fingerprint(train),
                  "model": {k: getattr(cfg, k) for k in ("vocab_max_size", "d_model", "n_heads", "n_layers",
                                                         "ffn_dim", "adapter_bottleneck", "max_seq_len", "dropout")},
                  "train": asdict(cfg.pretrain_config())}
        return self._stage("pretrain", inputs, run, load)

    def _adapter_stage(self, stage: str, base: BaseWeights, vocab: Vocabulary, records, valid, cfg: TrainConfig,
                       label: str, upstream: str, init: Optional[AdapterSet] = None,
                       shared: bool = False) -> Tuple[AdapterSet, str]:
        path = self._checkpoint(stage)

        def run():
            if shared:
                trained = train_shared(records, base, vocab, cfg, valid, event_log=self.event_log,
                                       show_progress=self.show_progress)
            else:
                trained = train_private(records, base, vocab, cfg, label, valid, init_adapters=init,
                                        event_log=self.event_log, show_progress=self.show_progress)
            fingerprint = save_adapters(trained.adapters, base, path)
            return trained.adapters, {"checkpoint": path.name, "fingerprint": fingerprint,
                                      "best_epoch": trained.best_epoch}

        def load(outputs):
            return load_adapters(path, base)

        inputs = {"upstream": upstream, "records": corpus_fingerprint(records), "label": label,
                  "init": init.fingerprint() if init is not None else None, "train": asdict(cfg)}
        return self._stage(stage, inputs, run, load)

    def stage_classifier(self, bundle: EnsembleBundle, train: Sequence[UtteranceRecord], upstream: str):
        cfg = self.config.adapter_config(epochs=self.config.classifier_epochs,
                                         learning_rate=self.config.classifier_lr)
        path = self._checkpoint("classifier")

        def run():
            classifier = saf_train(bundle, train, cfg)
            return classifier, {"checkpoint": path.name, "fingerprint": save_classifier(classifier, bundle.base, path)}

        def load(outputs):
            return load_classifier(path, bundle.base)

        return self._stage("saf", {"upstream": upstream, "train": asdict(cfg)}, run, load)

    def stage_student(self, bundle: EnsembleBundle, train, valid, upstream: str, gamma: float,
                      stage: str = "sad") -> Tuple[AdapterSet, str]:
        cfg = self.config.adapter_config(gamma=gamma)
        path = self._checkpoint(stage)

        def run():
            student = sad_train(bundle, train, cfg, valid, event_log=self.event_log, show_progress=self.show_progress)
            return student, {"checkpoint": path.name, "fingerprint": save_adapters(student, bundle.base, path)}

        def load(outputs):
            return load_adapters(path, bundle.base)

        return self._stage(stage, {"upstream": upstream, "train": asdict(cfg)}, run, load)

    # shared setup
    def prepare(self, train: Sequence[UtteranceRecord], valid: Sequence[UtteranceRecord],
                test: Optional[Sequence[UtteranceRecord]]) -> Dict[str, Any]:
        """score, partition, pretrain and shared stages; cached for the engine's lifetime"""
        corpora = {"train": list(train), "valid": list(valid or [])}
        if test:
            corpora["test"] = list(test)
        key = _digest({s: corpus_fingerprint(r) for s, r in corpora.items()})
        if self._cache.get("key") == key:
            return self._cache

        scores, fp = self.stage_score(corpora)
        parts, fp = self.stage_partition(corpora, scores, fp)
        labeled = {split: [r.with_label(parts[split].assignments[r.record_id]) for r in records]
                   for split, records in corpora.items()}
        labels = list(scheme_by_name(self.config.scheme).labels)
        self._write_metadata(labels)

        (base, vocab), base_fp = self.stage_pretrain(labeled["train"], fp)
        shared, shared_fp = self._adapter_stage("shared", base, vocab, labeled["train"], labeled["valid"],
                                                self.config.adapter_config(), "shared", base_fp, shared=True)
        self._cache = {"key": key, "partitions": parts, "labeled": labeled, "labels": labels, "base": base,
                       "vocab": vocab, "base_fp": base_fp, "shared": shared, "shared_fp": shared_fp}
        return self._cache

    def _write_metadata(self, labels: List[str], **extra) -> None:
        path = self.run_dir / Config.CONFIG_DIR / "run.json"
        metadata = read_json(path) if path.exists() else {}
        metadata.update({"layout_version": Config.RUN_LAYOUT_VERSION, "seed": self.config.seed,
                         "scheme": self.config.scheme, "labels": labels, "pipeline": self.config.to_dict()})
        if "base" in self._cache:
            metadata["model"] = self._cache["base"].config.to_dict()
        metadata.update(extra)
        write_json(path, metadata)

    def train_privates(self, state: Dict[str, Any]) -> Tuple[List[AdapterSet], str]:
        labeled, parts = state["labeled"], state["partitions"]
        private, fingerprints = [], []
        for index, label in enumerate(state["labels"]):
            class_train = parts["train"].select(labeled["train"], label)
            if not class_train:
                raise EmptyClass(index, label)
            class_valid = parts["valid"].select(labeled["valid"], label) if "valid" in parts else []
            adapters, fp = self._adapter_stage(f"private_{label}", state["base"], state["vocab"], class_train,
                                               class_valid, self.config.adapter_config(), label, state["base_fp"])
            private.append(adapters)
            fingerprints.append(fp)
        return private, _digest(fingerprints)

    def _evaluate_system(self, name: str, rewriter, test, test_partition) -> EvaluationReport:
        report = evaluate(rewriter, test, test_partition, workers=self.config.workers, system=name,
                          show_progress=self.show_progress)
        ScoreFileLoader(self.run_dir / Config.SCORES_DIR / "systems").write(name, report.records)
        logger.info(f"📊 {name}: overall BLEU {report.overall:.4f} per class {report.per_class}")
        return report

    # operations
    def run_pipeline(self, train: Sequence[UtteranceRecord], valid: Sequence[UtteranceRecord],
                     test: Optional[Sequence[UtteranceRecord]]) -> ExperimentReport:
        """All stages end to end, then the report from the written score files"""
        state = self.prepare(train, valid, test)
        self._write_metadata(state["labels"])
        base, vocab, labeled = state["base"], state["vocab"], state["labeled"]

        private, private_fp = self.train_privates(state)
        bundle = EnsembleBundle(base, vocab, private, mode="saf")
        bundle.classifier, saf_fp = self.stage_classifier(bundle, labeled["train"], private_fp)
        bundle.student, sad_fp = self.stage_student(bundle, labeled["train"], labeled["valid"], private_fp,
                                                    self.config.gamma)

        def run_eval():
            if not test:
                raise StageError("evaluate", "no test split to evaluate on")
            test_records, test_part = labeled["test"], state["partitions"]["test"]
            beam, max_len = self.config.beam_width, self.config.max_decode_len
            systems = {"S": ModelRewriter(AdaptedModel(base, state["shared"]), vocab, beam, max_len, "S")}
            for adapters in private:
                systems[f"P-{adapters.label}"] = ModelRewriter(AdaptedModel(base, adapters), vocab, beam, max_len)
            for mode in ("mix_gold", "uniform", "saf", "predicted_route", "sad"):
                systems[mode] = EnsembleRewriter(bundle, mode, beam, max_len)
            for name, rewriter in systems.items():
                self._evaluate_system(name, rewriter, test_records, test_part)
            return None, {"systems": sorted(systems)}

        self._stage("evaluate", {"upstream": [state["shared_fp"], saf_fp, sad_fp],
                                 "test": corpus_fingerprint(test or []),
                                 "decode": [self.config.beam_width, self.config.max_decode_len]},
                    run_eval, lambda outputs: None)

        report = ReportGenerator(self.run_dir).build()
        report.write(self.run_dir / Config.REPORT_DIR)
        logger.info(f"✅ Pipeline complete: stages run {self.stats['stages_run']}")
        return report

    def heatmap_experiment(self, train, valid, test, k: int) -> HeatmapResult:
        """
        Train one private model per class and test it on every class

        k=3 uses the default three-class scheme, k=11 the eleven-class one and
        other k equal-width bins. k=1 reports the shared model.
        """
        if k < 1:
            raise ConfigError(f"k must be >= 1, got {k}", k=k)
        scheme = DEFAULT_SCHEME if k == 3 else eleven_class_scheme() if k == 11 else equal_width_scheme(k)
        if not test:
            raise StageError("heatmap", "no test split to evaluate on")
        train_part = partition(train, score_corpus(train, self.config.apply_pronoun_rule), scheme)
        test_part = partition(test, score_corpus(test, self.config.apply_pronoun_rule), scheme)
        for part in (train_part, test_part):
            for index, label in enumerate(scheme.labels):
                if part.sizes()[label] == 0:
                    raise EmptyClass(index, label)

        state = self.prepare(train, valid, test)
        base, vocab = state["base"], state["vocab"]
        labels = list(scheme.labels)
        test_records = [r.with_label(test_part.assignments[r.record_id]) for r in test]
        loader = ScoreFileLoader(self.run_dir / Config.SCORES_DIR / "heatmap")

        matrix = []
        for index, label in enumerate(labels):
            if k == 1:
                adapters = state["shared"]
            else:
                class_train = train_part.select(train, label)
                init = None if self.config.heatmap_from_scratch else state["shared"]
                adapters, _ = self._adapter_stage(f"heatmap_{k}_{label}", base, vocab, class_train, [],
                                                  self.config.adapter_config(), label, state["shared_fp"], init)
            rewriter = ModelRewriter(AdaptedModel(base, adapters), vocab, self.config.beam_width,
                                     self.config.max_decode_len)
            report = evaluate(rewriter, test_records, test_part, workers=self.config.workers,
                              system=f"train-{label}", show_progress=self.show_progress)
            loader.write(f"train-{label}", report.records)
            matrix.append([report.per_class[j] for j in labels])

        write_json(self.run_dir / Config.CONFIG_DIR / "heatmap.json", {"labels": labels, "k": k, "scheme": scheme.name})
        logger.info(f"📊 Heatmap {k}x{k} done")
        return HeatmapResult(labels, matrix)

    def gamma_sweep(self, train, valid, test, gammas: Sequence[float]) -> List[Dict[str, Any]]:
        """One distilled student per gamma, evaluated on the test split"""
        if not gammas:
            raise ConfigError("gamma list is empty")
        for gamma in gammas:
            if not 0.0 <= float(gamma) <= 1.0:
                raise ConfigError(f"gamma must be in [0, 1], got {gamma}", gamma=gamma)
        if not test:
            raise StageError("gamma_sweep", "no test split to evaluate on")

        state = self.prepare(train, valid, test)
        private, private_fp = self.train_privates(state)
        bundle = EnsembleBundle(state["base"], state["vocab"], private, mode="sad")
        loader = ScoreFileLoader(self.run_dir / Config.SCORES_DIR / "gamma")
        curve = []
        for gamma in gammas:
            gamma = float(gamma)
            student, _ = self.stage_student(bundle, state["labeled"]["train"], state["labeled"]["valid"],
                                            private_fp, gamma, stage=f"sad_gamma_{gamma}")
            bundle.student = student
            report = evaluate(EnsembleRewriter(bundle, "sad", self.config.beam_width, self.config.max_decode_len),
                              state["labeled"]["test"], state["partitions"]["test"], workers=self.config.workers,
                              system=f"gamma-{gamma}")
            loader.write(f"gamma-{gamma}", report.records)
            curve.append({"gamma": gamma, "bleu": report.overall, "per_class": report.per_class})
            logger.info(f"📊 gamma={gamma}: BLEU {report.overall:.4f}")

        write_json(self.run_dir / Config.CONFIG_DIR / "gamma.json", {"gammas": [float(g) for g in gammas]})
        return curve


def difficulty_measure_analysis(records: Sequence[UtteranceRecord], record_bleu: Dict[str, float]) -> pd.DataFrame:
    """
    Compare difficulty measures by tercile

    For every scorer the records are split into three near-equal classes by
    ascending score; the table holds the mean scorer value and the mean model
    BLEU per class, their trend arrows and the spread of the three BLEU means.
    """
    rows = []
    for scorer in TERCILE_SCORERS:
        part = tercile_partition(records, scorer)
        row: Dict[str, Any] = {"scorer": scorer}
        value_means, bleu_means = [], []
        for label in TERCILE_LABELS:
            members = part.members(label)
            values = [part.scores[rid] for rid in members]
            bleus = [record_bleu[rid] for rid in members if rid in record_bleu]
            value_means.append(float(np.mean(values)) if values else None)
            bleu_means.append(float(np.mean(bleus)) if bleus else None)
            row[f"value_{label}"] = value_means[-1]
            row[f"bleu_{label}"] = bleu_means[-1]
        present = [b for b in bleu_means if b is not None]
        row["value_trend"] = trend_arrow(value_means)
        row["bleu_trend"] = trend_arrow(bleu_means)
        row["bleu_std"] = float(np.std(present)) if present else None
        rows.append(row)
    return pd.DataFrame(rows)


def seed_sweep(run_root, train, valid, test, seeds: Sequence[int], config: Optional[PipelineConfig] = None,
               show_progress: bool = False) -> pd.DataFrame:
    """Repeat the pipeline per seed and summarize mean and std of BLEU per system and class"""
    if not seeds:
        raise ConfigError("seed list is empty")
    config = config or PipelineConfig()
    rows = []
    for seed in seeds:
        engine = ExperimentEngine(Path(run_root) / f"seed-{seed}", config.with_overrides(seed=int(seed)),
                                  show_progress=show_progress)
        report = engine.run_pipeline(train, valid, test)
        for system, entry in report.per_class.items():
            for label, value in entry["per_class"].items():
                if value is not None:
                    rows.append({"seed": seed, "system": system, "class": label, "bleu": value})
            rows.append({"seed": seed, "system": system, "class": "overall", "bleu": entry["overall"]})
    summary = mean_and_std(pd.DataFrame(rows), ["system", "class"], "bleu")
    out = Path(run_root) / Config.REPORT_DIR / "seed_sweep.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    summary.to_csv(out, index=False)
    logger.info(f"📊 Seed sweep over {list(seeds)} written to {out}")
    return summary
