"""
Gradus QR v1.0 - Private Model Ensembles
Classifier-weighted logit fusion, distillation into a single student and routing baselines

Modes:
1. saf - posterior-weighted fusion of private-model logits
2. sad - one student adapter set distilled from class-routed teachers
3. mix_gold - oracle routing by gold class
4. uniform - fusion with equal weights
5. predicted_route - routing by the classifier's arg-max class
"""

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.metrics import accuracy_score, confusion_matrix

from src.core import tensorcore as tc
from src.core.checkpoint import read_container, write_container
from src.core.corpus import UtteranceRecord
from src.core.exceptions import ConfigError, FrozenModelViolated, IntegrityError, MissingGoldLabel
from src.core.seqmodel import (
    AdaptedModel,
    AdapterSet,
    BaseWeights,
    ParameterStore,
    Vocabulary,
    assemble_source,
    beam_search,
    greedy_search,
    load_adapters,
    load_base,
    log_softmax_np,
    pad_batch,
    save_adapters,
    save_base,
)
from src.core.tensorcore import Tensor
from src.utils.config import Config

from src.analytics.predictive_models.training import (
    Adam,
    Batch,
    Seq2SeqTrainer,
    TrainConfig,
    encode_records,
    make_batches,
    nll_batch_loss,
    nll_loss,
    distill_loss,
)

logger = logging.getLogger(__name__)

ENSEMBLE_MODES = ("saf", "sad", "mix_gold", "uniform", "predicted_route")
BUNDLE_MAGIC = "GRADUS-BUNDLE"


class ClassClassifier(ParameterStore):
    """Affine map d_model -> m followed by softmax"""

    def __init__(self, labels: Sequence[str], d_model: int, dtype=np.float64):
        self.labels = tuple(labels)
        super().__init__({
            "weight": Tensor(np.zeros((d_model, len(self.labels))), dtype=dtype, name="weight"),
            "bias": Tensor(np.zeros(len(self.labels)), dtype=dtype, name="bias"),
        })

    def logits(self, features) -> Tensor:
        return tc.linear(tc.as_tensor(features), self["weight"], self["bias"])

    def posterior(self, features: np.ndarray) -> np.ndarray:
        with tc.no_grad():
            return np.exp(log_softmax_np(self.logits(features).values))


@dataclass
class EnsembleBundle:
    base: BaseWeights
    vocab: Vocabulary
    private: List[AdapterSet]
    classifier: Optional[ClassClassifier] = None
    student: Optional[AdapterSet] = None
    mode: str = "saf"

    def __post_init__(self):
        if not self.private:
            raise ConfigError("an ensemble needs at least one private model")
        if len(set(self.labels)) != len(self.labels):
            raise ConfigError(f"private model labels must be distinct, got {self.labels}")
        if self.mode not in ENSEMBLE_MODES:
            raise ConfigError(f"unknown ensemble mode '{self.mode}'", mode=self.mode)

    @property
    def labels(self) -> Tuple[str, ...]:
        return tuple(a.label for a in self.private)

    @property
    def m(self) -> int:
        return len(self.private)

    def models(self) -> List[AdaptedModel]:
        return [AdaptedModel(self.base, adapters) for adapters in self.private]

    def model_for(self, label: str) -> AdaptedModel:
        if label not in self.labels:
            raise MissingGoldLabel(f"no private model for class '{label}'", label=label)
        return AdaptedModel(self.base, self.private[self.labels.index(label)])

    def require(self, mode: str) -> None:
        if mode in ("saf", "predicted_route") and self.classifier is None:
            raise ConfigError(f"mode '{mode}' needs a trained classifier", mode=mode)
        if mode == "sad" and self.student is None:
            raise ConfigError("mode 'sad' needs a distilled student", mode=mode)

    def fingerprints(self) -> Dict[str, str]:
        prints = {"base": self.base.fingerprint()}
        prints.update({f"private.{a.label}": a.fingerprint() for a in self.private})
        return prints


def _check_frozen(before: Dict[str, str], bundle: EnsembleBundle, stage: str) -> None:
    after = bundle.fingerprints()
    changed = [name for name, value in before.items() if after.get(name) != value]
    if changed:
        raise FrozenModelViolated(f"{stage} modified frozen models: {changed}", changed=changed)


def _require_gold(records: Sequence[UtteranceRecord], bundle: EnsembleBundle) -> None:
    for rec in records:
        if rec.class_label is None or rec.class_label not in bundle.labels:
            raise MissingGoldLabel(f"record '{rec.record_id}' has no usable class label",
                                   record_id=rec.record_id, label=rec.class_label)


def pooled_feature(bundle: EnsembleBundle, src_ids, src_mask) -> np.ndarray:
    """f_c: mean over private models of mean-pooled last-layer encoder states, [batch, d_model]"""
    feats = [model.pooled_encoding(src_ids, src_mask) for model in bundle.models()]
    return np.mean(np.stack(feats, axis=0), axis=0)


def private_logits(bundle: EnsembleBundle, batch: Batch) -> np.ndarray:
    """Teacher-forced logits of every private model, [batch, m, T, |V|]"""
    with tc.no_grad():
        stacked = [model.logits(batch.src_ids, batch.src_mask, batch.tgt_in).values for model in bundle.models()]
    return np.stack(stacked, axis=1)


def fuse_logits(alpha: Tensor, logits: np.ndarray) -> Tensor:
    """sum_i alpha_i * logits_i for alpha [B, m] and logits [B, m, T, V]"""
    B, m, T, V = logits.shape
    weights = tc.reshape(alpha, (B, 1, m))
    fused = tc.matmul(weights, Tensor(logits.reshape(B, m, T * V), dtype=logits.dtype))
    return tc.reshape(fused, (B, T, V))


def saf_train(bundle: EnsembleBundle, records: Sequence[UtteranceRecord], cfg: TrainConfig) -> ClassClassifier:
    """
    Train the class classifier with the fused generation loss plus class cross-entropy

    Private models stay frozen; only the classifier moves. The weight of the
    classification term is ``cfg.classification_weight``.
    """
    _require_gold(records, bundle)
    before = bundle.fingerprints()
    classifier = ClassClassifier(bundle.labels, bundle.base.config.d_model, bundle.base.config.np_dtype)
    classifier.set_trainable(True)
    params = classifier.named_parameters()
    optimizer = Adam(params, cfg.learning_rate)
    rng = np.random.default_rng(cfg.seed)
    examples = encode_records(records, bundle.vocab, bundle.base.config.max_seq_len)
    label_index = {label: i for i, label in enumerate(bundle.labels)}

    logger.info(f"🚀 SAF classifier training over {bundle.m} private models, {len(examples)} records")
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for batch in make_batches(examples, cfg.batch_size, rng):
            optimizer.zero_grad()
            features = pooled_feature(bundle, batch.src_ids, batch.src_mask)
            class_logits = classifier.logits(features)
            alpha = tc.softmax(class_logits, axis=-1)
            generation = nll_loss(fuse_logits(alpha, private_logits(bundle, batch)), batch.tgt_out)

            gold = np.array([label_index[ex.label] for ex in batch.examples])
            log_post = tc.log_softmax(class_logits, axis=-1)
            classification = tc.mul(tc.mean(log_post[np.arange(len(gold)), gold]), -1.0)
            loss = tc.add(generation, tc.mul(classification, cfg.classification_weight))

            tc.backward(loss, inputs=params.values())
            optimizer.step()
            losses.append(loss.item())
        logger.info(f"📊 saf epoch {epoch}: loss={np.mean(losses):.4f}")

    _check_frozen(before, bundle, "saf_train")
    classifier.set_trainable(False)
    bundle.classifier = classifier
    return classifier


def _teacher_probs(bundle: EnsembleBundle, batch: Batch) -> np.ndarray:
    """Teacher-forced distributions of each row's gold-class private model"""
    probs = None
    labels = [ex.label for ex in batch.examples]
    for label in sorted(set(labels)):
        rows = np.array([i for i, lab in enumerate(labels) if lab == label])
        model = bundle.model_for(label)
        with tc.no_grad():
            logits = model.logits(batch.src_ids[rows], batch.src_mask[rows], batch.tgt_in[rows]).values
        if probs is None:
            probs = np.zeros(batch.tgt_in.shape + (logits.shape[-1],), dtype=logits.dtype)
        probs[rows] = np.exp(log_softmax_np(logits))
    return probs


def sad_train(bundle: EnsembleBundle, records: Sequence[UtteranceRecord], cfg: TrainConfig,
              valid_records: Sequence[UtteranceRecord] = (), event_log: Optional[Path] = None,
              show_progress: bool = False) -> AdapterSet:
    """Distill the class-routed teachers into one student adapter set"""
    _require_gold(records, bundle)
    before = bundle.fingerprints()
    student = AdapterSet.initialize(bundle.base.config, label="student", seed=cfg.seed)
    student.set_trainable(True)
    model = AdaptedModel(bundle.base, student)
    gamma = cfg.gamma

    def loss_fn(m: AdaptedModel, batch: Batch, rng) -> Tensor:
        if gamma == 1.0:
            return nll_batch_loss(m, batch, rng)
        student_logits = m.logits(batch.src_ids, batch.src_mask, batch.tgt_in, rng)
        return distill_loss(student_logits, _teacher_probs(bundle, batch), batch.tgt_out, gamma)

    max_len = bundle.base.config.max_seq_len
    trainer = Seq2SeqTrainer(model, bundle.vocab, cfg.with_overrides(mode="adapter_only"), "student",
                             loss_fn=loss_fn, event_log=event_log, show_progress=show_progress)
    logger.info(f"🚀 SAD distillation with gamma={gamma} on {len(records)} records")
    trainer.fit(encode_records(records, bundle.vocab, max_len), encode_records(valid_records, bundle.vocab, max_len))

    _check_frozen(before, bundle, "sad_train")
    student.set_trainable(False)
    bundle.student = student
    return student


# Inference
def _source(bundle: EnsembleBundle, rec: UtteranceRecord) -> List[int]:
    return assemble_source(rec.question, rec.history, bundle.vocab, bundle.base.config.max_seq_len)


def class_posterior(bundle: EnsembleBundle, src: Sequence[int]) -> np.ndarray:
    src_ids, src_mask = pad_batch([list(src)])
    return bundle.classifier.posterior(pooled_feature(bundle, src_ids, src_mask))[0]


def saf_step_function(bundle: EnsembleBundle, src: Sequence[int], alpha: Optional[np.ndarray] = None):
    """
    Fused next-token log-probabilities for one source

    ``alpha`` defaults to the classifier posterior on f_c, computed once per
    input and held for every decoding step.
    """
    if alpha is None:
        bundle.require("saf")
        alpha = class_posterior(bundle, src)
    alpha = np.asarray(alpha, dtype=np.float64)
    models = bundle.models()
    src_ids = np.asarray([list(src)], dtype=np.int64)
    src_mask = np.ones(src_ids.shape, dtype=bool)
    with tc.no_grad():
        memories = [model.encode(src_ids, src_mask).values for model in models]

    def step(prefixes: List[List[int]]) -> np.ndarray:
        n = len(prefixes)
        fused = None
        for weight, model, memory in zip(alpha, models, memories):
            tiled = Tensor(np.repeat(memory, n, axis=0), dtype=memory.dtype)
            logits = model.decode_step(tiled, np.repeat(src_mask, n, axis=0), prefixes)
            fused = weight * logits if fused is None else fused + weight * logits
        return log_softmax_np(fused)

    return step


def _search(step, beam_width: int, max_len: int) -> List[int]:
    if beam_width == 1:
        return greedy_search(step, max_len).tokens
    return beam_search(step, beam_width, max_len)[0].tokens


def saf_infer(bundle: EnsembleBundle, rec: UtteranceRecord, beam_width: int = Config.BEAM_WIDTH,
              max_len: Optional[int] = None, alpha: Optional[np.ndarray] = None) -> List[str]:
    max_len = max_len or bundle.base.config.max_seq_len - 1
    tokens = _search(saf_step_function(bundle, _source(bundle, rec), alpha), beam_width, max_len)
    return bundle.vocab.decode(tokens)


def route_infer(bundle: EnsembleBundle, rec: UtteranceRecord, mode: str, beam_width: int = Config.BEAM_WIDTH,
                max_len: Optional[int] = None) -> List[str]:
    """Decode with one of the ensemble modes"""
    if mode not in ENSEMBLE_MODES:
        raise ConfigError(f"unknown ensemble mode '{mode}'", mode=mode)
    bundle.require(mode)
    max_len = max_len or bundle.base.config.max_seq_len - 1
    src = _source(bundle, rec)

    if mode == "saf":
        return saf_infer(bundle, rec, beam_width, max_len)
    if mode == "uniform":
        return saf_infer(bundle, rec, beam_width, max_len, alpha=np.full(bundle.m, 1.0 / bundle.m))
    if mode == "sad":
        model = AdaptedModel(bundle.base, bundle.student)
    elif mode == "mix_gold":
        if rec.class_label is None:
            raise MissingGoldLabel(f"record '{rec.record_id}' has no gold class", record_id=rec.record_id)
        model = bundle.model_for(rec.class_label)
    else:
        # np.argmax returns the lowest index among ties
        model = bundle.models()[int(np.argmax(class_posterior(bundle, src)))]
    return bundle.vocab.decode(model.generate(src, beam_width=beam_width, max_len=max_len).tokens)


class EnsembleRewriter:
    """``rewrite(record)`` adapter so ensembles plug into training.evaluate"""

    def __init__(self, bundle: EnsembleBundle, mode: str, beam_width: int = Config.BEAM_WIDTH,
                 max_len: Optional[int] = None, name: Optional[str] = None):
        bundle.require(mode)
        self.bundle = bundle
        self.mode = mode
        self.beam_width = beam_width
        self.max_len = max_len
        self.name = name or mode

    def rewrite(self, rec: UtteranceRecord) -> List[str]:
        return route_infer(self.bundle, rec, self.mode, self.beam_width, self.max_len)


def class_weight_distribution(bundle: EnsembleBundle, records: Sequence[UtteranceRecord]) -> Dict[str, Any]:
    """
    Mean classifier weights per gold class with accuracy and confusion matrix

    Returns:
        ``{"mean_weights": {gold: {label: w}}, "accuracy": float, "confusion": [[...]], "labels": [...]}``
    """
    bundle.require("saf")
    _require_gold(records, bundle)
    gold, predicted = [], []
    sums = {label: np.zeros(bundle.m) for label in bundle.labels}
    counts = {label: 0 for label in bundle.labels}
    for rec in records:
        post = class_posterior(bundle, _source(bundle, rec))
        sums[rec.class_label] += post
        counts[rec.class_label] += 1
        gold.append(rec.class_label)
        predicted.append(bundle.labels[int(np.argmax(post))])

    mean_weights = {
        label: ({other: float(sums[label][i] / counts[label]) for i, other in enumerate(bundle.labels)}
                if counts[label] else None)
        for label in bundle.labels
    }
    return {
        "labels": list(bundle.labels),
        "mean_weights": mean_weights,
        "accuracy": float(accuracy_score(gold, predicted)) if gold else 0.0,
        "confusion": confusion_matrix(gold, predicted, labels=list(bundle.labels)).tolist() if gold else [],
    }


# Persistence
def save_classifier(classifier: ClassClassifier, base: BaseWeights, path) -> str:
    meta = {"labels": list(classifier.labels), "d_model": classifier["weight"].shape[0],
            "base_fingerprint": base.fingerprint()}
    return write_container(path, "classifier", classifier.arrays(), meta)


def load_classifier(path, base: BaseWeights) -> ClassClassifier:
    header, arrays = read_container(path, expected_kind="classifier")
    meta = header["meta"]
    if meta["base_fingerprint"] != base.fingerprint():
        raise IntegrityError(f"classifier in {path} belongs to a different base")
    classifier = ClassClassifier(meta["labels"], meta["d_model"], base.config.np_dtype)
    classifier.load_arrays(arrays)
    classifier.set_trainable(False)
    return classifier


def save_bundle(bundle: EnsembleBundle, directory, base_path=None) -> Path:
    """
    Write every component plus a plain-text manifest

    Args:
        bundle: Ensemble to persist
        directory: Target directory (created)
        base_path: Existing base checkpoint to reference instead of writing a new one

    Returns:
        Path of the manifest
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries: Dict[str, str] = {"mode": bundle.mode, "labels": ",".join(bundle.labels)}

    if base_path is None:
        base_path = directory / "base.ckpt"
        save_base(bundle.base, bundle.vocab, base_path)
    entries["base"] = Path(os.path.relpath(Path(base_path).resolve(), directory.resolve())).as_posix()
    entries["base.fingerprint"] = bundle.base.fingerprint()

    for adapters in bundle.private:
        path = directory / f"private_{adapters.label}.ckpt"
        entries[f"private.{adapters.label}"] = path.name
        entries[f"private.{adapters.label}.fingerprint"] = save_adapters(adapters, bundle.base, path)
    if bundle.classifier is not None:
        path = directory / "classifier.ckpt"
        entries["classifier"] = path.name
        entries["classifier.fingerprint"] = save_classifier(bundle.classifier, bundle.base, path)
    if bundle.student is not None:
        path = directory / "student.ckpt"
        entries["student"] = path.name
        entries["student.fingerprint"] = save_adapters(bundle.student, bundle.base, path)

    manifest = directory / Config.MANIFEST_FILE
    with open(manifest, 'w', encoding='utf-8') as f:
        f.write(f"{BUNDLE_MAGIC} 1\n")
        for key in entries:
            f.write(f"{key} = {entries[key]}\n")
    logger.info(f"💾 Saved ensemble bundle ({bundle.m} private models) to {directory}")
    return manifest


def _read_manifest(path: Path) -> Dict[str, str]:
    with open(path, 'r', encoding='utf-8') as f:
        first = f.readline().split()
        if not first or first[0] != BUNDLE_MAGIC:
            raise IntegrityError(f"{path} is not a bundle manifest", path=str(path))
        entries = {}
        for line in f:
            if "=" in line:
                key, value = (part.strip() for part in line.split("=", 1))
                entries[key] = value
    return entries


def load_bundle(manifest_path) -> EnsembleBundle:
    """Load a bundle, checking every component against the fingerprints in the manifest"""
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / Config.MANIFEST_FILE
    entries = _read_manifest(manifest_path)
    root = manifest_path.parent

    def _verify(name: str, actual: str) -> None:
        expected = entries.get(f"{name}.fingerprint")
        if expected != actual:
            raise IntegrityError(f"fingerprint of '{name}' does not match the manifest",
                                 component=name, expected=expected, actual=actual)

    base, vocab = load_base(root / entries["base"])
    _verify("base", base.fingerprint())
    private = []
    for label in entries["labels"].split(","):
        adapters = load_adapters(root / entries[f"private.{label}"], base)
        _verify(f"private.{label}", adapters.fingerprint())
        private.append(adapters)
    classifier = student = None
    if "classifier" in entries:
        classifier = load_classifier(root / entries["classifier"], base)
        _verify("classifier", classifier.fingerprint())
    if "student" in entries:
        student = load_adapters(root / entries["student"], base)
        _verify("student", student.fingerprint())
    return EnsembleBundle(base, vocab, private, classifier, student, entries["mode"])
