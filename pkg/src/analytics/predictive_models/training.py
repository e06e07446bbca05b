"""
Gradus QR v1.0 - Rewriting Model Training
Loss functions, Adam, batching and the shared / private / pretraining loops

Core routines:
1. Teacher-forced NLL and distillation losses
2. Shared model (all classes) and private models (one class each)
3. Denoising pretraining of the frozen base
4. Per-class evaluation with record-level scores
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from src.core import tensorcore as tc
from src.core.corpus import DifficultyPartition, UtteranceRecord
from src.core.exceptions import ConfigError, EmptyCorpus, FrozenBaseViolated, ShapeError
from src.core.seqmodel import (
    AdaptedModel,
    AdapterSet,
    BaseWeights,
    ModelConfig,
    Vocabulary,
    assemble_source,
    assemble_target,
    pad_batch,
)
from src.core.tensorcore import Tensor
from src.core.textmetrics import rouge_l, rouge_n, sentence_bleu
from src.utils.config import Config, SpecialTokens, parse_flat_config
from src.utils.data_loader import append_jsonl

logger = logging.getLogger(__name__)

MODES = ("finetune_all", "adapter_only")


@dataclass
class TrainConfig:
    mode: str = "adapter_only"
    learning_rate: Optional[float] = None
    epochs: int = 10
    batch_size: int = 32
    seed: int = 17
    clip_norm: float = 1.0
    gamma: float = Config.DISTILL_GAMMA
    classification_weight: float = 1.0
    validation_beam: int = 1
    test_beam: int = Config.BEAM_WIDTH
    max_decode_len: Optional[int] = None
    workers: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got '{self.mode}'", mode=self.mode)
        if self.learning_rate is None:
            self.learning_rate = Config.ADAPTER_LR if self.mode == "adapter_only" else Config.FINETUNE_LR
        # zero is accepted so a run can be replayed without moving any weight
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in [0, 1], got {self.gamma}", gamma=self.gamma)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.clip_norm <= 0:
            raise ConfigError(f"clip_norm must be positive, got {self.clip_norm}")
        if self.validation_beam < 1 or self.test_beam < 1 or self.workers < 1:
            raise ConfigError("beam widths and workers must be >= 1")

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        settings = parse_flat_config(path)
        unknown = set(settings) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training keys: {sorted(unknown)}", path=str(path))
        settings.update(overrides)
        return cls(**settings)

    def with_overrides(self, **overrides) -> "TrainConfig":
        values = {name: getattr(self, name) for name in self.__dataclass_fields__}
        values.update(overrides)
        return TrainConfig(**values)


# Losses
def _row_weights(targets: np.ndarray) -> Tuple[np.ndarray, float]:
    mask = targets != SpecialTokens.PAD
    rows = int(mask.any(axis=1).sum())
    return mask, float(max(rows, 1))


def _check_targets(logits: Tensor, targets: np.ndarray) -> None:
    if logits.ndim != 3 or logits.shape[:2] != targets.shape:
        raise ShapeError(f"logits {logits.shape} do not match targets {targets.shape}",
                         left=list(logits.shape), right=list(targets.shape))


def nll_loss(logits: Tensor, targets) -> Tensor:
    """
    Teacher-forced negative log-likelihood

    Summed over time steps and averaged over rows that hold at least one
    non-pad target; pad positions add nothing to either.
    """
    targets = np.asarray(targets, dtype=np.int64)
    _check_targets(logits, targets)
    B, T = targets.shape
    mask, rows = _row_weights(targets)
    logp = tc.log_softmax(logits, axis=-1)
    picked = logp[np.arange(B)[:, None], np.arange(T)[None, :], targets]
    masked = tc.mul(picked, Tensor(mask.astype(logits.dtype)))
    return tc.mul(tc.sum_(masked), -1.0 / rows)


def kd_loss(student_logits: Tensor, teacher_probs: np.ndarray, targets) -> Tensor:
    """Cross-entropy of the student against teacher distributions, normalized like nll_loss"""
    targets = np.asarray(targets, dtype=np.int64)
    _check_targets(student_logits, targets)
    if teacher_probs.shape != student_logits.shape:
        raise ShapeError(f"teacher {teacher_probs.shape} does not match student {student_logits.shape}",
                         left=list(teacher_probs.shape), right=list(student_logits.shape))
    mask, rows = _row_weights(targets)
    logp = tc.log_softmax(student_logits, axis=-1)
    per_position = tc.sum_(tc.mul(logp, Tensor(teacher_probs, dtype=student_logits.dtype)), axis=-1)
    masked = tc.mul(per_position, Tensor(mask.astype(student_logits.dtype)))
    return tc.mul(tc.sum_(masked), -1.0 / rows)


def distill_loss(student_logits: Tensor, teacher_probs: np.ndarray, targets, gamma: float) -> Tensor:
    """(1 - gamma) * KD + gamma * NLL"""
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must be in [0, 1], got {gamma}", gamma=gamma)
    kd = kd_loss(student_logits, teacher_probs, targets)
    nll = nll_loss(student_logits, targets)
    return tc.add(tc.mul(kd, 1.0 - gamma), tc.mul(nll, gamma))


# Optimization
class Adam:
    """Adam with constant learning rate over a fixed parameter dict"""

    def __init__(self, params: Dict[str, Tensor], lr: float, betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.values) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.values) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        correction1 = 1.0 - self.beta1 ** self.t
        correction2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * p.grad
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * p.grad * p.grad
            update = (self.m[name] / correction1) / (np.sqrt(self.v[name] / correction2) + self.eps)
            p.values = p.values - self.lr * update


def clip_grad_norm(params: Dict[str, Tensor], max_norm: float) -> float:
    """Rescale grads in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm"""
    total = float(np.sqrt(sum(float((p.grad ** 2).sum()) for p in params.values() if p.grad is not None)))
    if total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# Batching
@dataclass(frozen=True)
class EncodedExample:
    record_id: str
    src: Tuple[int, ...]
    tgt_in: Tuple[int, ...]
    tgt_out: Tuple[int, ...]
    reference: Tuple[str, ...]
    label: Optional[str] = None


@dataclass
class Batch:
    examples: List[EncodedExample]
    src_ids: np.ndarray
    src_mask: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray


def encode_record(rec: UtteranceRecord, vocab: Vocabulary, max_len: int) -> EncodedExample:
    tgt_in, tgt_out = assemble_target(rec.rewrite, vocab, max_len)
    return EncodedExample(
        record_id=rec.record_id,
        src=tuple(assemble_source(rec.question, rec.history, vocab, max_len)),
        tgt_in=tuple(tgt_in),
        tgt_out=tuple(tgt_out),
        reference=tuple(rec.rewrite),
        label=rec.class_label,
    )


def encode_records(records: Sequence[UtteranceRecord], vocab: Vocabulary, max_len: int) -> List[EncodedExample]:
    return [encode_record(rec, vocab, max_len) for rec in records]


def collate(examples: Sequence[EncodedExample]) -> Batch:
    src_ids, src_mask = pad_batch([ex.src for ex in examples])
    tgt_in, _ = pad_batch([ex.tgt_in for ex in examples])
    tgt_out, _ = pad_batch([ex.tgt_out for ex in examples])
    return Batch(list(examples), src_ids, src_mask, tgt_in, tgt_out)


def make_batches(examples: Sequence[EncodedExample], batch_size: int, rng: np.random.Generator,
                 bucket_factor: int = 4) -> List[Batch]:
    """
    Seed-keyed length bucketing

    Examples are shuffled, grouped into windows of ``bucket_factor`` batches,
    sorted by source length inside each window and cut into batches; the batch
    order is shuffled again.
    """
    order = rng.permutation(len(examples))
    window = batch_size * bucket_factor
    batches: List[Batch] = []
    for start in range(0, len(order), window):
        chunk = sorted(order[start:start + window], key=lambda i: (len(examples[i].src), i))
        for b in range(0, len(chunk), batch_size):
            batches.append(collate([examples[i] for i in chunk[b:b + batch_size]]))
    return [batches[i] for i in rng.permutation(len(batches))]


# Decoding and evaluation
class ModelRewriter:
    """Decode a record with a single adapted model"""

    def __init__(self, model: AdaptedModel, vocab: Vocabulary, beam_width: int = Config.BEAM_WIDTH,
                 max_len: Optional[int] = None, name: Optional[str] = None):
        self.model = model
        self.vocab = vocab
        self.beam_width = beam_width
        self.max_len = max_len
        self.name = name or model.label

    def source_ids(self, rec: UtteranceRecord) -> List[int]:
        return assemble_source(rec.question, rec.history, self.vocab, self.model.config.max_seq_len)

    def rewrite(self, rec: UtteranceRecord) -> List[str]:
        hyp = self.model.generate(self.source_ids(rec), beam_width=self.beam_width, max_len=self.max_len)
        return self.vocab.decode(hyp.tokens)


@dataclass
class EvaluationReport:
    system: str
    records: List[Dict[str, Any]]
    per_class: Dict[str, Optional[float]]
    overall: float
    rouge: Dict[str, float] = field(default_factory=dict)

    @property
    def mean_over_classes(self) -> Optional[float]:
        present = [v for v in self.per_class.values() if v is not None]
        return float(np.mean(present)) if present else None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "system": self.system,
            "per_class": self.per_class,
            "overall": self.overall,
            "mean_over_classes": self.mean_over_classes,
            "rouge": self.rouge,
        }


def _score_output(rec: UtteranceRecord, output: List[str], z: Optional[float], label: Optional[str]) -> Dict:
    reference = list(rec.rewrite)
    if output:
        bleu = sentence_bleu(output, reference).value
        r1 = rouge_n(output, reference, 1).value
        r2 = rouge_n(output, reference, 2).value
        rl = rouge_l(output, reference).value
    else:
        bleu = r1 = r2 = rl = 0.0
    return {
        "record_id": rec.record_id,
        "z": z,
        "class": label,
        "bleu": bleu,
        "rouge1": r1,
        "rouge2": r2,
        "rougeL": rl,
        "output_tokens": output,
    }


def evaluate(rewriter, records: Sequence[UtteranceRecord], partition: Optional[DifficultyPartition] = None,
             workers: int = 1, system: Optional[str] = None, show_progress: bool = False) -> EvaluationReport:
    """
    Decode every record and score it against its gold rewrite

    Args:
        rewriter: Object with ``rewrite(record) -> tokens``
        records: Evaluation split
        partition: Class assignment; records absent from it get class None
        workers: Thread count for decoding
        system: Name written into the report

    Returns:
        EvaluationReport with record-level rows, per-class means (None for an
        empty class) and the overall mean
    """
    records = list(records)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(rewriter.rewrite, records))
    else:
        outputs = [rewriter.rewrite(rec) for rec in tqdm(records, desc="decode", disable=not show_progress)]

    rows = []
    for rec, output in zip(records, outputs):
        label = partition.assignments.get(rec.record_id) if partition is not None else rec.class_label
        z = partition.scores.get(rec.record_id) if partition is not None else None
        rows.append(_score_output(rec, output, z, label))

    labels = list(partition.labels) if partition is not None else sorted({r["class"] for r in rows if r["class"]})
    per_class: Dict[str, Optional[float]] = {}
    for label in labels:
        scores = [r["bleu"] for r in rows if r["class"] == label]
        per_class[label] = float(np.mean(scores)) if scores else None

    overall = float(np.mean([r["bleu"] for r in rows])) if rows else 0.0
    rouge = {name: (float(np.mean([r[name] for r in rows])) if rows else 0.0) for name in ("rouge1", "rouge2", "rougeL")}
    return EvaluationReport(system or getattr(rewriter, "name", "model"), rows, per_class, overall, rouge)


def validation_bleu(model: AdaptedModel, vocab: Vocabulary, examples: Sequence[EncodedExample],
                    beam_width: int = 1, max_len: Optional[int] = None) -> float:
    if not examples:
        return 0.0
    scores = []
    for ex in examples:
        hyp = model.generate(list(ex.src), beam_width=beam_width, max_len=max_len)
        output = vocab.decode(hyp.tokens)
        scores.append(sentence_bleu(output, list(ex.reference)).value if output else 0.0)
    return float(np.mean(scores))


# Training loops
@dataclass
class TrainedModel:
    model: AdaptedModel
    label: str
    mode: str
    log: List[Dict[str, Any]] = field(default_factory=list)
    best_epoch: int = 0
    best_bleu: Optional[float] = None
    base_fingerprint: Optional[str] = None

    @property
    def adapters(self) -> Optional[AdapterSet]:
        return self.model.adapters

    @property
    def base(self) -> BaseWeights:
        return self.model.base


LossFn = Callable[[AdaptedModel, Batch, Optional[np.random.Generator]], Tensor]


def nll_batch_loss(model: AdaptedModel, batch: Batch, rng: Optional[np.random.Generator]) -> Tensor:
    return nll_loss(model.logits(batch.src_ids, batch.src_mask, batch.tgt_in, rng), batch.tgt_out)


class Seq2SeqTrainer:
    """Teacher-forced training of whatever parameters of a model require grad"""

    def __init__(self, model: AdaptedModel, vocab: Vocabulary, cfg: TrainConfig, label: str,
                 loss_fn: LossFn = nll_batch_loss, event_log: Optional[Path] = None, show_progress: bool = False):
        self.model = model
        self.vocab = vocab
        self.cfg = cfg
        self.label = label
        self.loss_fn = loss_fn
        self.event_log = Path(event_log) if event_log else None
        self.show_progress = show_progress
        self.stats = {"steps": 0, "epochs": 0, "best_epoch": 0}

    def _log_event(self, event: Dict[str, Any]) -> None:
        event = {"model": self.label, **event}
        if self.event_log is not None:
            append_jsonl(self.event_log, event)

    def fit(self, train: Sequence[EncodedExample], valid: Sequence[EncodedExample] = ()) -> TrainedModel:
        params = self.model.trainable_parameters()
        if not params:
            raise ConfigError(f"model '{self.label}' has no trainable parameters")
        optimizer = Adam(params, self.cfg.learning_rate)
        data_rng = np.random.default_rng(self.cfg.seed)
        dropout_rng = np.random.default_rng(self.cfg.seed + 1) if self.model.config.dropout > 0 else None

        log: List[Dict[str, Any]] = []
        best_bleu: Optional[float] = None
        best_state = {name: p.values.copy() for name, p in params.items()}
        best_epoch = 0

        for epoch in range(1, self.cfg.epochs + 1):
            losses = []
            batches = make_batches(train, self.cfg.batch_size, data_rng)
            for batch in tqdm(batches, desc=f"{self.label} epoch {epoch}", disable=not self.show_progress):
                optimizer.zero_grad()
                loss = self.loss_fn(self.model, batch, dropout_rng)
                tc.backward(loss, inputs=params.values())
                clip_grad_norm(params, self.cfg.clip_norm)
                optimizer.step()
                losses.append(loss.item())
                self.stats["steps"] += 1
            train_loss = float(np.mean(losses)) if losses else 0.0
            event = {"epoch": epoch, "split": "train", "loss": train_loss, "bleu": None}
            log.append(event)
            self._log_event(event)

            if valid:
                bleu = validation_bleu(self.model, self.vocab, valid, self.cfg.validation_beam, self.cfg.max_decode_len)
                event = {"epoch": epoch, "split": "valid", "loss": None, "bleu": bleu}
                log.append(event)
                self._log_event(event)
                if best_bleu is None or bleu > best_bleu:
                    best_bleu, best_epoch = bleu, epoch
                    best_state = {name: p.values.copy() for name, p in params.items()}
            else:
                best_epoch = epoch
                best_state = {name: p.values.copy() for name, p in params.items()}
            self.stats["epochs"] = epoch
            logger.info(f"📊 {self.label} epoch {epoch}: loss={train_loss:.4f}"
                        + (f" valid_bleu={log[-1]['bleu']:.4f}" if valid else ""))

        for name, p in params.items():
            p.values = best_state[name]
        for p in params.values():
            p.grad = None
        self.stats["best_epoch"] = best_epoch
        return TrainedModel(self.model, self.label, self.cfg.mode, log, best_epoch, best_bleu)


def _prepare_model(base: BaseWeights, cfg: TrainConfig, label: str,
                   init_adapters: Optional[AdapterSet] = None) -> AdaptedModel:
    if cfg.mode == "adapter_only":
        base.set_trainable(False)
        if init_adapters is not None:
            adapters = init_adapters.copy(label=label)
        else:
            adapters = AdapterSet.initialize(base.config, label=label, seed=cfg.seed)
        adapters.set_trainable(True)
        return AdaptedModel(base, adapters)
    tuned = base.copy()
    tuned.set_trainable(True)
    return AdaptedModel(tuned, None)


def _train(records: Sequence[UtteranceRecord], base: BaseWeights, vocab: Vocabulary, cfg: TrainConfig,
           label: str, valid_records: Sequence[UtteranceRecord] = (), init_adapters: Optional[AdapterSet] = None,
           event_log: Optional[Path] = None, show_progress: bool = False) -> TrainedModel:
    if not records:
        raise EmptyCorpus(f"no training records for '{label}'", label=label)
    fingerprint = base.fingerprint()
    model = _prepare_model(base, cfg, label, init_adapters)
    max_len = base.config.max_seq_len
    trainer = Seq2SeqTrainer(model, vocab, cfg, label, event_log=event_log, show_progress=show_progress)
    logger.info(f"🚀 Training '{label}' ({cfg.mode}) on {len(records)} records")
    trained = trainer.fit(encode_records(records, vocab, max_len), encode_records(valid_records, vocab, max_len))

    if cfg.mode == "adapter_only":
        if base.fingerprint() != fingerprint:
            raise FrozenBaseViolated(f"base weights changed while training '{label}'", label=label)
        trained.base_fingerprint = fingerprint
        model.adapters.set_trainable(False)
    else:
        model.base.set_trainable(False)
        trained.base_fingerprint = model.base.fingerprint()
    logger.info(f"✅ '{label}' done: best epoch {trained.best_epoch}")
    return trained


def train_shared(records: Sequence[UtteranceRecord], base: BaseWeights, vocab: Vocabulary, cfg: TrainConfig,
                 valid_records: Sequence[UtteranceRecord] = (), event_log: Optional[Path] = None,
                 show_progress: bool = False) -> TrainedModel:
    """One model over every class"""
    return _train(records, base, vocab, cfg, "shared", valid_records, event_log=event_log,
                  show_progress=show_progress)


def train_private(class_records: Sequence[UtteranceRecord], base: BaseWeights, vocab: Vocabulary,
                  cfg: TrainConfig, class_label: str, valid_records: Sequence[UtteranceRecord] = (),
                  init_adapters: Optional[AdapterSet] = None, event_log: Optional[Path] = None,
                  show_progress: bool = False) -> TrainedModel:
    """
    Private model for one difficulty class

    In adapter mode only the adapters move; a base fingerprint change after
    training raises FrozenBaseViolated. ``init_adapters`` starts from an
    existing set (e.g. the shared model's) instead of zero-initialized ones.
    """
    return _train(class_records, base, vocab, cfg, class_label, valid_records, init_adapters,
                  event_log=event_log, show_progress=show_progress)


# Pretraining
def _noised(tokens: Sequence[int], rng: np.random.Generator, drop: float, mask: float) -> List[int]:
    out = []
    for tok in tokens:
        u = rng.random()
        if u < drop:
            continue
        out.append(SpecialTokens.UNK if u < drop + mask else tok)
    return out or list(tokens[:1])


def denoising_examples(records: Sequence[UtteranceRecord], vocab: Vocabulary, max_len: int, seed: int,
                       drop: float = 0.15, mask: float = 0.15) -> List[EncodedExample]:
    """Reconstruct every question, history turn and rewrite from a corrupted copy"""
    rng = np.random.default_rng(seed)
    seen = set()
    examples: List[EncodedExample] = []
    for rec in records:
        for seq in (rec.question, rec.rewrite) + tuple(rec.history):
            if seq in seen:
                continue
            seen.add(seq)
            ids = vocab.encode(seq)[:max_len]
            tgt_in, tgt_out = assemble_target(seq, vocab, max_len)
            examples.append(EncodedExample(f"denoise#{len(examples)}", tuple(_noised(ids, rng, drop, mask)),
                                           tuple(tgt_in), tuple(tgt_out), tuple(seq)))
    return examples


def pretrain_base(records: Sequence[UtteranceRecord], vocab: Vocabulary, model_cfg: ModelConfig,
                  cfg: TrainConfig, event_log: Optional[Path] = None, show_progress: bool = False) -> BaseWeights:
    """Full-parameter denoising pretraining; the returned base is frozen"""
    if not records:
        raise EmptyCorpus("no records to pretrain on")
    base = BaseWeights.initialize(model_cfg, seed=cfg.seed)
    base.set_trainable(True)
    examples = denoising_examples(records, vocab, model_cfg.max_seq_len, cfg.seed)
    logger.info(f"🚀 Pretraining base on {len(examples)} denoising pairs")
    trainer = Seq2SeqTrainer(AdaptedModel(base), vocab, cfg.with_overrides(mode="finetune_all",
                             learning_rate=cfg.learning_rate), "pretrain", event_log=event_log,
                             show_progress=show_progress)
    trainer.fit(examples)
    base.set_trainable(False)
    logger.info(f"✅ Base pretrained, fingerprint {base.fingerprint()[:12]}")
    return base
