"""
Gradus QR v1.0 - Corpus Model
Utterance records, pronoun-replacement preprocessing, difficulty scoring and class partitioning
"""

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import pandas as pd

from src.core.exceptions import (
    DuplicateRecord,
    EmptyText,
    InvalidScheme,
    ParseError,
    SchemaError,
    ScoreRange,
    TooFewRecords,
    UnknownRecord,
)
from src.core.textmetrics import BleuConfig, TokenSeq, rouge_l, sentence_bleu, tokenize

logger = logging.getLogger(__name__)

PRONOUNS = frozenset({
    "he", "his", "him", "she", "her", "hers",
    "they", "their", "them", "it", "its", "this", "that",
})

REQUIRED_FIELDS = ("dialogue_id", "turn", "question", "history", "rewrite")

RULE_IDS = tuple(range(1, 8))


@dataclass(frozen=True)
class UtteranceRecord:
    question: Tuple[str, ...]
    history: Tuple[Tuple[str, ...], ...]
    rewrite: Tuple[str, ...]
    dialogue_id: str
    turn_index: int
    class_label: Optional[str] = None

    def __post_init__(self):
        if not self.question or not self.rewrite:
            raise EmptyText("question and rewrite must be non-empty", record_id=self.record_id)
        if self.turn_index < 0:
            raise ValueError(f"turn_index must be >= 0, got {self.turn_index}")
        if self.turn_index > 0 and not self.history:
            raise ValueError(f"turn {self.turn_index} of '{self.dialogue_id}' has no history")

    @property
    def record_id(self) -> str:
        return f"{self.dialogue_id}#{self.turn_index}"

    def with_label(self, label: Optional[str]) -> "UtteranceRecord":
        return UtteranceRecord(self.question, self.history, self.rewrite,
                               self.dialogue_id, self.turn_index, label)

    def to_json(self) -> Dict:
        payload = {
            "dialogue_id": self.dialogue_id,
            "turn": self.turn_index,
            "question": " ".join(self.question),
            "history": [" ".join(turn) for turn in self.history],
            "rewrite": " ".join(self.rewrite),
        }
        if self.class_label is not None:
            payload["class"] = self.class_label
        return payload


def make_record(question: str, rewrite: str, history: Sequence[str] = (), dialogue_id: str = "d0",
                turn_index: int = 0, class_label: Optional[str] = None) -> UtteranceRecord:
    """Build a record from raw strings"""
    return UtteranceRecord(
        question=tuple(tokenize(question)),
        history=tuple(tuple(tokenize(turn)) for turn in history if turn and turn.strip()),
        rewrite=tuple(tokenize(rewrite)),
        dialogue_id=str(dialogue_id),
        turn_index=int(turn_index),
        class_label=class_label,
    )


def load_corpus(path, format: str = "jsonl") -> List[UtteranceRecord]:
    """
    Load a corpus file in file order

    Args:
        path: Line-delimited JSON corpus
        format: Only ``jsonl`` is supported

    Returns:
        List of UtteranceRecord (empty for an empty file)
    """
    if format != "jsonl":
        raise ValueError(f"unsupported corpus format '{format}'")

    records: List[UtteranceRecord] = []
    first_line: Dict[str, int] = {}
    with open(Path(path), 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(str(e), line=line_no) from e
            if not isinstance(obj, dict):
                raise ParseError("record is not a JSON object", line=line_no)
            for name in REQUIRED_FIELDS:
                if name not in obj:
                    raise SchemaError(f"missing field '{name}'", line=line_no, field=name)
            if not isinstance(obj["history"], list):
                raise SchemaError("'history' must be an array", line=line_no, field="history")
            try:
                records.append(make_record(
                    question=obj["question"],
                    rewrite=obj["rewrite"],
                    history=obj["history"],
                    dialogue_id=obj["dialogue_id"],
                    turn_index=obj["turn"],
                    class_label=obj.get("class"),
                ))
            except EmptyText as e:
                raise SchemaError(f"empty text: {e.message}", line=line_no) from e
            except (TypeError, ValueError) as e:
                raise SchemaError(str(e), line=line_no) from e
            record_id = records[-1].record_id
            if record_id in first_line:
                raise SchemaError(f"duplicate record '{record_id}' (first on line {first_line[record_id]})",
                                  line=line_no, field="turn")
            first_line[record_id] = line_no

    logger.info(f"📊 Loaded {len(records)} records from {path}")
    return records


def save_corpus(records: Iterable[UtteranceRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        for record in records:
            f.write(json.dumps(record.to_json(), ensure_ascii=False, sort_keys=True) + "\n")


def pronoun_replace(q: Sequence[str], q_rewrite: Sequence[str]) -> TokenSeq:
    """
    Substitute the single pronoun of ``q`` when that alone explains the rewrite

    The tokens before and after the pronoun must match the prefix and suffix of
    the rewrite; the span between them is the replacement.
    """
    q = list(q)
    q_rewrite = list(q_rewrite)
    positions = [i for i, token in enumerate(q) if token in PRONOUNS]
    if len(positions) != 1:
        return q

    idx = positions[0]
    prefix, suffix = q[:idx], q[idx + 1:]
    middle = len(q_rewrite) - len(prefix) - len(suffix)
    if middle < 1:
        return q
    if q_rewrite[:len(prefix)] != prefix:
        return q
    if suffix and q_rewrite[len(q_rewrite) - len(suffix):] != suffix:
        return q
    return prefix + q_rewrite[len(prefix):len(prefix) + middle] + suffix


def difficulty_score(rec: UtteranceRecord, apply_pronoun_rule: bool = True,
                     cfg: BleuConfig = BleuConfig()) -> float:
    """z = BLEU(q, q') with the rewrite as reference"""
    hyp = pronoun_replace(rec.question, rec.rewrite) if apply_pronoun_rule else list(rec.question)
    return sentence_bleu(hyp, list(rec.rewrite), cfg).value


def score_corpus(records: Sequence[UtteranceRecord], apply_pronoun_rule: bool = True,
                 cfg: BleuConfig = BleuConfig()) -> List[float]:
    return [difficulty_score(rec, apply_pronoun_rule, cfg) for rec in records]


@dataclass(frozen=True)
class Interval:
    label: str
    lower: float
    upper: float
    lower_closed: bool = True
    upper_closed: bool = True

    def contains(self, z: float) -> bool:
        above = z >= self.lower if self.lower_closed else z > self.lower
        below = z <= self.upper if self.upper_closed else z < self.upper
        return above and below


@dataclass(frozen=True)
class IntervalScheme:
    intervals: Tuple[Interval, ...]
    name: str = "custom"

    def __post_init__(self):
        _validate_scheme(self.intervals)

    @property
    def labels(self) -> Tuple[str, ...]:
        return tuple(iv.label for iv in self.intervals)

    def classify(self, z: float) -> str:
        if math.isnan(z) or z < 0.0 or z > 1.0:
            raise ScoreRange(f"score {z} outside [0, 1]", score=z)
        for interval in self.intervals:
            if interval.contains(z):
                return interval.label
        raise InvalidScheme(f"no interval contains {z}", score=z)


def _validate_scheme(intervals: Sequence[Interval]) -> None:
    if not intervals:
        raise InvalidScheme("scheme has no intervals")
    labels = [iv.label for iv in intervals]
    if len(set(labels)) != len(labels):
        raise InvalidScheme(f"duplicate labels in scheme: {labels}")
    for iv in intervals:
        if iv.lower > iv.upper or (iv.lower == iv.upper and not (iv.lower_closed and iv.upper_closed)):
            raise InvalidScheme(f"empty interval for '{iv.label}'")

    ordered = sorted(intervals, key=lambda iv: (iv.lower, not iv.lower_closed))
    first, last = ordered[0], ordered[-1]
    if first.lower != 0.0 or not first.lower_closed:
        raise InvalidScheme("scheme must include 0")
    if last.upper != 1.0 or not last.upper_closed:
        raise InvalidScheme("scheme must include 1")
    for left, right in zip(ordered, ordered[1:]):
        if left.upper > right.lower:
            raise InvalidScheme(f"intervals '{left.label}' and '{right.label}' overlap")
        if left.upper < right.lower:
            raise InvalidScheme(f"gap between '{left.label}' and '{right.label}'")
        # shared boundary must belong to exactly one side
        if left.upper_closed == right.lower_closed:
            kind = "overlap" if left.upper_closed else "gap"
            raise InvalidScheme(f"boundary {left.upper} has an {kind} between '{left.label}' and '{right.label}'")


DEFAULT_SCHEME = IntervalScheme((
    Interval("hard", 0.0, 0.2, True, True),
    Interval("medium", 0.2, 0.5, False, True),
    Interval("easy", 0.5, 1.0, False, True),
), name="default")

LEFT_CLOSED_SCHEME = IntervalScheme((
    Interval("hard", 0.0, 0.2, True, False),
    Interval("medium", 0.2, 0.5, True, False),
    Interval("easy", 0.5, 1.0, True, True),
), name="left_closed")


def ten_bin_scheme() -> IntervalScheme:
    """Bin 0 is [0, 0.1]; bins 1..9 are (0.1k, 0.1(k+1)]"""
    intervals = [Interval("0", 0.0, 0.1, True, True)]
    for k in range(1, 10):
        intervals.append(Interval(str(k), round(0.1 * k, 10), round(0.1 * (k + 1), 10), False, True))
    return IntervalScheme(tuple(intervals), name="ten_bin")


def eleven_class_scheme() -> IntervalScheme:
    """[0,0.1], (0.1,0.2], ..., (0.8,0.9], (0.9,1), and exactly 1"""
    intervals = [Interval("0", 0.0, 0.1, True, True)]
    for k in range(1, 9):
        intervals.append(Interval(str(k), round(0.1 * k, 10), round(0.1 * (k + 1), 10), False, True))
    intervals.append(Interval("9", 0.9, 1.0, False, False))
    intervals.append(Interval("10", 1.0, 1.0, True, True))
    return IntervalScheme(tuple(intervals), name="eleven_class")


def equal_width_scheme(k: int) -> IntervalScheme:
    if k < 1:
        raise InvalidScheme(f"need at least one class, got {k}")
    intervals = [Interval("0", 0.0, round(1.0 / k, 12), True, True)]
    for i in range(1, k):
        intervals.append(Interval(str(i), round(i / k, 12), round((i + 1) / k, 12), False, True))
    return IntervalScheme(tuple(intervals), name=f"equal_width:{k}")


def scheme_by_name(name: str) -> IntervalScheme:
    """Resolve a named scheme (default, left_closed, ten_bin, eleven_class, equal_width:<k>)"""
    if name == "default":
        return DEFAULT_SCHEME
    if name == "left_closed":
        return LEFT_CLOSED_SCHEME
    if name == "ten_bin":
        return ten_bin_scheme()
    if name == "eleven_class":
        return eleven_class_scheme()
    if name.startswith("equal_width:"):
        return equal_width_scheme(int(name.split(":", 1)[1]))
    raise InvalidScheme(f"unknown scheme '{name}'", scheme=name)


@dataclass
class DifficultyPartition:
    labels: Tuple[str, ...]
    assignments: Dict[str, str]
    scheme: Optional[IntervalScheme] = None
    scores: Dict[str, float] = field(default_factory=dict)

    def label_of(self, record_id: str) -> str:
        if record_id not in self.assignments:
            raise UnknownRecord(f"record '{record_id}' is not in the partition", record_id=record_id)
        return self.assignments[record_id]

    def members(self, label: str) -> List[str]:
        return [rid for rid, lab in self.assignments.items() if lab == label]

    def sizes(self) -> Dict[str, int]:
        counts = Counter(self.assignments.values())
        return {label: counts.get(label, 0) for label in self.labels}

    def proportions(self) -> Dict[str, float]:
        total = len(self.assignments)
        return {label: (n / total if total else 0.0) for label, n in self.sizes().items()}

    def select(self, records: Sequence[UtteranceRecord], label: str) -> List[UtteranceRecord]:
        return [rec for rec in records if self.assignments.get(rec.record_id) == label]


def partition(records: Sequence[UtteranceRecord], scores: Sequence[float],
              scheme: IntervalScheme = DEFAULT_SCHEME) -> DifficultyPartition:
    """Label every record with the unique scheme interval containing its score"""
    if len(records) != len(scores):
        raise ValueError(f"got {len(scores)} scores for {len(records)} records")
    _validate_scheme(scheme.intervals)
    _require_unique_ids(records)

    assignments: Dict[str, str] = {}
    score_map: Dict[str, float] = {}
    for rec, z in zip(records, scores):
        assignments[rec.record_id] = scheme.classify(float(z))
        score_map[rec.record_id] = float(z)
    return DifficultyPartition(labels=scheme.labels, assignments=assignments, scheme=scheme, scores=score_map)


def _require_unique_ids(records: Sequence[UtteranceRecord]) -> None:
    seen = set()
    for rec in records:
        if rec.record_id in seen:
            raise DuplicateRecord(rec.record_id)
        seen.add(rec.record_id)


def _length_ratio(rec: UtteranceRecord) -> float:
    return len(rec.question) / len(rec.rewrite)


TERCILE_SCORERS = {
    "len_q": lambda rec: float(len(rec.question)),
    "len_rewrite": lambda rec: float(len(rec.rewrite)),
    "len_ratio": _length_ratio,
    "rouge_l": lambda rec: rouge_l(list(rec.question), list(rec.rewrite)).value,
    "bleu": lambda rec: difficulty_score(rec, apply_pronoun_rule=True),
}

TERCILE_LABELS = ("D1", "D2", "D3")


def tercile_partition(records: Sequence[UtteranceRecord], scorer: str) -> DifficultyPartition:
    """Rank ascending by the scorer and cut into three near-equal classes"""
    if scorer not in TERCILE_SCORERS:
        raise ValueError(f"unknown scorer '{scorer}', expected one of {sorted(TERCILE_SCORERS)}")
    n = len(records)
    if n < 3:
        raise TooFewRecords(f"tercile split needs >= 3 records, got {n}", count=n)

    _require_unique_ids(records)
    score_fn = TERCILE_SCORERS[scorer]
    scores = [score_fn(rec) for rec in records]
    # stable sort keeps record order among ties
    order = sorted(range(n), key=lambda i: scores[i])

    base, remainder = divmod(n, 3)
    sizes = [base + (1 if k < remainder else 0) for k in range(3)]
    assignments: Dict[str, str] = {}
    start = 0
    for label, size in zip(TERCILE_LABELS, sizes):
        for i in order[start:start + size]:
            assignments[records[i].record_id] = label
        start += size
    score_map = {rec.record_id: s for rec, s in zip(records, scores)}
    return DifficultyPartition(labels=TERCILE_LABELS, assignments=assignments, scheme=None, scores=score_map)


@dataclass(frozen=True)
class RuleAnnotation:
    record_id: str
    rules: Tuple[int, ...]

    def __post_init__(self):
        if not self.rules:
            raise ValueError(f"annotation for '{self.record_id}' has no rules")
        bad = [r for r in self.rules if r not in RULE_IDS]
        if bad:
            raise ValueError(f"rule ids must be in 1..7, got {bad}")


def load_annotations(path) -> List[RuleAnnotation]:
    annotations: List[RuleAnnotation] = []
    with open(Path(path), 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(str(e), line=line_no) from e
            for name in ("record_id", "rules"):
                if name not in obj:
                    raise SchemaError(f"missing field '{name}'", line=line_no, field=name)
            try:
                annotations.append(RuleAnnotation(str(obj["record_id"]), tuple(int(r) for r in obj["rules"])))
            except (TypeError, ValueError) as e:
                raise SchemaError(str(e), line=line_no, field="rules") from e
    return annotations


def rule_frequency(annotations: Sequence[RuleAnnotation],
                   partition: DifficultyPartition) -> Dict[str, Dict[str, Dict[int, float]]]:
    """
    Sum rule usage per class

    Returns:
        ``{label: {"counts": {rule: n}, "distribution": {rule: p}}}`` for every
        class of the partition, rules 1..7 always present
    """
    counts = {label: Counter() for label in partition.labels}
    for annotation in annotations:
        label = partition.label_of(annotation.record_id)
        counts[label].update(annotation.rules)

    result: Dict[str, Dict[str, Dict[int, float]]] = {}
    for label in partition.labels:
        total = sum(counts[label].values())
        result[label] = {
            "counts": {rule: counts[label].get(rule, 0) for rule in RULE_IDS},
            "distribution": {rule: (counts[label].get(rule, 0) / total if total else 0.0) for rule in RULE_IDS},
        }
    return result


def class_statistics(records: Sequence[UtteranceRecord], partition: DifficultyPartition) -> pd.DataFrame:
    """Per-class count, proportion, mean |q|, mean |q'| and mean score"""
    rows = []
    for rec in records:
        rows.append({
            "class": partition.label_of(rec.record_id),
            "len_q": len(rec.question),
            "len_rewrite": len(rec.rewrite),
            "z": partition.scores.get(rec.record_id, float("nan")),
        })
    frame = pd.DataFrame(rows, columns=["class", "len_q", "len_rewrite", "z"])
    stats = frame.groupby("class").agg(
        count=("len_q", "size"),
        mean_len_q=("len_q", "mean"),
        mean_len_rewrite=("len_rewrite", "mean"),
        mean_z=("z", "mean"),
    )
    stats = stats.reindex(list(partition.labels))
    stats["count"] = stats["count"].fillna(0).astype(int)
    stats["proportion"] = stats["count"] / max(len(records), 1)
    return stats


def partition_from_labels(records: Sequence[UtteranceRecord], labels: Mapping[str, str],
                          order: Sequence[str]) -> DifficultyPartition:
    _require_unique_ids(records)
    assignments = {}
    for rec in records:
        if rec.record_id not in labels:
            raise UnknownRecord(f"record '{rec.record_id}' has no label", record_id=rec.record_id)
        assignments[rec.record_id] = labels[rec.record_id]
    return DifficultyPartition(labels=tuple(order), assignments=assignments)
