"""
Gradus QR v1.0 - Text Metrics
Tokenization and sentence-level BLEU / ROUGE used for difficulty scoring and evaluation
"""

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core.exceptions import ConfigError, EmptyText, InvalidOrder

TokenSeq = List[str]

PUNCTUATION = set(".,?!'\"")

SMOOTHING_NONE = "none"
SMOOTHING_EXPONENTIAL = "exponential"


@dataclass(frozen=True)
class BleuConfig:
    max_n: int = 4
    smoothing: str = SMOOTHING_EXPONENTIAL
    brevity_penalty: bool = True

    def __post_init__(self):
        if not 1 <= self.max_n <= 8:
            raise ConfigError(f"max_n must be in [1, 8], got {self.max_n}", max_n=self.max_n)
        if self.smoothing not in (SMOOTHING_NONE, SMOOTHING_EXPONENTIAL):
            raise ConfigError(f"unknown smoothing '{self.smoothing}'", smoothing=self.smoothing)


@dataclass(frozen=True)
class MetricScore:
    value: float
    metric_name: str
    precisions: Optional[Tuple[float, ...]] = None
    brevity_penalty: Optional[float] = None
    extras: Dict[str, float] = field(default_factory=dict)

    def __float__(self) -> float:
        return self.value


def _split_punctuation(word: str) -> List[str]:
    # peel leading and trailing punctuation characters off as separate tokens
    leading: List[str] = []
    trailing: List[str] = []
    while word and word[0] in PUNCTUATION and len(word) > 1:
        leading.append(word[0])
        word = word[1:]
    while word and word[-1] in PUNCTUATION and len(word) > 1:
        trailing.append(word[-1])
        word = word[:-1]
    return leading + [word] + trailing[::-1]


def tokenize(text: str) -> TokenSeq:
    """Lowercase, split on whitespace and detach attached punctuation"""
    if text is None or not text.strip():
        raise EmptyText("text is empty after trimming")
    tokens: TokenSeq = []
    for word in text.lower().split():
        tokens.extend(_split_punctuation(word))
    return tokens


def _require_tokens(*seqs: Sequence[str]) -> None:
    for seq in seqs:
        if seq is None or len(seq) == 0:
            raise EmptyText("token sequence is empty")


def ngram_counts(seq: Sequence[str], n: int) -> Counter:
    """Multiset of contiguous n-grams (tuples) with multiplicities"""
    if n < 1:
        raise InvalidOrder(f"n-gram order must be >= 1, got {n}", n=n)
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def _clipped_matches(hyp: Sequence[str], ref: Sequence[str], n: int) -> Tuple[int, int, int]:
    hyp_counts = ngram_counts(hyp, n)
    ref_counts = ngram_counts(ref, n)
    matches = sum(min(count, ref_counts[gram]) for gram, count in hyp_counts.items())
    return matches, sum(hyp_counts.values()), sum(ref_counts.values())


def sentence_bleu(hyp: Sequence[str], ref: Sequence[str], cfg: BleuConfig = BleuConfig()) -> MetricScore:
    """
    Sentence-level BLEU of ``hyp`` against a single reference

    Clipped n-gram precisions are combined by geometric mean and multiplied by
    the brevity penalty. With exponential smoothing the k-th zero-count
    precision becomes 1 / (2^k * denominator).
    """
    _require_tokens(hyp, ref)
    if list(hyp) == list(ref):
        # orders longer than the sentence are vacuously matched
        return MetricScore(value=1.0, metric_name="bleu", precisions=(1.0,) * cfg.max_n, brevity_penalty=1.0)

    precisions: List[float] = []
    zero_seen = 0
    annihilated = False
    for n in range(1, cfg.max_n + 1):
        matches, denom, _ = _clipped_matches(hyp, ref, n)
        denom = max(denom, 1)
        if matches > 0:
            precisions.append(matches / denom)
        elif cfg.smoothing == SMOOTHING_EXPONENTIAL:
            zero_seen += 1
            precisions.append(1.0 / (2 ** zero_seen * denom))
        else:
            precisions.append(0.0)
            annihilated = True

    bp = 1.0
    if cfg.brevity_penalty:
        bp = min(1.0, math.exp(1.0 - len(ref) / len(hyp)))

    if annihilated:
        value = 0.0
    else:
        value = bp * math.exp(sum(math.log(p) for p in precisions) / cfg.max_n)
    value = min(1.0, max(0.0, value))
    return MetricScore(value=value, metric_name="bleu", precisions=tuple(precisions), brevity_penalty=bp)


def _f_measure(overlap: float, hyp_total: int, ref_total: int) -> Tuple[float, float, float]:
    precision = overlap / hyp_total if hyp_total else 0.0
    recall = overlap / ref_total if ref_total else 0.0
    if precision + recall == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def rouge_n(hyp: Sequence[str], ref: Sequence[str], n: int = 1) -> MetricScore:
    """ROUGE-N F1 from clipped n-gram matches"""
    _require_tokens(hyp, ref)
    matches, hyp_total, ref_total = _clipped_matches(hyp, ref, n)
    p, r, f = _f_measure(matches, hyp_total, ref_total)
    return MetricScore(value=f, metric_name=f"rouge{n}", extras={"precision": p, "recall": r})


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Longest common subsequence length by row-wise dynamic programming"""
    if not a or not b:
        return 0
    prev = np.zeros(len(b) + 1, dtype=np.int64)
    for token in a:
        curr = np.zeros_like(prev)
        for j, other in enumerate(b, start=1):
            if token == other:
                curr[j] = prev[j - 1] + 1
            else:
                curr[j] = max(prev[j], curr[j - 1])
        prev = curr
    return int(prev[-1])


def rouge_l(hyp: Sequence[str], ref: Sequence[str]) -> MetricScore:
    """ROUGE-L F1 with P = LCS/|hyp| and R = LCS/|ref|"""
    _require_tokens(hyp, ref)
    lcs = lcs_length(hyp, ref)
    p, r, f = _f_measure(lcs, len(hyp), len(ref))
    return MetricScore(value=f, metric_name="rougeL", extras={"precision": p, "recall": r, "lcs": float(lcs)})


def corpus_rouge(hyps: Sequence[Sequence[str]], refs: Sequence[Sequence[str]]) -> Dict[str, float]:
    """Mean ROUGE-1/2/L over aligned pairs; empty hypotheses score zero"""
    if len(hyps) != len(refs):
        raise ValueError(f"got {len(hyps)} hypotheses for {len(refs)} references")
    totals = {"rouge1": 0.0, "rouge2": 0.0, "rougeL": 0.0}
    if not hyps:
        return totals
    for hyp, ref in zip(hyps, refs):
        if not hyp:
            continue
        totals["rouge1"] += rouge_n(hyp, ref, 1).value
        totals["rouge2"] += rouge_n(hyp, ref, 2).value
        totals["rougeL"] += rouge_l(hyp, ref).value
    return {name: total / len(hyps) for name, total in totals.items()}
