"""
Gradus QR v1.0 - Synthetic Rewriting Corpus
Seeded dialogues whose rewrites follow one edit recipe per difficulty class

Recipes:
- easy: the single pronoun of the question is replaced by the entity named in the history
- medium: a prepositional phrase taken from the history is inserted before the question mark
- hard: a full clause assembled from several history turns is appended to a terse question
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from src.core.corpus import DEFAULT_SCHEME, UtteranceRecord, difficulty_score, make_record, save_corpus
from src.core.exceptions import ConfigError

logger = logging.getLogger(__name__)

FIRST_NAMES = (
    "robert", "maria", "james", "anna", "david", "laura", "peter", "julia", "thomas", "sofia",
    "daniel", "clara", "victor", "helen", "oscar", "irene", "martin", "nora", "felix", "alice",
)
LAST_NAMES = (
    "fripp", "walker", "moreno", "larsen", "okafor", "brandt", "silva", "novak", "kimura", "dubois",
    "hughes", "romano", "petrov", "castillo", "lindqvist", "murray", "santos", "keller", "osei", "varga",
)
ROLES = ("guitarist", "singer", "painter", "novelist", "director", "senator", "chemist", "pianist",
         "architect", "journalist")
PLACES = ("dorset", "lisbon", "ohio", "lagos", "kyoto", "bergen", "quebec", "naples", "warsaw", "cusco")
AWARDS = ("awards", "prizes", "medals", "honors", "titles", "grants")
WIN_VERBS = ("win", "receive", "earn", "collect")
EVENTS = ("album", "tour", "exhibition", "campaign", "lawsuit", "merger", "festival", "debut",
          "retirement", "scandal")
ACTIONS = ("cancel", "leave", "postpone", "sell", "abandon", "rename")
CAUSES = ("injury", "dispute", "storm", "strike", "illness", "recession", "protest", "fire")
YEARS = tuple(str(y) for y in range(1960, 2020))

CLASS_LABELS = ("hard", "medium", "easy")
SPLITS = ("train", "valid", "test")
MIN_PER_CLASS = 30
MAX_ATTEMPTS = 50


@dataclass
class SyntheticSpec:
    seed: int = 17
    n_entities: int = 20
    n_fillers: int = 10
    counts: Dict[str, int] = field(default_factory=lambda: {"train": 600, "valid": 100, "test": 200})

    def __post_init__(self):
        for split in SPLITS:
            if self.counts.get(split, 0) < MIN_PER_CLASS:
                raise ConfigError(f"need >= {MIN_PER_CLASS} records per class in '{split}', "
                                  f"got {self.counts.get(split, 0)}", split=split)
        if not 1 <= self.n_entities <= len(FIRST_NAMES):
            raise ConfigError(f"n_entities must be in [1, {len(FIRST_NAMES)}]")
        if not 1 <= self.n_fillers <= len(EVENTS):
            raise ConfigError(f"n_fillers must be in [1, {len(EVENTS)}]")


class SyntheticCorpusGenerator:
    """Draw dialogues recipe by recipe and keep those whose score lands in the recipe's class"""

    def __init__(self, spec: SyntheticSpec):
        self.spec = spec
        self.rng = np.random.default_rng(spec.seed)
        self.stats = {"generated": 0, "resampled": 0}

    def _pick(self, options: Tuple[str, ...], limit: int = None) -> str:
        pool = options[:limit] if limit else options
        return pool[int(self.rng.integers(len(pool)))]

    def _entity(self) -> Tuple[str, str]:
        return self._pick(FIRST_NAMES, self.spec.n_entities), self._pick(LAST_NAMES, self.spec.n_entities)

    def _intro(self, name: str) -> List[str]:
        return [f"who is {name} ?",
                f"{name} is a {self._pick(ROLES, self.spec.n_fillers)} from {self._pick(PLACES, self.spec.n_fillers)} ."]

    def _easy(self, name: str) -> Tuple[List[str], str, str]:
        history = self._intro(name)
        pronoun = self._pick(("he", "she"))
        template = int(self.rng.integers(3))
        if template == 0:
            verb, prize = self._pick(WIN_VERBS), self._pick(AWARDS)
            return history, f"did {pronoun} {verb} any {prize} ?", f"did {name} {verb} any {prize} ?"
        if template == 1:
            return history, f"where was {pronoun} born ?", f"where was {name} born ?"
        year = self._pick(YEARS)
        return history, f"what did {pronoun} do in {year} ?", f"what did {name} do in {year} ?"

    def _medium(self, name: str) -> Tuple[List[str], str, str]:
        event, year = self._pick(EVENTS, self.spec.n_fillers), self._pick(YEARS)
        history = self._intro(name) + [f"the {event} by {name} came out in {year} ."]
        if int(self.rng.integers(2)) == 0:
            return (history, f"what was the reaction to the {event} ?",
                    f"what was the reaction to the {event} in {year} by {name} ?")
        return history, f"what happened during the {event} ?", f"what happened during the {event} of {name} ?"

    def _hard(self, name: str) -> Tuple[List[str], str, str]:
        event = self._pick(EVENTS, self.spec.n_fillers)
        action, cause = self._pick(ACTIONS), self._pick(CAUSES)
        history = self._intro(name) + [
            f"{name} had to {action} the {event} .",
            f"it happened after the {cause} .",
        ]
        if int(self.rng.integers(2)) == 0:
            return history, "why ?", f"why did {name} {action} the {event} after the {cause} ?"
        return (history, "are there other aspects ?",
                f"are there other aspects of the {event} of {name} besides the {cause} ?")

    def _draw(self, label: str, split: str, index: int) -> UtteranceRecord:
        recipe = {"easy": self._easy, "medium": self._medium, "hard": self._hard}[label]
        for _ in range(MAX_ATTEMPTS):
            first, last = self._entity()
            history, question, rewrite = recipe(f"{first} {last}")
            rec = make_record(question, rewrite, history, dialogue_id=f"syn-{split}-{label}-{index:05d}",
                              turn_index=len(history), class_label=label)
            if DEFAULT_SCHEME.classify(difficulty_score(rec, apply_pronoun_rule=True)) == label:
                return rec
            self.stats["resampled"] += 1
        raise ConfigError(f"recipe '{label}' could not produce a record in its class", label=label)

    def generate(self) -> Dict[str, List[UtteranceRecord]]:
        corpora: Dict[str, List[UtteranceRecord]] = {}
        for split in SPLITS:
            records = [self._draw(label, split, i) for label in CLASS_LABELS for i in range(self.spec.counts[split])]
            order = self.rng.permutation(len(records))
            corpora[split] = [records[i] for i in order]
            self.stats["generated"] += len(records)
        logger.info(f"✅ Generated {self.stats['generated']} synthetic records "
                    f"({self.stats['resampled']} resampled)")
        return corpora


def gen_synthetic(spec: SyntheticSpec) -> Dict[str, List[UtteranceRecord]]:
    """Train/valid/test corpora with gold class labels, deterministic in ``spec.seed``"""
    return SyntheticCorpusGenerator(spec).generate()


def write_synthetic(spec: SyntheticSpec, out_dir) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {}
    for split, records in gen_synthetic(spec).items():
        paths[split] = out_dir / f"{split}.jsonl"
        save_corpus(records, paths[split])
    return paths
