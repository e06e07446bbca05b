"""
Gradus QR v1.0 - Real Corpus Check
Class proportions of the CANARD training split under the default scheme
"""

import os

import pytest

from src.core.corpus import DEFAULT_SCHEME, partition, score_corpus
from src.data_processing.extractors.corpus_converter import convert_canard

PUBLISHED = {"hard": 0.3236, "medium": 0.3345, "easy": 0.3420}


@pytest.mark.network
@pytest.mark.skipif(not os.getenv("CANARD_TRAIN_PATH"), reason="CANARD_TRAIN_PATH not set")
def test_default_scheme_matches_published_proportions():
    records = convert_canard(os.environ["CANARD_TRAIN_PATH"])
    proportions = partition(records, score_corpus(records), DEFAULT_SCHEME).proportions()
    for label, expected in PUBLISHED.items():
        assert abs(proportions[label] - expected) <= 0.015, (label, proportions[label])
