"""
Gradus QR v1.0 - Test Fixtures
Shared corpora and tiny model configurations
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from src.core.corpus import make_record  # noqa: E402
from src.core.seqmodel import ModelConfig, vocabulary_from_records  # noqa: E402


@pytest.fixture
def awards_record():
    return make_record(
        question="did he win any awards ?",
        rewrite="did robert fripp win any awards ?",
        history=["who is robert fripp ?", "robert fripp is a guitarist ."],
        dialogue_id="quac-1",
        turn_index=2,
    )


@pytest.fixture
def tiny_records():
    rows = [
        ("did he win any awards ?", "did robert fripp win any awards ?", "easy"),
        ("where was she born ?", "where was anna novak born ?", "easy"),
        ("what was the reaction to the album ?", "what was the reaction to the album in 1974 by robert fripp ?",
         "medium"),
        ("what happened during the tour ?", "what happened during the tour of anna novak ?", "medium"),
        ("why ?", "why did robert fripp leave the tour after the storm ?", "hard"),
        ("are there other aspects ?", "are there other aspects of the album of anna novak besides the fire ?", "hard"),
    ]
    return [
        make_record(q, r, ["who is robert fripp ?", "anna novak is a singer ."], dialogue_id=f"t{i}",
                    turn_index=2, class_label=label)
        for i, (q, r, label) in enumerate(rows)
    ]


@pytest.fixture
def tiny_vocab(tiny_records):
    return vocabulary_from_records(tiny_records)


@pytest.fixture
def tiny_config(tiny_vocab):
    return ModelConfig(vocab_size=len(tiny_vocab), d_model=8, n_heads=2, n_enc_layers=1, n_dec_layers=1,
                       ffn_dim=16, adapter_bottleneck=4, max_seq_len=32)
