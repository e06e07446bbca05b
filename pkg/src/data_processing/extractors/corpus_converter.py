#!/usr/bin/env python3
"""
Gradus QR v1.0 - Public Corpus Conversion
Map the CANARD and QReCC releases into the line-delimited corpus format

CANARD rows: History, Question, Rewrite, QuAC_dialog_id, Question_no
QReCC rows:  Context, Question, Rewrite, Conversation_no, Turn_no
"""

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from src.core.corpus import UtteranceRecord, make_record, save_corpus
from src.core.exceptions import EmptyText, ParseError, SchemaError

logger = logging.getLogger(__name__)

CANARD_FIELDS = ("History", "Question", "Rewrite", "QuAC_dialog_id", "Question_no")
QRECC_FIELDS = ("Context", "Question", "Rewrite", "Conversation_no", "Turn_no")


class CorpusConverter:
    """Convert a released JSON array into UtteranceRecords, skipping unusable rows"""

    def __init__(self, source: str):
        if source not in ("canard", "qrecc"):
            raise ValueError(f"unknown corpus source '{source}'")
        self.source = source
        self.fields = CANARD_FIELDS if source == "canard" else QRECC_FIELDS
        self.stats = {"rows": 0, "converted": 0, "skipped_empty": 0}

    def _load_rows(self, path: Path) -> List[Dict[str, Any]]:
        with open(path, 'r', encoding='utf-8') as f:
            try:
                rows = json.load(f)
            except json.JSONDecodeError as e:
                raise ParseError(str(e), line=e.lineno) from e
        if not isinstance(rows, list):
            raise ParseError("expected a JSON array of rows", line=1)
        return rows

    def _convert_row(self, row: Dict[str, Any], index: int) -> Optional[UtteranceRecord]:
        for name in self.fields:
            if name not in row:
                raise SchemaError(f"row {index} is missing '{name}'", line=index + 1, field=name)
        if self.source == "canard":
            history, dialogue, turn = row["History"], row["QuAC_dialog_id"], int(row["Question_no"]) - 1
        else:
            history, dialogue, turn = row["Context"], row["Conversation_no"], int(row["Turn_no"]) - 1
        try:
            return make_record(
                question=row["Question"],
                rewrite=row["Rewrite"],
                history=history or [],
                dialogue_id=str(dialogue),
                turn_index=max(turn, 0),
            )
        except (EmptyText, ValueError):
            self.stats["skipped_empty"] += 1
            return None

    def convert(self, path) -> List[UtteranceRecord]:
        rows = self._load_rows(Path(path))
        records: List[UtteranceRecord] = []
        for index, row in enumerate(rows):
            self.stats["rows"] += 1
            rec = self._convert_row(row, index)
            if rec is not None:
                records.append(rec)
        self.stats["converted"] = len(records)
        if self.stats["skipped_empty"]:
            logger.warning(f"⚠️ Skipped {self.stats['skipped_empty']} {self.source} rows with empty text")
        logger.info(f"✅ Converted {len(records)}/{self.stats['rows']} {self.source} rows from {path}")
        return records


def convert_canard(path) -> List[UtteranceRecord]:
    return CorpusConverter("canard").convert(path)


def convert_qrecc(path) -> List[UtteranceRecord]:
    return CorpusConverter("qrecc").convert(path)


def convert_file(source: str, in_path, out_path) -> Dict[str, int]:
    """Convert and write the corpus JSONL; returns conversion statistics"""
    converter = CorpusConverter(source)
    save_corpus(converter.convert(in_path), out_path)
    return dict(converter.stats)
