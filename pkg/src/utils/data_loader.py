"""
Gradus QR v1.0 - Data Loading Utilities
Line-delimited JSON I/O for corpora, score files and event logs
"""

import json
from pathlib import Path
from typing import Any, Dict, Iterable, List

from src.core.exceptions import ParseError, SchemaError


def read_jsonl(path) -> List[Dict[str, Any]]:
    """Read every non-blank line of a JSONL file"""
    rows: List[Dict[str, Any]] = []
    with open(Path(path), 'r', encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ParseError(str(e), line=line_no) from e
    return rows


def write_jsonl(path, rows: Iterable[Dict[str, Any]]) -> int:
    """Write rows with sorted keys so equal content gives equal bytes"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, 'w', encoding='utf-8') as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")
            count += 1
    return count


def append_jsonl(path, row: Dict[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'a', encoding='utf-8') as f:
        f.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def write_json(path, payload: Dict[str, Any]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")


def read_json(path) -> Dict[str, Any]:
    with open(Path(path), 'r', encoding='utf-8') as f:
        return json.load(f)


class ScoreFileLoader:
    """Record-level score files: one ``{record_id, z, class, bleu, output_tokens}`` object per line"""

    def __init__(self, scores_dir):
        self.scores_dir = Path(scores_dir)

    def path_for(self, system: str) -> Path:
        return self.scores_dir / f"{system}.jsonl"

    def write(self, system: str, rows: Iterable[Dict[str, Any]]) -> Path:
        path = self.path_for(system)
        write_jsonl(path, rows)
        return path

    def read(self, system: str) -> List[Dict[str, Any]]:
        return load_score_file(self.path_for(system))

    def systems(self) -> List[str]:
        if not self.scores_dir.exists():
            return []
        return sorted(p.stem for p in self.scores_dir.glob("*.jsonl"))


def load_score_file(path) -> List[Dict[str, Any]]:
    rows = read_jsonl(path)
    for line_no, row in enumerate(rows, start=1):
        for name in ("record_id", "bleu"):
            if name not in row:
                raise SchemaError(f"missing field '{name}'", line=line_no, field=name)
    return rows
