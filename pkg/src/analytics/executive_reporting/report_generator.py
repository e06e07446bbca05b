"""
Gradus QR v1.0 - Experiment Reporting
Builds the run report from record-level score files only

Report sections:
1. Per-class BLEU table for every evaluated system
2. Ten-bin difficulty curve with rank correlation
3. Train-class x test-class heatmap
4. Distillation weight sweep
5. Adapter parameter accounting
6. Paired bootstrap significance against the shared model
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pandas as pd

from src.core.corpus import ten_bin_scheme
from src.core.seqmodel import ModelConfig, base_param_count, count_adapter_params, param_ratio
from src.utils.analytics import (
    binned_means,
    get_class_distribution,
    paired_bootstrap,
    per_class_means,
    rank_correlation,
)
from src.utils.config import Config
from src.utils.data_loader import ScoreFileLoader, read_json, write_json

logger = logging.getLogger(__name__)

SHARED_SYSTEM = "S"
REFERENCE_SCALE = {"d_model": 768, "n_layers": 6, "bottlenecks": (384, 256, 64)}
# full-size encoder-decoder parameter count consistent with the published adapter ratios
REFERENCE_BASE_PARAMS = 139_420_416


def ten_bin_eval(rows: Sequence[Dict[str, Any]]) -> Dict[str, Any]:
    """
    Mean rewrite BLEU per tenth of the difficulty score

    Args:
        rows: Record-level scores carrying ``z`` and ``bleu``

    Returns:
        ``{"bins": [...], "spearman": float or None}``; empty bins have bleu None
    """
    usable = [r for r in rows if r.get("z") is not None]
    bins = binned_means([r["z"] for r in usable], [r["bleu"] for r in usable], ten_bin_scheme())
    populated = [b for b in bins if b["bleu"] is not None]
    spearman = rank_correlation([b["bin"] for b in populated], [b["bleu"] for b in populated])
    return {"bins": bins, "spearman": spearman}


def parameter_table(model: Optional[ModelConfig]) -> List[Dict[str, Any]]:
    """Adapter parameter counts for the run's model and for the full-size reference setting"""
    rows = []
    if model is not None:
        base = base_param_count(model)
        rows.append({
            "setting": "run", "d_model": model.d_model, "bottleneck": model.adapter_bottleneck,
            "adapters": 2 * model.n_enc_layers + 3 * model.n_dec_layers,
            "adapter_params": count_adapter_params(model), "base_params": base,
            "ratio": param_ratio(model, base),
        })
    for b in REFERENCE_SCALE["bottlenecks"]:
        ref = ModelConfig(vocab_size=50265, d_model=REFERENCE_SCALE["d_model"], n_heads=12,
                          n_enc_layers=REFERENCE_SCALE["n_layers"], n_dec_layers=REFERENCE_SCALE["n_layers"],
                          ffn_dim=3072, adapter_bottleneck=b, max_seq_len=1024)
        rows.append({
            "setting": f"reference_b{b}", "d_model": ref.d_model, "bottleneck": b,
            "adapters": 2 * ref.n_enc_layers + 3 * ref.n_dec_layers,
            "adapter_params": count_adapter_params(ref), "base_params": REFERENCE_BASE_PARAMS,
            "ratio": param_ratio(ref, REFERENCE_BASE_PARAMS),
        })
    return rows


@dataclass
class ExperimentReport:
    labels: List[str]
    per_class: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    ten_bin: Dict[str, Any] = field(default_factory=dict)
    heatmap: Optional[Dict[str, Any]] = None
    gamma_curve: Optional[List[Dict[str, Any]]] = None
    parameters: List[Dict[str, Any]] = field(default_factory=list)
    significance: Dict[str, Dict[str, float]] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "layout_version": Config.RUN_LAYOUT_VERSION,
            "labels": self.labels,
            "per_class": self.per_class,
            "ten_bin": self.ten_bin,
            "heatmap": self.heatmap,
            "gamma_curve": self.gamma_curve,
            "parameters": self.parameters,
            "significance": self.significance,
            "metadata": self.metadata,
        }

    def per_class_frame(self) -> pd.DataFrame:
        rows = []
        for system, entry in self.per_class.items():
            row = {"system": system, **{f"bleu_{label}": entry["per_class"].get(label) for label in self.labels}}
            row.update({"mean_over_classes": entry["mean_over_classes"], "overall": entry["overall"],
                        "rouge1": entry["rouge1"], "rouge2": entry["rouge2"], "rougeL": entry["rougeL"]})
            rows.append(row)
        return pd.DataFrame(rows)

    def write(self, report_dir) -> Path:
        """report.json plus one CSV per table"""
        report_dir = Path(report_dir)
        report_dir.mkdir(parents=True, exist_ok=True)
        path = report_dir / "report.json"
        write_json(path, self.to_dict())
        self.per_class_frame().to_csv(report_dir / "per_class.csv", index=False)
        pd.DataFrame(self.ten_bin.get("bins", [])).to_csv(report_dir / "ten_bin.csv", index=False)
        pd.DataFrame(self.parameters).to_csv(report_dir / "parameters.csv", index=False)
        if self.heatmap is not None:
            frame = pd.DataFrame(self.heatmap["matrix"], index=self.heatmap["labels"], columns=self.heatmap["labels"])
            frame.to_csv(report_dir / "heatmap.csv", index_label="train_class")
        if self.gamma_curve is not None:
            pd.DataFrame(self.gamma_curve).to_csv(report_dir / "gamma.csv", index=False)
        logger.info(f"📊 Report written to {path}")
        return path


class ReportGenerator:
    """Assemble an ExperimentReport from a run directory"""

    def __init__(self, run_dir):
        self.run_dir = Path(run_dir)
        self.scores_dir = self.run_dir / Config.SCORES_DIR
        self.metadata = self._load_metadata()
        self.labels = list(self.metadata.get("labels", []))

    def _load_metadata(self) -> Dict[str, Any]:
        path = self.run_dir / Config.CONFIG_DIR / "run.json"
        return read_json(path) if path.exists() else {}

    def _system_entry(self, frame: pd.DataFrame) -> Dict[str, Any]:
        per_class = per_class_means(frame, self.labels)
        present = [v for v in per_class.values() if v is not None]
        return {
            "per_class": per_class,
            "mean_over_classes": float(sum(present) / len(present)) if present else None,
            "overall": float(frame["bleu"].mean()) if len(frame) else 0.0,
            "rouge1": float(frame["rouge1"].mean()) if "rouge1" in frame and len(frame) else None,
            "rouge2": float(frame["rouge2"].mean()) if "rouge2" in frame and len(frame) else None,
            "rougeL": float(frame["rougeL"].mean()) if "rougeL" in frame and len(frame) else None,
            "records": int(len(frame)),
            "class_counts": get_class_distribution(frame["class"] if "class" in frame else [], self.labels),
        }

    def system_frames(self) -> Dict[str, pd.DataFrame]:
        loader = ScoreFileLoader(self.scores_dir / "systems")
        return {system: pd.DataFrame(loader.read(system)) for system in loader.systems()}

    def heatmap_section(self) -> Optional[Dict[str, Any]]:
        meta_path = self.run_dir / Config.CONFIG_DIR / "heatmap.json"
        if not meta_path.exists():
            return None
        meta = read_json(meta_path)
        loader = ScoreFileLoader(self.scores_dir / "heatmap")
        labels = meta["labels"]
        matrix = []
        for train_label in labels:
            frame = pd.DataFrame(loader.read(f"train-{train_label}"))
            means = per_class_means(frame, labels)
            matrix.append([means[label] for label in labels])
        return {"labels": labels, "scheme": meta.get("scheme"), "matrix": matrix}

    def gamma_section(self) -> Optional[List[Dict[str, Any]]]:
        meta_path = self.run_dir / Config.CONFIG_DIR / "gamma.json"
        if not meta_path.exists():
            return None
        loader = ScoreFileLoader(self.scores_dir / "gamma")
        curve = []
        for gamma in read_json(meta_path)["gammas"]:
            frame = pd.DataFrame(loader.read(f"gamma-{gamma}"))
            entry = self._system_entry(frame)
            curve.append({"gamma": gamma, "bleu": entry["overall"], "mean_over_classes": entry["mean_over_classes"]})
        return curve

    def significance(self, frames: Dict[str, pd.DataFrame], seed: int) -> Dict[str, Dict[str, float]]:
        if SHARED_SYSTEM not in frames:
            return {}
        reference = frames[SHARED_SYSTEM].set_index("record_id")["bleu"]
        results = {}
        for system, frame in frames.items():
            if system == SHARED_SYSTEM:
                continue
            aligned = frame.set_index("record_id")["bleu"].reindex(reference.index)
            if aligned.isna().any():
                continue
            results[system] = paired_bootstrap(aligned.tolist(), reference.tolist(), seed=seed)
        return results

    def build(self) -> ExperimentReport:
        frames = self.system_frames()
        model_cfg = self.metadata.get("model")
        report = ExperimentReport(
            labels=self.labels,
            per_class={system: self._system_entry(frame) for system, frame in frames.items()},
            heatmap=self.heatmap_section(),
            gamma_curve=self.gamma_section(),
            parameters=parameter_table(ModelConfig.from_dict(model_cfg) if model_cfg else None),
            significance=self.significance(frames, int(self.metadata.get("seed", 17))),
            metadata={k: v for k, v in self.metadata.items() if k != "labels"},
        )
        if SHARED_SYSTEM in frames:
            report.ten_bin = ten_bin_eval(frames[SHARED_SYSTEM].to_dict("records"))
        logger.info(f"📊 Report built for {len(frames)} systems")
        return report


def generate_report(run_dir) -> Path:
    report = ReportGenerator(run_dir).build()
    return report.write(Path(run_dir) / Config.REPORT_DIR)
