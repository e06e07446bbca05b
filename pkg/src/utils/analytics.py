"""
Gradus QR v1.0 - Analytics Utilities
Score-table statistics shared by the experiment drivers and the report generator
"""

from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from src.core.corpus import IntervalScheme


def get_class_distribution(labels: Sequence[str], order: Sequence[str]) -> Dict[str, int]:
    """Count of records per class, every class present"""
    counts = pd.Series(list(labels), dtype=object).value_counts()
    return {label: int(counts.get(label, 0)) for label in order}


def rank_correlation(x: Sequence[float], y: Sequence[float]) -> Optional[float]:
    """Spearman correlation as the Pearson correlation of average ranks; None when undefined"""
    if len(x) != len(y) or len(x) < 2:
        return None
    xs, ys = pd.Series(list(x), dtype=float), pd.Series(list(y), dtype=float)
    value = xs.rank().corr(ys.rank())
    return None if pd.isna(value) else float(value)


def per_class_means(frame: pd.DataFrame, labels: Sequence[str], value: str = "bleu") -> Dict[str, Optional[float]]:
    """Mean of ``value`` per class; classes without rows map to None"""
    means = frame.groupby("class")[value].mean() if len(frame) else pd.Series(dtype=float)
    return {label: (float(means[label]) if label in means.index else None) for label in labels}


def binned_means(z: Sequence[float], values: Sequence[float], scheme: IntervalScheme) -> List[Dict]:
    """Mean value per scheme interval, ``None`` for bins without records"""
    frame = pd.DataFrame({"z": list(z), "value": list(values)})
    frame["bin"] = [scheme.classify(float(score)) for score in frame["z"]] if len(frame) else []
    grouped = frame.groupby("bin")["value"].agg(["mean", "size"]) if len(frame) else pd.DataFrame()
    rows = []
    for index, interval in enumerate(scheme.intervals):
        present = interval.label in grouped.index
        rows.append({
            "bin": index,
            "label": interval.label,
            "lower": interval.lower,
            "upper": interval.upper,
            "count": int(grouped.loc[interval.label, "size"]) if present else 0,
            "bleu": float(grouped.loc[interval.label, "mean"]) if present else None,
        })
    return rows


def paired_bootstrap(scores_a: Sequence[float], scores_b: Sequence[float], n_resamples: int = 1000,
                     seed: int = 17) -> Dict[str, float]:
    """
    Paired bootstrap test of mean(a) > mean(b)

    Returns:
        Observed mean difference, the share of resamples where system a does
        not beat b (one-sided p-value) and the 95% interval of the difference
    """
    a = np.asarray(scores_a, dtype=float)
    b = np.asarray(scores_b, dtype=float)
    if a.shape != b.shape or a.size == 0:
        raise ValueError("paired bootstrap needs two equal-length, non-empty score lists")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, a.size, size=(n_resamples, a.size))
    diffs = a[idx].mean(axis=1) - b[idx].mean(axis=1)
    return {
        "delta": float(a.mean() - b.mean()),
        "p_value": float(np.mean(diffs <= 0.0)),
        "ci_low": float(np.percentile(diffs, 2.5)),
        "ci_high": float(np.percentile(diffs, 97.5)),
        "n_resamples": n_resamples,
    }


def mean_and_std(frame: pd.DataFrame, by: Sequence[str], value: str) -> pd.DataFrame:
    """Mean and sample standard deviation of ``value`` across repeated runs"""
    stats = frame.groupby(list(by))[value].agg(["mean", "std", "count"]).reset_index()
    stats["std"] = stats["std"].fillna(0.0)
    return stats


def trend_arrow(values: Sequence[Optional[float]]) -> str:
    """Up when the sequence never decreases, down when it never increases, otherwise mixed"""
    present = [v for v in values if v is not None]
    if len(present) < 2:
        return "-"
    steps = np.diff(present)
    if np.all(steps >= 0):
        return "↑"
    if np.all(steps <= 0):
        return "↓"
    return "↕"
