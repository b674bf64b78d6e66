"""Frame-level ROC-AUC, average precision and per-class breakdowns.

Tied scores get half credit in AUC (Mann-Whitney). AP sweeps distinct
score thresholds from high to low with step interpolation; tied scores
enter together at a single threshold, so a constant score gives AP equal
to the positive prevalence.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

NORMAL_CLASS_NAMES = (None, "", "Normal", "normal")


@dataclass
class EvalReport:
    auc: float
    ap: float
    n_pos: int
    n_neg: int
    per_class: dict[str, float] = field(default_factory=dict)
    sweep_rows: Optional[list[dict]] = None

    def to_json(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=1, sort_keys=True)


def _check(scores, labels):
    s = np.asarray(scores, np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    return s, y.astype(np.int64)


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their mean rank."""
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    before = np.concatenate([[0], np.cumsum(counts)[:-1]])
    return (before + (counts + 1) / 2.0)[inverse]


def roc_auc(scores, labels) -> float:
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both classes")
    ranks = average_ranks(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(scores, labels) -> float:
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average_precision needs at least one positive")
    thresholds, inverse = np.unique(-s, return_inverse=True)
    tp = np.cumsum(np.bincount(inverse, weights=y, minlength=len(thresholds)))
    seen = np.cumsum(np.bincount(inverse, minlength=len(thresholds)))
    precision = tp / seen
    recall = tp / n_pos
    return float(np.sum(np.diff(recall, prepend=0.0) * precision))


def per_class_auc(scores, labels, class_names: Sequence[Optional[str]],
                  normal_names: Iterable = NORMAL_CLASS_NAMES) -> dict[str, float]:
    """AUC of each anomaly class's frames against all normal-video frames.

    ``class_names`` gives, per frame, the class of the video the frame
    belongs to; frames of normal videos carry one of ``normal_names``.
    """
    s, y = _check(scores, labels)
    names = list(class_names)
    if len(names) != len(s):
        raise ValueError("class_names differ in length from scores")
    normal_names = set(normal_names)
    is_normal_video = np.array([n in normal_names for n in names])
    out = {}
    for cls in sorted({n for n in names if n not in normal_names}):
        mask = is_normal_video | np.array([n == cls for n in names])
        if not mask.any():
            raise ValueError(f"class {cls!r} has no frames")
        out[cls] = roc_auc(s[mask], y[mask])
    return out


def evaluate(scores, labels, class_names=None) -> EvalReport:
    s, y = _check(scores, labels)
    report = EvalReport(
        auc=roc_auc(s, y),
        ap=average_precision(s, y),
        n_pos=int(y.sum()),
        n_neg=int(len(y) - y.sum()),
    )
    if class_names is not None:
        report.per_class = per_class_auc(s, y, class_names)
    return report


def evaluate_curves(curves, use: str = "smooth") -> EvalReport:
    """Pool frames of all labeled curves (as returned by ``scorer.infer``)."""
    scores, labels, classes = [], [], []
    for c in curves.values():
        if c.frame_labels is None:
            raise ValueError(f"curve {c.video_id} has no labels")
        x = c.frame_smooth if use == "smooth" else c.frame_raw
        scores.append(x)
        labels.append(c.frame_labels)
        classes += [c.class_name] * len(x)
    return evaluate(np.concatenate(scores), np.concatenate(labels), classes)


def write_sweep_csv(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["parameter", "value", "auc", "ap"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({"parameter": r["parameter"], "value": r["value"],
                        "auc": f"{r['auc']:.9g}", "ap": f"{r['ap']:.9g}"})
    return path
