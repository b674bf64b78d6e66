"""Segment scoring, frame expansion, temporal smoothing and flagging."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .featurebank import BankError, FeatureBank, HeadId, SegmentRecord
from .hmc import HmcParams, predict_proba, sigmoid


@dataclass(frozen=True)
class InferenceConfig:
    sigma_g: float = 6.0
    tau_anomaly: float = 0.5
    kernel_radius_sigmas: float = 4.0

    def __post_init__(self):
        if self.sigma_g <= 0:
            raise ValueError("sigma_g must be positive")
        if not 0.0 <= self.tau_anomaly <= 1.0:
            raise ValueError("tau_anomaly must lie in [0, 1]")
        if self.kernel_radius_sigmas <= 0:
            raise ValueError("kernel_radius_sigmas must be positive")

    @property
    def radius(self) -> int:
        return math.ceil(self.kernel_radius_sigmas * self.sigma_g)


@dataclass
class AnomalyCurve:
    video_id: str
    segment_probs: np.ndarray
    frame_raw: np.ndarray
    frame_smooth: np.ndarray
    flags: list[tuple[int, float]]
    records: tuple[SegmentRecord, ...] = ()
    frame_labels: Optional[np.ndarray] = None
    class_name: Optional[str] = None


def score_segment(f_final, w, b) -> float:
    f, w = np.asarray(f_final, np.float64), np.asarray(w, np.float64)
    if f.shape != w.shape:
        raise ValueError(f"shape mismatch: features {f.shape} vs weights {w.shape}")
    return float(sigmoid(np.asarray(f @ w + float(np.asarray(b).reshape(-1)[0]))))


def _ordered(records: Sequence[SegmentRecord]) -> list[int]:
    return sorted(range(len(records)), key=lambda i: records[i].segment_index)


def expand_to_frames(segment_probs, records: Sequence[SegmentRecord],
                     n_frames: Optional[int] = None) -> np.ndarray:
    """Paint each segment's probability over its frames.

    Frames past the last segment (a trailing remainder shorter than a
    segment) take the last segment's probability.
    """
    probs = np.asarray(segment_probs, np.float64)
    if len(probs) != len(records) or not records:
        raise ValueError("need one probability per record and at least one record")
    order = _ordered(records)
    end = records[order[-1]].frame_end
    n_frames = end if n_frames is None else int(n_frames)
    if n_frames < end:
        raise ValueError(f"n_frames={n_frames} is shorter than the covered range {end}")
    out = np.empty(n_frames)
    expect = 0
    for i in order:
        r = records[i]
        if r.frame_start < expect:
            raise ValueError(f"segment {r.segment_index} overlaps its predecessor")
        if r.frame_start > expect:
            raise ValueError(f"frames [{expect}, {r.frame_start}) are not covered by any segment")
        out[r.frame_start:r.frame_end] = probs[i]
        expect = r.frame_end
    out[expect:] = probs[order[-1]]
    return out


def gaussian_weights(config: InferenceConfig) -> np.ndarray:
    offsets = np.arange(-config.radius, config.radius + 1)
    return np.exp(-offsets ** 2 / (2 * config.sigma_g ** 2))


def smooth(frame_raw, config: InferenceConfig = InferenceConfig()) -> np.ndarray:
    """Truncated Gaussian weighted average, renormalized inside the window."""
    x = np.asarray(frame_raw, np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("smooth needs a non-empty 1-D sequence")
    kernel = gaussian_weights(config)
    r = config.radius
    num = np.convolve(np.pad(x, r), kernel, mode="valid")
    den = np.convolve(np.pad(np.ones_like(x), r), kernel, mode="valid")
    return num / den


def flag_segments(frame_smooth, records: Sequence[SegmentRecord], tau: float) -> list[tuple[int, float]]:
    """Segments whose mean smoothed score strictly exceeds ``tau``."""
    a = np.asarray(frame_smooth, np.float64)
    flags = []
    for i in _ordered(records):
        r = records[i]
        score = float(a[r.frame_start:r.frame_end].mean())
        if score > tau:
            flags.append((r.segment_index, score))
    return flags


def labels_to_frames(records: Sequence[SegmentRecord], n_frames: int) -> Optional[np.ndarray]:
    """Per-frame labels painted from segment labels (None if any is missing)."""
    if any(r.label is None for r in records):
        return None
    lab = np.zeros(n_frames, dtype=np.int64)
    order = _ordered(records)
    for i in order:
        lab[records[i].frame_start:records[i].frame_end] = records[i].label
    lab[records[order[-1]].frame_end:] = records[order[-1]].label
    return lab


def infer(bank: FeatureBank, params: HmcParams, selected: Sequence[HeadId],
          config: InferenceConfig = InferenceConfig()) -> dict[str, AnomalyCurve]:
    """Per-video anomaly curves in order of first appearance in the bank."""
    selected = [HeadId(*h) for h in selected]
    missing = [h for h in selected if h not in bank.head_features]
    if missing:
        raise BankError(f"bank lacks selected heads {missing}")
    if len(selected) != params.config.k:
        raise ValueError(f"checkpoint expects {params.config.k} experts, got {len(selected)}")
    h_all = bank.stacked(selected)
    rows_by_video: dict[str, list[int]] = {}
    for i, r in enumerate(bank.records):
        rows_by_video.setdefault(r.video_id, []).append(i)
    curves = {}
    for vid, rows in rows_by_video.items():
        rows = np.array(rows)
        recs = tuple(bank.records[i] for i in rows)
        probs = predict_proba(params, bank.context[rows], h_all[rows]).astype(np.float64)
        n_frames = bank.video_lengths.get(vid)
        raw = expand_to_frames(probs, recs, n_frames)
        sm = smooth(raw, config)
        order = _ordered(recs)
        cls = next((r.class_name for r in recs if r.class_name), None)
        curves[vid] = AnomalyCurve(
            video_id=vid,
            segment_probs=probs[order],
            frame_raw=raw,
            frame_smooth=sm,
            flags=flag_segments(sm, recs, config.tau_anomaly),
            records=tuple(recs[i] for i in order),
            frame_labels=labels_to_frames(recs, len(raw)),
            class_name=cls,
        )
    return curves


# ---------------------------------------------------------------------------
# export

def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_curves(curves: dict[str, AnomalyCurve], out_dir) -> Path:
    """One ``<video>.csv`` per video plus ``summary.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {"videos": []}
    for vid, c in curves.items():
        path = out_dir / f"{vid}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = ["frame_index", "raw", "smooth"]
            if c.frame_labels is not None:
                header.append("label")
            w.writerow(header)
            for t in range(len(c.frame_raw)):
                row = [t, _fmt(c.frame_raw[t]), _fmt(c.frame_smooth[t])]
                if c.frame_labels is not None:
                    row.append(int(c.frame_labels[t]))
                w.writerow(row)
        summary["videos"].append({
            "video_id": vid,
            "csv": path.name,
            "class_name": c.class_name,
            "n_segments": len(c.segment_probs),
            "n_frames": len(c.frame_raw),
            "segment_probs": [float(_fmt(p)) for p in c.segment_probs],
            "flags": [{"segment_index": t, "mean_smoothed_score": float(_fmt(s))} for t, s in c.flags],
            "max_smooth": float(_fmt(c.frame_smooth.max())),
            "mean_smooth": float(_fmt(c.frame_smooth.mean())),
        })
    path = out_dir / "summary.json"
    path.write_text(json.dumps(summary, indent=1, sort_keys=True))
    return path


def read_curve_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: empty curve")
    out = {"frame_index": np.array([int(r["frame_index"]) for r in rows]),
           "raw": np.array([float(r["raw"]) for r in rows]),
           "smooth": np.array([float(r["smooth"]) for r in rows])}
    if "label" in rows[0]:
        out["label"] = np.array([int(r["label"]) for r in rows])
    return out
