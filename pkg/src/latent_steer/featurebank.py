"""Feature banks: per-segment context vectors and per-head features.

A bank is the only input the rest of the package consumes. It is produced
offline by whatever runs the frozen model (out of scope here) or by
:func:`synth_bank`, which plants discriminative heads with known geometry.

On disk a bank is either

* ``<name>.manifest.json`` + ``<name>.bank.bin``: JSON manifest plus a
  little-endian float32 row-major payload, one block per stored head
  followed by one block for the context matrix, or
* ``<name>.bank.json``: a single JSON document (test fixtures).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

SCHEMA_VERSION = 1
SEGMENT_LEVEL = "segment_level"
VIDEO_LEVEL = "video_level"
_GRANULARITIES = (SEGMENT_LEVEL, VIDEO_LEVEL)
_F32LE = np.dtype("<f4")


class BankError(ValueError):
    """Malformed bank, manifest or payload."""


class MissingLabelsError(BankError):
    """A labeled operation was given a bank without labels."""


class HeadId(NamedTuple):
    layer: int
    head: int

    def __str__(self) -> str:
        return f"L{self.layer}H{self.head}"


@dataclass(frozen=True)
class BankMeta:
    d_model: int = 3584
    d_head: int = 128
    n_layers: int = 28
    n_heads_per_layer: int = 28
    segment_len_frames: int = 48
    frames_sampled: int = 16
    source: str = ""

    def __post_init__(self):
        for name in ("d_model", "d_head", "n_layers", "n_heads_per_layer",
                     "segment_len_frames", "frames_sampled"):
            if int(getattr(self, name)) <= 0:
                raise BankError(f"BankMeta.{name} must be positive")

    @property
    def n_heads(self) -> int:
        return self.n_layers * self.n_heads_per_layer

    def all_heads(self) -> list[HeadId]:
        return [HeadId(l, k) for l in range(self.n_layers)
                for k in range(self.n_heads_per_layer)]

    def is_valid(self, head: HeadId) -> bool:
        return 0 <= head.layer < self.n_layers and 0 <= head.head < self.n_heads_per_layer


@dataclass(frozen=True)
class SegmentRecord:
    video_id: str
    segment_index: int
    frame_start: int
    frame_end: int
    label: Optional[int] = None
    class_name: Optional[str] = None
    granularity: str = SEGMENT_LEVEL

    def __post_init__(self):
        if self.frame_end <= self.frame_start:
            raise BankError(f"{self.video_id}#{self.segment_index}: empty frame range")
        if self.segment_index < 0 or self.frame_start < 0:
            raise BankError(f"{self.video_id}#{self.segment_index}: negative index")
        if self.label not in (None, 0, 1):
            raise BankError(f"label must be 0, 1 or None, got {self.label!r}")
        if self.granularity not in _GRANULARITIES:
            raise BankError(f"unknown granularity {self.granularity!r}")

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _frozen_f32(a) -> np.ndarray:
    a = np.array(a, dtype=np.float32, order="C", copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class FeatureBank:
    """Immutable bank of labeled (or unlabeled) segments.

    ``context`` has shape ``(n_segments, d_model)``; each entry of
    ``head_features`` has shape ``(n_segments, d_head)``. Arrays are stored
    as read-only float32.
    """

    meta: BankMeta
    records: tuple[SegmentRecord, ...]
    context: np.ndarray
    head_features: dict[HeadId, np.ndarray]
    video_lengths: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        n = len(self.records)
        ctx = _frozen_f32(self.context).reshape(n, self.meta.d_model) \
            if np.size(self.context) == n * self.meta.d_model else None
        if ctx is None:
            raise BankError(f"context has shape {np.shape(self.context)}, "
                            f"expected ({n}, {self.meta.d_model})")
        object.__setattr__(self, "context", ctx)
        heads = {}
        for hid, arr in sorted(self.head_features.items()):
            hid = HeadId(int(hid[0]), int(hid[1]))
            if not self.meta.is_valid(hid):
                raise BankError(f"head {hid} outside {self.meta.n_layers}x"
                                f"{self.meta.n_heads_per_layer} geometry")
            if np.size(arr) != n * self.meta.d_head:
                raise BankError(f"head {hid} has shape {np.shape(arr)}, "
                                f"expected ({n}, {self.meta.d_head})")
            heads[hid] = _frozen_f32(arr).reshape(n, self.meta.d_head)
        object.__setattr__(self, "head_features", heads)
        object.__setattr__(self, "video_lengths",
                           {str(k): int(v) for k, v in self.video_lengths.items()})
        if not np.isfinite(ctx).all() or not all(np.isfinite(a).all() for a in heads.values()):
            raise BankError("non-finite feature value")
        _check_video_layout(self.records)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def heads(self) -> list[HeadId]:
        return list(self.head_features)

    @property
    def has_labels(self) -> bool:
        return len(self.records) > 0 and all(r.label is not None for r in self.records)

    def labels(self) -> np.ndarray:
        if not self.has_labels:
            raise MissingLabelsError("bank has no (or partial) labels")
        return np.array([r.label for r in self.records], dtype=np.int64)

    def video_ids(self) -> list[str]:
        """Distinct video ids in order of first appearance."""
        return list(dict.fromkeys(r.video_id for r in self.records))

    def features(self, head: HeadId) -> np.ndarray:
        try:
            return self.head_features[HeadId(*head)]
        except KeyError:
            raise BankError(f"head {HeadId(*head)} is not stored in this bank") from None

    def stacked(self, heads: Sequence[HeadId]) -> np.ndarray:
        """Features of ``heads`` as an ``(n, K, d_head)`` array in the given order."""
        if not heads:
            return np.zeros((len(self), 0, self.meta.d_head), dtype=np.float32)
        return np.stack([self.features(h) for h in heads], axis=1)

    def take(self, rows: Iterable[int]) -> "FeatureBank":
        rows = np.asarray(list(rows), dtype=np.int64)
        keep = {self.records[i].video_id for i in rows}
        return FeatureBank(
            meta=self.meta,
            records=tuple(self.records[i] for i in rows),
            context=self.context[rows],
            head_features={h: a[rows] for h, a in self.head_features.items()},
            video_lengths={v: n for v, n in self.video_lengths.items() if v in keep},
        )

    def with_heads(self, heads: Sequence[HeadId]) -> "FeatureBank":
        return dataclasses.replace(self, head_features={h: self.features(h) for h in heads})

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(_manifest_core(self), sort_keys=True).encode())
        for hid, arr in self.head_features.items():
            h.update(f"{hid.layer},{hid.head};".encode())
            h.update(arr.astype(_F32LE).tobytes())
        h.update(self.context.astype(_F32LE).tobytes())
        return h.hexdigest()


def _check_video_layout(records: Sequence[SegmentRecord]) -> None:
    by_video: dict[str, list[SegmentRecord]] = {}
    for r in records:
        by_video.setdefault(r.video_id, []).append(r)
    for vid, recs in by_video.items():
        recs = sorted(recs, key=lambda r: r.segment_index)
        for a, b in zip(recs, recs[1:]):
            if a.segment_index == b.segment_index:
                raise BankError(f"{vid}: duplicate segment index {a.segment_index}")
            if b.frame_start < a.frame_end:
                raise BankError(f"{vid}: segments {a.segment_index} and "
                                f"{b.segment_index} overlap or are out of order")


# ---------------------------------------------------------------------------
# serialization

def _manifest_core(bank: FeatureBank) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "meta": dataclasses.asdict(bank.meta),
        "records": [r.to_json() for r in bank.records],
        "heads": [[h.layer, h.head] for h in bank.head_features],
        "video_lengths": dict(sorted(bank.video_lengths.items())),
    }


def _base_name(path) -> Path:
    p = Path(path)
    for suffix in (".manifest.json", ".bank.json", ".bank.bin"):
        if p.name.endswith(suffix):
            return p.with_name(p.name[: -len(suffix)])
    return p


def save_bank(bank: FeatureBank, path, format: str = "binary") -> Path:
    """Write ``bank`` next to ``path`` and return the file load_bank should be given."""
    base = _base_name(path)
    base.parent.mkdir(parents=True, exist_ok=True)
    n, d_head = len(bank), bank.meta.d_head
    manifest = _manifest_core(bank)
    if format == "json":
        manifest["head_features"] = [a.astype(np.float64).tolist() for a in bank.head_features.values()]
        manifest["context"] = bank.context.astype(np.float64).tolist()
        out = base.with_name(base.name + ".bank.json")
        out.write_text(json.dumps(manifest, indent=1))
        return out
    if format != "binary":
        raise ValueError(f"unknown bank format {format!r}")
    payload = base.with_name(base.name + ".bank.bin")
    blocks, offset = [], 0
    with open(payload, "wb") as fh:
        for hid, arr in bank.head_features.items():
            data = arr.astype(_F32LE).tobytes()
            assert len(data) == n * d_head * 4
            blocks.append({"layer": hid.layer, "head": hid.head, "offset": offset, "nbytes": len(data)})
            fh.write(data)
            offset += len(data)
        data = bank.context.astype(_F32LE).tobytes()
        fh.write(data)
    manifest["payload"] = payload.name
    manifest["dtype"] = "<f4"
    manifest["n_segments"] = n
    manifest["head_blocks"] = blocks
    manifest["context_block"] = {"offset": offset, "nbytes": len(data)}
    out = base.with_name(base.name + ".manifest.json")
    out.write_text(json.dumps(manifest, indent=1))
    return out


def _parse_core(doc: dict) -> tuple[BankMeta, list[SegmentRecord], list[HeadId], dict]:
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise BankError(f"schema_version {version!r} not supported (expected {SCHEMA_VERSION})")
    try:
        meta = BankMeta(**doc["meta"])
        records = [SegmentRecord(**r) for r in doc["records"]]
        heads = [HeadId(int(l), int(k)) for l, k in doc["heads"]]
    except (KeyError, TypeError) as exc:
        raise BankError(f"malformed manifest: {exc}") from exc
    return meta, records, heads, doc.get("video_lengths", {})


def load_bank(path) -> FeatureBank:
    p = Path(path)
    if not p.exists():
        base = _base_name(p)
        for cand in (base.with_name(base.name + ".manifest.json"),
                     base.with_name(base.name + ".bank.json")):
            if cand.exists():
                p = cand
                break
        else:
            raise FileNotFoundError(f"no bank at {path}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise BankError(f"{p}: manifest does not parse: {exc}") from exc
    meta, records, heads, lengths = _parse_core(doc)
    n = len(records)

    if "payload" not in doc:
        feats = doc.get("head_features", [])
        if len(feats) != len(heads):
            raise BankError(f"{len(heads)} heads declared, {len(feats)} feature blocks present")
        arrays = {}
        for hid, rows in zip(heads, feats):
            arr = np.asarray(rows, dtype=np.float64).reshape(-1, meta.d_head) if len(rows) else \
                np.zeros((0, meta.d_head))
            if arr.shape != (n, meta.d_head):
                raise BankError(f"head {hid}: {arr.shape[0]} rows for {n} segments")
            arrays[hid] = arr
        ctx = np.asarray(doc.get("context", []), dtype=np.float64)
        ctx = ctx.reshape(-1, meta.d_model) if ctx.size else np.zeros((0, meta.d_model))
        if ctx.shape != (n, meta.d_model):
            raise BankError(f"context: {ctx.shape[0]} rows for {n} segments")
        return FeatureBank(meta, records, ctx, arrays, lengths)

    if doc.get("dtype", "<f4") != "<f4":
        raise BankError(f"unsupported payload dtype {doc.get('dtype')!r}")
    if doc.get("n_segments", n) != n:
        raise BankError(f"manifest declares {doc['n_segments']} segments but lists {n} records")
    payload = p.with_name(doc["payload"])
    if not payload.exists():
        raise FileNotFoundError(f"payload {payload} missing")
    raw = payload.read_bytes()

    def block(spec, width, what):
        off, nbytes = int(spec["offset"]), int(spec["nbytes"])
        if nbytes != n * width * 4:
            raise BankError(f"{what}: block holds {nbytes // (4 * width)} rows, manifest says {n}")
        if off + nbytes > len(raw):
            raise BankError(f"{what}: payload truncated")
        return np.frombuffer(raw, dtype=_F32LE, count=n * width, offset=off).reshape(n, width)

    blocks = doc.get("head_blocks", [])
    if len(blocks) != len(heads):
        raise BankError(f"{len(heads)} heads declared, {len(blocks)} blocks present")
    arrays = {}
    for spec in blocks:
        hid = HeadId(int(spec["layer"]), int(spec["head"]))
        arrays[hid] = block(spec, meta.d_head, f"head {hid}")
    ctx = block(doc["context_block"], meta.d_model, "context")
    return FeatureBank(meta, records, ctx, arrays, lengths)


# ---------------------------------------------------------------------------
# selection and relabeling

def balance_classes(bank: FeatureBank, ratio_normal: float = 0.5, seed: int = 0) -> FeatureBank:
    """Undersample so that normal segments make up ``ratio_normal`` of the bank.

    Only ever drops rows; kept rows stay in their original order.
    """
    if not 0.0 < ratio_normal < 1.0:
        raise ValueError("ratio_normal must lie in (0, 1)")
    y = bank.labels()
    normal, anom = np.flatnonzero(y == 0), np.flatnonzero(y == 1)
    if len(normal) == 0 or len(anom) == 0:
        raise BankError("balance_classes needs both classes")
    odds = ratio_normal / (1.0 - ratio_normal)
    n_norm, n_anom = int(round(odds * len(anom))), len(anom)
    if n_norm > len(normal):
        n_norm, n_anom = len(normal), int(round(len(normal) / odds))
    if n_norm < 1 or n_anom < 1 or n_anom > len(anom):
        raise BankError(f"ratio {ratio_normal} unreachable by undersampling "
                        f"{len(normal)} normal / {len(anom)} anomalous")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA1]))
    keep = np.concatenate([rng.choice(normal, n_norm, replace=False),
                           rng.choice(anom, n_anom, replace=False)])
    return bank.take(np.sort(keep))


def subsample(bank: FeatureBank, fraction: float, unit: str = "video", seed: int = 0) -> FeatureBank:
    """Keep ``ceil(fraction * N)`` videos (or segments) drawn without replacement."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must lie in (0, 1]")
    if unit == "video":
        units = bank.video_ids()
    elif unit == "segment":
        units = list(range(len(bank)))
    else:
        raise ValueError(f"unit must be 'video' or 'segment', got {unit!r}")
    n_keep = math.ceil(fraction * len(units))
    if n_keep >= len(units):
        return bank
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5AB]))
    chosen = np.sort(rng.choice(len(units), n_keep, replace=False))
    if unit == "segment":
        return bank.take(chosen)
    keep = {units[i] for i in chosen}
    return bank.take(i for i, r in enumerate(bank.records) if r.video_id in keep)


def coarsen_labels(bank: FeatureBank) -> FeatureBank:
    """Video-level supervision: any anomalous segment makes the whole video positive."""
    y = bank.labels()
    positive = {r.video_id for r, lab in zip(bank.records, y) if lab == 1}
    records = tuple(dataclasses.replace(r, label=1 if r.video_id in positive else 0,
                                        granularity=VIDEO_LEVEL) for r in bank.records)
    return dataclasses.replace(bank, records=records)


# ---------------------------------------------------------------------------
# planted-manifold generator

@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic bank with known discriminative heads.

    ``planted_heads`` pairs a head with the distance its anomalous centroids
    are displaced from the normal ones. The context vector gets
    ``context_signal`` along a fixed direction for anomalous samples; with
    ``bipolar_context`` that displacement points either way (sign drawn per
    video), so the anomaly evidence in the context is not linearly readable.
    ``seed`` fixes the geometry, ``sample_seed`` (default: ``seed``) the draws,
    so banks differing only in ``sample_seed`` are train/test splits of one
    population.
    """

    meta: BankMeta
    n_normal: int = 200
    n_anomalous: int = 200
    planted_heads: tuple[tuple[HeadId, float], ...] = ()
    n_components_per_class: int = 2
    noise_sigma: float = 1.0
    context_signal: float = 1.0
    seed: int = 0
    segments_per_video: int = 1
    anomaly_classes: tuple[str, ...] = ("Anomaly",)
    bipolar_context: bool = False
    sample_seed: Optional[int] = None

    @property
    def draw_seed(self) -> int:
        """Seed for per-sample noise; ``seed`` alone fixes the planted geometry."""
        return self.seed if self.sample_seed is None else self.sample_seed

    def __post_init__(self):
        object.__setattr__(self, "planted_heads",
                           tuple((HeadId(*h), float(d)) for h, d in self.planted_heads))
        object.__setattr__(self, "anomaly_classes", tuple(self.anomaly_classes))
        if self.n_normal < 0 or self.n_anomalous < 0:
            raise ValueError("sample counts must be non-negative")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")
        if self.n_components_per_class < 1 or self.segments_per_video < 1:
            raise ValueError("n_components_per_class and segments_per_video must be >= 1")
        if not self.anomaly_classes:
            raise ValueError("anomaly_classes must not be empty")
        for h, d in self.planted_heads:
            if not self.meta.is_valid(h):
                raise ValueError(f"planted head {h} outside the bank geometry")
            if d < 0:
                raise ValueError("separations must be non-negative")


def _rng(seed: int, *stream: int) -> np.random.Generator:
    # counter-style streams keyed on (seed, purpose, ...) so draws do not depend on order
    return np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), *stream]))


def _unit(rng: np.random.Generator, d: int) -> np.ndarray:
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def _synth_layout(spec: SynthSpec) -> tuple[list[SegmentRecord], dict[str, int]]:
    """Videos of ``segments_per_video`` segments; anomalies sit in the middle third."""
    spv, L = spec.segments_per_video, spec.meta.segment_len_frames
    n_anom_per_video = spv if spv < 3 else spv // 3
    first_anom = (spv - n_anom_per_video) // 2
    videos: list[list[int]] = []
    normals_left, anoms_left = spec.n_normal, spec.n_anomalous
    while anoms_left > 0:
        n_a = min(n_anom_per_video, anoms_left)
        n_pad = min(spv - n_a, normals_left)
        before = min(first_anom, n_pad)
        videos.append([0] * before + [1] * n_a + [0] * (n_pad - before))
        anoms_left -= n_a
        normals_left -= n_pad
    while normals_left > 0:
        n = min(spv, normals_left)
        videos.append([0] * n)
        normals_left -= n
    records, lengths = [], {}
    n_anom_videos = 0
    for v, labels in enumerate(videos):
        vid = f"vid{v:05d}"
        if 1 in labels:
            cls = spec.anomaly_classes[n_anom_videos % len(spec.anomaly_classes)]
            n_anom_videos += 1
        else:
            cls = None
        for t, y in enumerate(labels):
            records.append(SegmentRecord(vid, t, t * L, (t + 1) * L, y, cls))
        lengths[vid] = len(labels) * L
    return records, lengths


def synth_bank(spec: SynthSpec) -> FeatureBank:
    meta = spec.meta
    records, lengths = _synth_layout(spec)
    y = np.array([r.label for r in records], dtype=np.float64)
    n = len(records)
    draw = spec.draw_seed

    geo = _rng(spec.seed, 2)
    base = geo.standard_normal(meta.d_model)
    u = _unit(geo, meta.d_model)
    signal = y * spec.context_signal
    if spec.bipolar_context:
        videos = sorted({r.video_id for r in records})
        flip = dict(zip(videos, np.where(_rng(draw, 1).random(len(videos)) < 0.5, 1.0, -1.0)))
        signal = signal * np.array([flip[r.video_id] for r in records])
    context = base + np.outer(signal, u) \
        + spec.noise_sigma * _rng(draw, 5).standard_normal((n, meta.d_model))

    planted = dict(spec.planted_heads)
    k, d = spec.n_components_per_class, meta.d_head
    features = {}
    for hid in meta.all_heads():
        geo = _rng(spec.seed, 3, hid.layer, hid.head)
        centroid = geo.standard_normal(d)
        components = centroid + spec.noise_sigma * geo.standard_normal((k, d))
        shift = _unit(geo, d)
        rng = _rng(draw, 4, hid.layer, hid.head)
        assign = rng.integers(0, k, size=n)
        x = components[assign] + spec.noise_sigma * rng.standard_normal((n, d))
        delta = planted.get(hid, 0.0)
        if delta:
            x += np.outer(y * delta, shift)
        features[hid] = x
    return FeatureBank(meta, tuple(records), context, features, lengths)
