"""Run configuration and the synth -> select -> train -> infer -> eval chain.

Everything here is a pure function of a :class:`RunConfig`; the command
line layer only parses, writes files and maps errors to exit codes.
"""

from __future__ import annotations

import dataclasses
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from .featurebank import (BankMeta, FeatureBank, HeadId, SynthSpec, balance_classes,
                          save_bank, subsample, synth_bank)
from .hmc import HmcConfig, HmcParams, save_checkpoint
from .metrics import EvalReport, evaluate_curves
from .plot import write_svg
from .rsa import RsaConfig, RsaReport, jaccard_stability, rank_heads
from .scorer import AnomalyCurve, InferenceConfig, infer, write_curves
from .trainer import TrainConfig, train

THREADS_ENV = "LATENT_STEER_THREADS"
SWEEP_AXES = ("data_ratio", "class_ratio", "k_experts", "lambda_reg")
HOLDOUT_OFFSET = 1_000_003


class ConfigError(ValueError):
    """Bad or inconsistent run configuration."""


@dataclass
class SynthConfig:
    """Synthetic bank recipe. ``n_planted`` heads are chosen from ``seed``."""

    n_layers: int = 4
    n_heads_per_layer: int = 4
    d_model: int = 64
    d_head: int = 16
    segment_len_frames: int = 48
    frames_sampled: int = 16
    n_normal: int = 1500
    n_anomalous: int = 500
    n_planted: int = 2
    delta: float = 1.0
    noise_sigma: float = 1.0
    context_signal: float = 4.0
    n_components_per_class: int = 2
    segments_per_video: int = 12
    anomaly_classes: tuple = ("Anomaly",)
    bipolar_context: bool = False
    seed: Optional[int] = None
    sample_seed: Optional[int] = None


@dataclass
class SelectConfig:
    epsilon: float = 1e-8
    k: int = 4
    metric: str = "rsa"
    knn_k: int = 5
    balanced: bool = True
    ratio_normal: float = 0.5


@dataclass
class ControllerConfig:
    d_hidden: int = 128
    r: int = 4
    variant: str = "full"


@dataclass
class TrainSection:
    epochs: int = 1000
    batch_size: int = 64
    learning_rate: float = 1e-3
    lambda_reg: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle_seed: Optional[int] = None
    loss_reduction: str = "mean"


@dataclass
class InferenceSection:
    sigma_g: float = 6.0
    tau_anomaly: float = 0.5
    kernel_radius_sigmas: float = 4.0


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "run"
    synth: SynthConfig = field(default_factory=SynthConfig)
    rsa: SelectConfig = field(default_factory=SelectConfig)
    hmc: ControllerConfig = field(default_factory=ControllerConfig)
    train: TrainSection = field(default_factory=TrainSection)
    inference: InferenceSection = field(default_factory=InferenceSection)

    # -- construction ------------------------------------------------------

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        cfg = cls()
        return cfg.with_overrides(_flatten(doc))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc)

    def with_overrides(self, flat: dict[str, Any]) -> "RunConfig":
        """Apply ``{"section.field": value}`` (or top-level ``"field"``) overrides."""
        top = {}
        sections = {f.name: asdict(getattr(self, f.name)) for f in dataclasses.fields(self)
                    if dataclasses.is_dataclass(getattr(self, f.name))}
        for key, value in flat.items():
            parts = key.split(".")
            if len(parts) == 1 and parts[0] not in sections:
                if parts[0] not in ("seed", "out_dir"):
                    raise ConfigError(f"unknown config key {key!r}")
                top[parts[0]] = value
            elif len(parts) == 2 and parts[0] in sections:
                if parts[1] not in sections[parts[0]]:
                    raise ConfigError(f"unknown config key {key!r}")
                sections[parts[0]][parts[1]] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            built = {name: type(getattr(self, name))(**values) for name, values in sections.items()}
            out = dataclasses.replace(self, **top, **built)
        except TypeError as e:
            raise ConfigError(str(e)) from e
        out.synth.anomaly_classes = tuple(out.synth.anomaly_classes)
        out.validate()
        return out

    def validate(self) -> None:
        """Build every component config once so bad values fail before any work."""
        try:
            self.synth_spec()
            self.rsa_config()
            self.train_config()
            self.inference_config()
            HmcConfig(d_model=self.synth.d_model, d_head=self.synth.d_head, k=self.rsa.k,
                      d_hidden=self.hmc.d_hidden, r=self.hmc.r,
                      variant=self.hmc.variant)
        except (ValueError, TypeError) as e:
            raise ConfigError(str(e)) from e
        if not 0.0 < self.rsa.ratio_normal < 1.0:
            raise ConfigError("rsa.ratio_normal must lie in (0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["synth"]["anomaly_classes"] = list(d["synth"]["anomaly_classes"])
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    # -- component configs -------------------------------------------------

    @property
    def synth_seed(self) -> int:
        return self.seed if self.synth.seed is None else self.synth.seed

    def bank_meta(self) -> BankMeta:
        s = self.synth
        return BankMeta(d_model=s.d_model, d_head=s.d_head, n_layers=s.n_layers,
                        n_heads_per_layer=s.n_heads_per_layer,
                        segment_len_frames=s.segment_len_frames,
                        frames_sampled=s.frames_sampled, source="synthetic")

    def planted_heads(self) -> tuple[HeadId, ...]:
        meta = self.bank_meta()
        if not 0 <= self.synth.n_planted <= meta.n_heads:
            raise ConfigError(f"n_planted must lie in [0, {meta.n_heads}]")
        rng = np.random.default_rng(np.random.SeedSequence([self.synth_seed & (2**64 - 1), 0x91]))
        idx = np.sort(rng.choice(meta.n_heads, self.synth.n_planted, replace=False))
        heads = meta.all_heads()
        return tuple(heads[i] for i in idx)

    def synth_spec(self, holdout: bool = False) -> SynthSpec:
        s = self.synth
        sample_seed = s.sample_seed
        if holdout:
            sample_seed = (self.synth_seed if sample_seed is None else sample_seed) + HOLDOUT_OFFSET
        return SynthSpec(
            meta=self.bank_meta(),
            n_normal=s.n_normal,
            n_anomalous=s.n_anomalous,
            planted_heads=tuple((h, s.delta) for h in self.planted_heads()),
            n_components_per_class=s.n_components_per_class,
            noise_sigma=s.noise_sigma,
            context_signal=s.context_signal,
            seed=self.synth_seed,
            segments_per_video=s.segments_per_video,
            anomaly_classes=tuple(s.anomaly_classes),
            bipolar_context=s.bipolar_context,
            sample_seed=sample_seed,
        )

    def rsa_config(self) -> RsaConfig:
        r = self.rsa
        return RsaConfig(epsilon=r.epsilon, k=r.k, metric=r.metric, knn_k=r.knn_k)

    def train_config(self) -> TrainConfig:
        t = asdict(self.train)
        if t["shuffle_seed"] is None:
            t["shuffle_seed"] = self.seed
        return TrainConfig(**t)

    def hmc_config(self, bank: FeatureBank, k: Optional[int] = None) -> HmcConfig:
        return HmcConfig(d_model=bank.meta.d_model, d_head=bank.meta.d_head,
                         k=self.rsa.k if k is None else k, d_hidden=self.hmc.d_hidden,
                         r=self.hmc.r, variant=self.hmc.variant)

    def inference_config(self) -> InferenceConfig:
        return InferenceConfig(**asdict(self.inference))


def _flatten(doc: dict) -> dict[str, Any]:
    flat = {}
    for key, value in doc.items():
        if isinstance(value, dict):
            for sub, v in value.items():
                flat[f"{key}.{sub}"] = v
        else:
            flat[key] = value
    return flat


def n_workers() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be >= 1")
    return n


def fan_out(fn: Callable, items: Sequence) -> list:
    """Map ``fn`` over ``items`` on up to ``LATENT_STEER_THREADS`` threads, in order."""
    workers = min(n_workers(), max(len(items), 1))
    if workers == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# stages

def make_banks(cfg: RunConfig) -> tuple[FeatureBank, FeatureBank]:
    """Calibration bank and a held-out bank drawn from the same geometry."""
    return synth_bank(cfg.synth_spec()), synth_bank(cfg.synth_spec(holdout=True))


def calibration_set(bank: FeatureBank, cfg: RunConfig) -> FeatureBank:
    if not cfg.rsa.balanced:
        return bank
    return balance_classes(bank, cfg.rsa.ratio_normal, seed=cfg.seed)


def select(bank: FeatureBank, cfg: RunConfig) -> RsaReport:
    """Optionally rebalance, then rank heads; notes record the effective counts."""
    y = bank.labels()
    calib = calibration_set(bank, cfg)
    report = rank_heads(calib, cfg.rsa_config())
    report.notes.update({
        "balanced": cfg.rsa.balanced,
        "input_normal": int((y == 0).sum()),
        "input_anomalous": int((y == 1).sum()),
        "effective_normal": report.n_normal,
        "effective_anomalous": report.n_anomalous,
    })
    return report


def fit(bank: FeatureBank, selected: Sequence[HeadId], cfg: RunConfig, log_path=None):
    """Train on the calibration set; returns ``{"params", "state"}``."""
    calib = calibration_set(bank, cfg)
    return train(calib, selected, cfg.train_config(), cfg.hmc_config(bank, len(selected)),
                 seed=cfg.seed, log_path=log_path)


@dataclass
class PipelineResult:
    config: RunConfig
    calibration: FeatureBank
    holdout: FeatureBank
    report: RsaReport
    params: HmcParams
    history: list[dict]
    curves: dict[str, AnomalyCurve]
    evaluation: EvalReport
    files: dict[str, Path] = field(default_factory=dict)


def run_pipeline(cfg: RunConfig, out_dir=None) -> PipelineResult:
    """Full chain on a synthetic calibration bank, evaluated on its held-out twin."""
    calib, holdout = make_banks(cfg)
    report = select(calib, cfg)
    files: dict[str, Path] = {}
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
    out = fit(calib, report.selected, cfg, log_path=log_path)
    curves = infer(holdout, out["params"], report.selected, cfg.inference_config())
    evaluation = evaluate_curves(curves)
    result = PipelineResult(cfg, calib, holdout, report, out["params"],
                            out["state"].loss_history, curves, evaluation, files)
    if out_dir is not None:
        files["config"] = write_resolved(cfg, out_dir)
        files["calibration"] = save_bank(calib, out_dir / "calibration")
        files["holdout"] = save_bank(holdout, out_dir / "holdout")
        files["report"] = out_dir / "rsa_report.json"
        files["report"].write_text(report.dumps())
        files["checkpoint"] = save_checkpoint(out["params"], out_dir / "checkpoint.lsck",
                                              seed=cfg.seed, epoch=cfg.train.epochs,
                                              selected=report.selected)
        files["train_log"] = log_path
        files["curves"] = write_curves(curves, out_dir / "curves")
        files["eval"] = out_dir / "eval.json"
        files["eval"].write_text(evaluation.dumps())
        for name, vid in example_videos(curves).items():
            files[f"plot_{name}"] = write_svg(curves[vid], out_dir / f"curve_{name}.svg")
    return result


def example_videos(curves: dict[str, AnomalyCurve]) -> dict[str, str]:
    """First normal and first anomalous video, for qualitative plots."""
    picks = {}
    for vid, c in curves.items():
        if c.frame_labels is None:
            continue
        key = "abnormal" if c.frame_labels.any() else "normal"
        picks.setdefault(key, vid)
    return picks


def write_resolved(cfg: RunConfig, out_dir) -> Path:
    path = Path(out_dir) / "run_config.resolved.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(cfg.dumps() + "\n")
    return path


# ---------------------------------------------------------------------------
# sweeps and stability

def _sweep_point(calib: FeatureBank, holdout: FeatureBank, cfg: RunConfig,
                 axis: str, value) -> dict:
    if axis == "data_ratio":
        bank = subsample(calib, float(value), unit="video", seed=cfg.seed)
        run = cfg
    elif axis == "class_ratio":
        bank = calib
        run = cfg.with_overrides({"rsa.balanced": True, "rsa.ratio_normal": float(value)})
    elif axis == "k_experts":
        bank = calib
        run = cfg.with_overrides({"rsa.k": int(value)})
    elif axis == "lambda_reg":
        bank = calib
        run = cfg.with_overrides({"train.lambda_reg": float(value)})
    else:
        raise ConfigError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    report = select(bank, run)
    params = fit(bank, report.selected, run)["params"]
    ev = evaluate_curves(infer(holdout, params, report.selected, run.inference_config()))
    return {"parameter": axis, "value": value, "auc": ev.auc, "ap": ev.ap,
            "selected": [str(h) for h in report.selected]}


def sweep(cfg: RunConfig, axis: str, values: Sequence, banks=None) -> list[dict]:
    """One row (AUC, AP on the held-out bank) per value of ``axis``."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    if not values:
        raise ConfigError("sweep needs at least one value")
    calib, holdout = banks if banks is not None else make_banks(cfg)
    return fan_out(lambda v: _sweep_point(calib, holdout, cfg, axis, v), list(values))


@dataclass
class StabilityResult:
    reports: list[RsaReport]
    seeds: list[int]
    matrix: np.ndarray

    @property
    def identical(self) -> bool:
        sets = {frozenset(r.selected) for r in self.reports}
        return len(sets) == 1

    def table(self) -> list[dict]:
        return [{"seed": s, "selected": [str(h) for h in r.selected]}
                for s, r in zip(self.seeds, self.reports)]

    def to_json(self) -> dict:
        return {"seeds": self.seeds, "jaccard": self.matrix.tolist(),
                "identical": self.identical, "selected": self.table()}


def stability(bank: FeatureBank, cfg: RunConfig, n_seeds: int, fraction: float = 0.5) -> StabilityResult:
    """Re-run selection on ``fraction`` of the videos for seeds ``0..n_seeds-1``."""
    if n_seeds < 2:
        raise ConfigError("n_seeds must be >= 2")
    seeds = list(range(n_seeds))

    def one(seed):
        part = subsample(bank, fraction, unit="video", seed=seed)
        return select(part, cfg.with_overrides({"seed": seed}))

    reports = fan_out(one, seeds)
    return StabilityResult(reports, seeds, jaccard_stability(reports, cfg.rsa.k))
