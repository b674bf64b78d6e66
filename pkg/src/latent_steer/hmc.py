"""Hierarchical meta-controller: gate, low-rank adapters and feature steering.

Forward passes return explicit caches so :mod:`latent_steer.trainer` can run
the backward pass by hand. Train-mode batch norm never mutates the
parameters; the updated running statistics travel in the cache and are
applied once per batch with :func:`apply_bn_update`.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

VARIANTS = ("full", "no_gsg", "additive", "static_scaling", "linear_probe")
# conventional BatchNorm1d defaults; the architecture description does not pin them
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_MAGIC = b"LSCK"
_F32LE = np.dtype("<f4")


@dataclass(frozen=True)
class HmcConfig:
    d_model: int = 3584
    d_hidden: int = 128
    d_head: int = 128
    k: int = 4
    r: int = 4
    variant: str = "full"

    def __post_init__(self):
        for name in ("d_model", "d_hidden", "d_head", "r"):
            if getattr(self, name) <= 0:
                raise ValueError(f"HmcConfig.{name} must be positive")
        if self.k < 0:
            raise ValueError("k must be non-negative")
        if self.r > self.d_model:
            raise ValueError("adapter rank r cannot exceed d_model")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")

    @property
    def uses_gsg(self) -> bool:
        return self.variant in ("full", "additive")

    @property
    def uses_lgm(self) -> bool:
        return self.variant in ("full", "no_gsg", "additive")


@dataclass
class GsgParams:
    w1: np.ndarray
    b1: np.ndarray
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS


@dataclass
class LgmAdapter:
    w_down: np.ndarray
    w_up: np.ndarray


@dataclass
class HmcParams:
    config: HmcConfig
    gsg: GsgParams
    adapters: list[LgmAdapter]
    scorer_w: np.ndarray
    scorer_b: np.ndarray
    static_scale: Optional[np.ndarray] = None

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        """Every stored array, in checkpoint order."""
        g = self.gsg
        out = [("gsg.w1", g.w1), ("gsg.b1", g.b1), ("gsg.gamma", g.gamma), ("gsg.beta", g.beta),
               ("gsg.running_mean", g.running_mean), ("gsg.running_var", g.running_var),
               ("gsg.w2", g.w2), ("gsg.b2", g.b2)]
        for i, a in enumerate(self.adapters):
            out += [(f"lgm.{i}.w_down", a.w_down), (f"lgm.{i}.w_up", a.w_up)]
        if self.static_scale is not None:
            out.append(("static_scale", self.static_scale))
        out += [("scorer.w", self.scorer_w), ("scorer.b", self.scorer_b)]
        return out

    def trainable(self) -> dict[str, np.ndarray]:
        return {n: a for n, a in self.tensors() if "running_" not in n}

    @property
    def dtype(self) -> np.dtype:
        return self.scorer_w.dtype

    def astype(self, dtype) -> "HmcParams":
        return _rebuild(self, {n: a.astype(dtype, copy=True) for n, a in self.tensors()})

    def copy(self) -> "HmcParams":
        return self.astype(self.dtype)


def _rebuild(params: HmcParams, arrays: dict[str, np.ndarray]) -> HmcParams:
    gsg = dataclasses.replace(
        params.gsg, **{f: arrays[f"gsg.{f}"] for f in
                       ("w1", "b1", "gamma", "beta", "running_mean", "running_var", "w2", "b2")})
    adapters = [LgmAdapter(arrays[f"lgm.{i}.w_down"], arrays[f"lgm.{i}.w_up"])
                for i in range(len(params.adapters))]
    return HmcParams(params.config, gsg, adapters, arrays["scorer.w"], arrays["scorer.b"],
                     arrays.get("static_scale"))


@dataclass
class SteeringSignals:
    """Batched control signals: ``s_global`` (B,), ``g`` and ``h_prime`` (B, K, d_head)."""

    s_global: np.ndarray
    g: np.ndarray
    h_prime: np.ndarray


# ---------------------------------------------------------------------------
# construction and accounting

def init_params(config: HmcConfig, seed: int = 0, dtype=np.float32) -> HmcParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, identity BN."""

    def uniform(stream, fan_in, shape):
        rng = np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), 0x11C, *stream]))
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    c = config
    gsg = GsgParams(
        w1=uniform([0], c.d_model, (c.d_model, c.d_hidden)),
        b1=np.zeros(c.d_hidden, dtype),
        gamma=np.ones(c.d_hidden, dtype),
        beta=np.zeros(c.d_hidden, dtype),
        running_mean=np.zeros(c.d_hidden, dtype),
        running_var=np.ones(c.d_hidden, dtype),
        w2=uniform([1], c.d_hidden, (c.d_hidden, 1)),
        b2=np.zeros(1, dtype),
    )
    adapters = [LgmAdapter(uniform([2, i, 0], c.d_model, (c.d_model, c.r)),
                           uniform([2, i, 1], c.r, (c.r, c.d_head))) for i in range(c.k)]
    fan = max(c.k * c.d_head, 1)
    static = np.ones((c.k, c.d_head), dtype) if c.variant == "static_scaling" else None
    return HmcParams(c, gsg, adapters, uniform([3], fan, (c.k * c.d_head,)),
                     np.zeros(1, dtype), static)


def param_count(config: HmcConfig) -> dict[str, int]:
    """Trainable element counts and added FLOPs per segment.

    FLOPs count two per multiply-accumulate in every linear layer plus two
    per element for the steering product ``h * (1 + s * g)``.
    """
    c = config
    gsg = c.d_model * c.d_hidden + c.d_hidden + 2 * c.d_hidden + c.d_hidden * 1 + 1
    lgm = c.k * (c.d_model * c.r + c.r * c.d_head)
    scorer = c.k * c.d_head + 1
    static = c.k * c.d_head if c.variant == "static_scaling" else 0
    hmc_flops = (2 * (c.d_model * c.d_hidden + c.d_hidden)
                 + 2 * c.k * (c.d_model * c.r + c.r * c.d_head)
                 + 2 * c.k * c.d_head)
    scorer_flops = 2 * c.k * c.d_head
    return {
        "gsg": gsg,
        "lgm": lgm,
        "hmc": gsg + lgm,
        "static": static,
        "scorer": scorer,
        "total": gsg + lgm + static + scorer,
        "hmc_flops": hmc_flops,
        "scorer_flops": scorer_flops,
        "flops_per_inference": hmc_flops + scorer_flops,
    }


# ---------------------------------------------------------------------------
# forward passes

@dataclass
class GsgCache:
    mode: str
    c: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    pre_relu: np.ndarray
    act: np.ndarray
    s: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray


def _check_finite(name, a):
    if not np.isfinite(a).all():
        raise ValueError(f"{name} contains non-finite values")


def gsg_forward(params: GsgParams, c_batch: np.ndarray, mode: str = "eval"):
    """Linear -> BatchNorm -> ReLU -> Linear -> sigmoid, one score per row.

    Returns ``(s_global, cache)``. In train mode the cache carries the
    running statistics the batch would produce; nothing is written back.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    _check_finite("context", c_batch)
    x = c_batch @ params.w1 + params.b1
    if mode == "train":
        b = x.shape[0]
        if b < 2:
            raise ValueError("train-mode batch norm needs at least 2 rows")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + params.eps)
        m = params.momentum
        new_mean = (1 - m) * params.running_mean + m * mean
        new_var = (1 - m) * params.running_var + m * var * (b / (b - 1))
    else:
        mean = params.running_mean
        inv_std = 1.0 / np.sqrt(params.running_var + params.eps)
        new_mean, new_var = params.running_mean, params.running_var
    xhat = (x - mean) * inv_std
    pre = params.gamma * xhat + params.beta
    act = np.maximum(pre, 0)
    logit = act @ params.w2[:, 0] + params.b2[0]
    s = _sigmoid(logit)
    return s, GsgCache(mode, c_batch, xhat, inv_std, pre, act, s,
                       new_mean.astype(params.running_mean.dtype),
                       new_var.astype(params.running_var.dtype))


def apply_bn_update(params: GsgParams, cache: Optional[GsgCache]) -> None:
    if cache is not None and cache.mode == "train":
        params.running_mean[...] = cache.running_mean
        params.running_var[...] = cache.running_var


def lgm_forward(adapter: LgmAdapter, c_batch: np.ndarray):
    """``tanh(c @ w_down @ w_up)``; returns ``(g, bottleneck)``."""
    _check_finite("context", c_batch)
    z = c_batch @ adapter.w_down
    return np.tanh(z @ adapter.w_up), z


def steer(h, s_global, g, variant: str = "full", static_scale=None):
    """Rectify expert features.

    ``h`` and ``g`` are ``(..., K, d_head)``; ``s_global`` broadcasts against
    them (a scalar, or shape ``(B, 1, 1)`` for batches).
    """
    h = np.asarray(h)
    if variant in ("full", "no_gsg", "additive") and np.shape(g) != h.shape:
        raise ValueError(f"shape mismatch: h {h.shape} vs g {np.shape(g)}")
    if variant == "no_gsg":
        return h * (1 + g)
    if variant == "full":
        return h * (1 + s_global * g)
    if variant == "additive":
        return h + s_global * g
    if variant == "static_scaling":
        if static_scale is None or np.shape(static_scale) != h.shape[-2:]:
            raise ValueError("static_scaling needs a (K, d_head) scale")
        return h * static_scale
    if variant == "linear_probe":
        return h.copy()
    raise ValueError(f"unknown variant {variant!r}")


@dataclass
class HmcCache:
    h: np.ndarray
    s: np.ndarray
    g: np.ndarray
    z: list = field(default_factory=list)
    gsg: Optional[GsgCache] = None
    f_final: Optional[np.ndarray] = None


def hmc_forward(params: HmcParams, c_batch: np.ndarray, h_batch: np.ndarray, mode: str = "eval"):
    """Steer a batch of expert features.

    ``h_batch`` is ``(B, K, d_head)`` with experts in adapter order. Returns
    ``(signals, f_final, cache)`` where ``f_final`` is ``(B, K * d_head)``.
    """
    cfg = params.config
    c_batch = np.asarray(c_batch, dtype=params.dtype)
    h_batch = np.asarray(h_batch, dtype=params.dtype)
    b = h_batch.shape[0]
    if h_batch.shape[1:] != (cfg.k, cfg.d_head) or c_batch.shape != (b, cfg.d_model):
        raise ValueError(f"expected h (B, {cfg.k}, {cfg.d_head}) and c (B, {cfg.d_model}); "
                         f"got {h_batch.shape} and {c_batch.shape}")
    _check_finite("expert features", h_batch)
    _check_finite("context", c_batch)
    gsg_cache = None
    if cfg.uses_gsg:
        s, gsg_cache = gsg_forward(params.gsg, c_batch, mode)
    elif cfg.variant == "no_gsg":
        s = np.ones(b, dtype=params.dtype)
    else:
        s = np.zeros(b, dtype=params.dtype)
    g = np.zeros_like(h_batch)
    zs = []
    if cfg.uses_lgm:
        for i, adapter in enumerate(params.adapters):
            g[:, i], z = lgm_forward(adapter, c_batch)
            zs.append(z)
    h_prime = steer(h_batch, s[:, None, None], g, cfg.variant, params.static_scale)
    f_final = h_prime.reshape(b, cfg.k * cfg.d_head)
    cache = HmcCache(h_batch, s, g, zs, gsg_cache, f_final)
    return SteeringSignals(s, g, h_prime), f_final, cache


def scorer_logits(params: HmcParams, f_final: np.ndarray) -> np.ndarray:
    return f_final @ params.scorer_w + params.scorer_b[0]


def predict_proba(params: HmcParams, c_batch, h_batch) -> np.ndarray:
    """Eval-mode segment probabilities."""
    _, f, _ = hmc_forward(params, c_batch, h_batch, "eval")
    return _sigmoid(scorer_logits(params, f))


def _sigmoid(x):
    x = np.asarray(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


sigmoid = _sigmoid


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params: HmcParams, path, *, seed=None, epoch=None,
                    selected: Optional[Sequence] = None, extra: Optional[dict] = None) -> Path:
    """Single file: magic, u32 header length, JSON header, float32 LE blob."""
    tensors = params.tensors()
    header = {
        "format": "latent_steer.checkpoint",
        "version": 1,
        "config": dataclasses.asdict(params.config),
        "variant": params.config.variant,
        "seed": seed,
        "epoch": epoch,
        "bn": {"momentum": params.gsg.momentum, "eps": params.gsg.eps},
        "selected": [[int(h[0]), int(h[1])] for h in selected] if selected is not None else None,
        "fields": [{"name": n, "shape": list(a.shape)} for n, a in tensors],
    }
    if extra:
        header["extra"] = extra
    head = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", len(head)) + head)
        for _, a in tensors:
            fh.write(np.ascontiguousarray(a, dtype=_F32LE).tobytes())
    return path


def load_checkpoint(path) -> tuple[HmcParams, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + n])
    config = HmcConfig(**header["config"])
    skeleton = init_params(config, 0)
    arrays, off = {}, 8 + n
    for spec in header["fields"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arrays[spec["name"]] = np.frombuffer(raw, _F32LE, count, off).reshape(shape).astype(np.float32)
        off += 4 * count
    if off != len(raw):
        raise ValueError(f"{path}: blob length does not match header")
    params = _rebuild(skeleton, arrays)
    params.gsg.momentum = header["bn"]["momentum"]
    params.gsg.eps = header["bn"]["eps"]
    return params, header
