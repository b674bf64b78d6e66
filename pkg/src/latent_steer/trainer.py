"""Training the controller and scorer with hand-written gradients and Adam."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .featurebank import BankError, FeatureBank, HeadId, MissingLabelsError
from .hmc import (HmcCache, HmcConfig, HmcParams, apply_bn_update, hmc_forward,
                  init_params, scorer_logits, sigmoid)

logger = logging.getLogger(__name__)

P_CLAMP = 1e-7
REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    batch_size: int = 64
    learning_rate: float = 1e-3
    lambda_reg: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    shuffle_seed: int = 0
    loss_reduction: str = "mean"

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.lambda_reg < 0:
            raise ValueError("lambda_reg must be non-negative")
        if self.loss_reduction not in REDUCTIONS:
            raise ValueError(f"loss_reduction must be one of {REDUCTIONS}")


@dataclass
class TrainState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    loss_history: list[dict] = field(default_factory=list)

    @classmethod
    def zeros_like(cls, params: HmcParams) -> "TrainState":
        tr = params.trainable()
        return cls(0, {n: np.zeros_like(a) for n, a in tr.items()},
                   {n: np.zeros_like(a) for n, a in tr.items()})


def loss(p, y, s_global, lambda_reg: float = 0.1, reduction: str = "mean") -> dict[str, float]:
    """Cross-entropy plus the squared-gate penalty on normal samples."""
    p, y, s = np.asarray(p, np.float64), np.asarray(y, np.float64), np.asarray(s_global, np.float64)
    if p.size == 0:
        raise ValueError("empty batch")
    if not p.shape == y.shape == s.shape:
        raise ValueError("p, y and s_global must have the same length")
    pc = np.clip(p, P_CLAMP, 1 - P_CLAMP)
    per = -(y * np.log(pc) + (1 - y) * np.log(1 - pc))
    normal = y == 0
    if reduction == "mean":
        bce = per.mean()
        reg = (s[normal] ** 2).mean() if normal.any() else 0.0
    elif reduction == "sum":
        bce = per.sum()
        reg = (s[normal] ** 2).sum()
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return {"bce": float(bce), "reg": float(reg), "total": float(bce + lambda_reg * reg)}


def _loss_terms(p, y, s, lambda_reg, reduction):
    """Loss dict plus d(total)/d(logit) and d(reg term)/d(s)."""
    out = loss(p, y, s, lambda_reg, reduction)
    pc = np.clip(p, P_CLAMP, 1 - P_CLAMP)
    normal = (y == 0).astype(p.dtype)
    if reduction == "mean":
        dz = (pc - y) / len(y)
        ds = lambda_reg * 2 * s * normal / max(normal.sum(), 1)
    else:
        dz = pc - y
        ds = lambda_reg * 2 * s * normal
    return out, dz.astype(p.dtype), ds.astype(p.dtype)


def forward_loss(params: HmcParams, c_batch, h_batch, y_batch, config: TrainConfig, mode="train"):
    """Forward pass and loss without gradients. Returns ``(loss_dict, cache, p)``."""
    _, f, cache = hmc_forward(params, c_batch, h_batch, mode)
    p = sigmoid(scorer_logits(params, f))
    y = np.asarray(y_batch, dtype=params.dtype)
    return loss(p, y, cache.s, config.lambda_reg, config.loss_reduction), cache, p


def loss_and_grads(params: HmcParams, c_batch, h_batch, y_batch, config: TrainConfig,
                   mode: str = "train"):
    """Total loss and its exact gradient for every trainable tensor.

    Returns ``(loss_dict, grads, cache)``; ``grads`` is keyed like
    :meth:`HmcParams.trainable`. Parameters a variant does not use receive
    zero gradient.
    """
    cfg = params.config
    signals, f, cache = hmc_forward(params, c_batch, h_batch, mode)
    y = np.asarray(y_batch, dtype=params.dtype)
    p = sigmoid(scorer_logits(params, f))
    out, dz, ds_reg = _loss_terms(p, y, cache.s, config.lambda_reg, config.loss_reduction)
    grads = {n: np.zeros_like(a) for n, a in params.trainable().items()}

    grads["scorer.w"] = f.T @ dz
    grads["scorer.b"] = np.array([dz.sum()], dtype=params.dtype)
    b = len(y)
    dh_prime = (dz[:, None] * params.scorer_w[None, :]).reshape(b, cfg.k, cfg.d_head)
    h, s, g = cache.h, cache.s, cache.g

    dg = ds = None
    if cfg.variant == "full":
        dg = dh_prime * h * s[:, None, None]
        ds = (dh_prime * h * g).sum(axis=(1, 2)) + ds_reg
    elif cfg.variant == "additive":
        dg = dh_prime * s[:, None, None]
        ds = (dh_prime * g).sum(axis=(1, 2)) + ds_reg
    elif cfg.variant == "no_gsg":
        dg = dh_prime * h
    elif cfg.variant == "static_scaling":
        grads["static_scale"] = (dh_prime * h).sum(axis=0)

    if dg is not None:
        c = cache.gsg.c if cache.gsg is not None else np.asarray(c_batch, params.dtype)
        for i, adapter in enumerate(params.adapters):
            da = dg[:, i] * (1 - g[:, i] ** 2)
            grads[f"lgm.{i}.w_up"] = cache.z[i].T @ da
            grads[f"lgm.{i}.w_down"] = c.T @ (da @ adapter.w_up.T)

    if ds is not None:
        gc, gp = cache.gsg, params.gsg
        dlogit = ds * s * (1 - s)
        grads["gsg.w2"] = gc.act.T @ dlogit[:, None]
        grads["gsg.b2"] = np.array([dlogit.sum()], dtype=params.dtype)
        dpre = dlogit[:, None] * gp.w2[:, 0][None, :] * (gc.pre_relu > 0)
        grads["gsg.gamma"] = (dpre * gc.xhat).sum(axis=0)
        grads["gsg.beta"] = dpre.sum(axis=0)
        dxhat = dpre * gp.gamma
        if gc.mode == "train":
            dx = gc.inv_std / b * (b * dxhat - dxhat.sum(axis=0)
                                   - gc.xhat * (dxhat * gc.xhat).sum(axis=0))
            grads["gsg.w1"] = gc.c.T @ dx
            # batch statistics cancel any shift of the pre-norm bias exactly
            grads["gsg.b1"] = np.zeros_like(gp.b1)
        else:
            dx = dxhat * gc.inv_std
            grads["gsg.w1"] = gc.c.T @ dx
            grads["gsg.b1"] = dx.sum(axis=0)

    for name, gr in grads.items():
        if not np.isfinite(gr).all():
            raise FloatingPointError(f"non-finite gradient for {name}")
    return out, grads, cache


def backward(params: HmcParams, c_batch, h_batch, y_batch, config: TrainConfig,
             mode: str = "train") -> dict[str, np.ndarray]:
    """Gradients of the total loss; train-mode batch statistics by default."""
    if mode != "train":
        raise ValueError("backward expects a train-mode forward (batch statistics)")
    return loss_and_grads(params, c_batch, h_batch, y_batch, config, mode)[1]


def adam_step(params: HmcParams, grads: dict[str, np.ndarray], state: TrainState,
              config: TrainConfig) -> tuple[HmcParams, TrainState]:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    trainable = params.trainable()
    if grads.keys() != trainable.keys():
        raise ValueError("gradient keys do not match parameters")
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    bc1, bc2 = 1 - b1 ** t, 1 - b2 ** t
    for name, theta in trainable.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter {theta.shape}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        step = config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.adam_eps)
        theta -= step.astype(theta.dtype)
    return params, state


def _training_arrays(bank: FeatureBank, selected: Sequence[HeadId]):
    if not bank.has_labels:
        raise MissingLabelsError("training needs a labeled bank")
    missing = [h for h in selected if h not in bank.head_features]
    if missing:
        raise BankError(f"bank lacks selected heads {missing}")
    y = bank.labels()
    if (y == 0).all() or (y == 1).all():
        raise BankError("training needs both classes")
    return bank.context, bank.stacked(list(selected)), y


def train(bank: FeatureBank, selected: Sequence[HeadId], config: TrainConfig = TrainConfig(),
          hmc_config: Optional[HmcConfig] = None, seed: int = 0, log_path=None):
    """Mini-batch training of controller and scorer.

    Returns ``{"params": HmcParams, "state": TrainState}``. A trailing batch
    of one sample runs batch norm with running statistics.
    """
    selected = [HeadId(*h) for h in selected]
    c_all, h_all, y_all = _training_arrays(bank, selected)
    if hmc_config is None:
        hmc_config = HmcConfig(d_model=bank.meta.d_model, d_head=bank.meta.d_head, k=len(selected))
    if (hmc_config.d_model, hmc_config.d_head, hmc_config.k) != \
            (bank.meta.d_model, bank.meta.d_head, len(selected)):
        raise ValueError("HmcConfig dimensions do not match the bank and selected heads")
    params = init_params(hmc_config, seed)
    state = TrainState.zeros_like(params)
    rng = np.random.default_rng(np.random.SeedSequence([config.shuffle_seed & (2**64 - 1), 0x5F]))
    n = len(y_all)
    log_fh = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(config.epochs):
            perm = rng.permutation(n)
            sums = np.zeros(3)
            s_norm, s_anom = [], []
            for start in range(0, n, config.batch_size):
                idx = perm[start:start + config.batch_size]
                mode = "train" if len(idx) >= 2 else "eval"
                out, grads, cache = loss_and_grads(params, c_all[idx], h_all[idx], y_all[idx],
                                                   config, mode)
                apply_bn_update(params.gsg, cache.gsg)
                adam_step(params, grads, state, config)
                sums += len(idx) * np.array([out["bce"], out["reg"], out["total"]])
                s_norm.append(cache.s[y_all[idx] == 0])
                s_anom.append(cache.s[y_all[idx] == 1])
            sn, sa = np.concatenate(s_norm), np.concatenate(s_anom)
            record = {
                "epoch": epoch,
                "bce": sums[0] / n,
                "reg": sums[1] / n,
                "total": sums[2] / n,
                "s_global_normal": float(sn.mean()) if sn.size else None,
                "s_global_anomalous": float(sa.mean()) if sa.size else None,
            }
            state.loss_history.append(record)
            if log_fh is not None:
                log_fh.write(json.dumps(record) + "\n")
            if epoch % 100 == 0 or epoch == config.epochs - 1:
                logger.debug("epoch %d total %.5f", epoch, record["total"])
    finally:
        if log_fh is not None:
            log_fh.close()
    return {"params": params, "state": state}


def mean_gate(params: HmcParams, bank: FeatureBank, selected: Sequence[HeadId], label: int) -> float:
    """Mean eval-mode gate output over the bank's samples of one class."""
    y = bank.labels()
    rows = np.flatnonzero(y == label)
    _, _, cache = hmc_forward(params, bank.context[rows], bank.stacked(list(selected))[rows], "eval")
    return float(cache.s.mean())


# ---------------------------------------------------------------------------
# finite-difference oracle

def _relu_pattern(cache: HmcCache):
    return None if cache.gsg is None else cache.gsg.pre_relu > 0


def grad_check(params: HmcParams, c_batch, h_batch, y_batch, config: TrainConfig,
               delta: float = 1e-5, n_probes: int = 200, seed: int = 0,
               floor: float = 1e-12, return_details: bool = False):
    """Max relative error between analytic and central-difference gradients.

    Runs in float64 on a copy of ``params``. Every scalar parameter is probed
    plus ``n_probes`` sampled entries of the larger tensors. Probes whose
    perturbation flips any ReLU in the gate are discarded, since the loss is
    not differentiable there. In train mode the pre-norm bias ``gsg.b1`` is
    skipped: the loss is exactly invariant to it, so a finite difference
    only measures roundoff. ``floor`` is the smallest magnitude used in the
    relative-error denominator.
    """
    p64 = params.astype(np.float64)
    c = np.asarray(c_batch, np.float64)
    h = np.asarray(h_batch, np.float64)
    y = np.asarray(y_batch, np.float64)
    mode = "train" if len(y) >= 2 else "eval"
    _, grads, cache = loss_and_grads(p64, c, h, y, config, mode)
    base_pattern = _relu_pattern(cache)

    trainable = p64.trainable()
    if mode == "train":
        trainable.pop("gsg.b1")
    scalars = [(n, 0) for n, a in trainable.items() if a.size == 1]
    pool = [(n, i) for n, a in trainable.items() if a.size > 1 for i in range(a.size)]
    rng = np.random.default_rng(seed)
    if len(pool) > n_probes:
        pool = [pool[i] for i in np.sort(rng.choice(len(pool), n_probes, replace=False))]
    worst, rows, rejected = 0.0, [], 0
    for name, i in scalars + pool:
        theta = trainable[name].reshape(-1)
        orig = theta[i]
        values, ok = [], True
        for sign in (1, -1):
            theta[i] = orig + sign * delta
            out, cache_d, _ = forward_loss(p64, c, h, y, config, mode)
            pat = _relu_pattern(cache_d)
            if pat is not None and not np.array_equal(pat, base_pattern):
                ok = False
            values.append(out["total"])
        theta[i] = orig
        if not ok:
            rejected += 1
            continue
        numeric = (values[0] - values[1]) / (2 * delta)
        analytic = float(grads[name].reshape(-1)[i])
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        rows.append((name, i, analytic, numeric, err))
        worst = max(worst, err)
    if return_details:
        return worst, {"probes": rows, "rejected": rejected}
    return worst
