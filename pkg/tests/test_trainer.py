import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from latent_steer.featurebank import (BankError, BankMeta, HeadId, MissingLabelsError, SynthSpec,
                                      synth_bank)
from latent_steer.hmc import VARIANTS, HmcConfig, init_params, predict_proba
from latent_steer.trainer import (TrainConfig, TrainState, adam_step, backward, forward_loss,
                                  grad_check, loss, loss_and_grads, mean_gate, train)

MICRO = dict(d_model=6, d_hidden=3, d_head=4, k=2, r=2)


def micro_batch(seed=0, b=4):
    rng = np.random.default_rng(seed)
    y = np.array([0, 1] * (b // 2) + [0] * (b % 2), dtype=float)
    return rng.normal(size=(b, 6)), rng.normal(size=(b, 2, 4)), y


def planted_bank(seed=0, n=60, **kw):
    meta = BankMeta(d_model=8, d_head=4, n_layers=2, n_heads_per_layer=2)
    spec = SynthSpec(meta, n, n, ((HeadId(0, 1), 3.0), (HeadId(1, 0), 3.0)),
                     context_signal=2.0, seed=seed, **kw)
    return synth_bank(spec)


SEL = [HeadId(0, 1), HeadId(1, 0)]


# -- loss ------------------------------------------------------------------------

def test_loss_examples():
    assert loss([0.5], [1], [0.0], 0.0)["bce"] == pytest.approx(math.log(2), abs=1e-12)
    out = loss([0.5], [0], [0.6], 0.1)
    assert out["reg"] == pytest.approx(0.36)
    assert out["total"] - out["bce"] == pytest.approx(0.036)
    out = loss([0.7, 0.9], [1, 1], [0.9, 0.8], 5.0)
    assert out["reg"] == 0.0 and out["total"] == out["bce"]


def test_loss_reductions_and_clamp():
    p, y, s = [0.2, 0.9, 0.6], [0, 1, 0], [0.5, 0.1, 1.0]
    mean, total = loss(p, y, s, 1.0, "mean"), loss(p, y, s, 1.0, "sum")
    assert total["bce"] == pytest.approx(3 * mean["bce"])
    assert mean["reg"] == pytest.approx((0.25 + 1.0) / 2) and total["reg"] == pytest.approx(1.25)
    extreme = loss([0.0, 1.0], [1, 0], [0, 0])
    assert math.isfinite(extreme["bce"]) and extreme["bce"] == pytest.approx(-math.log(1e-7), rel=1e-6)
    with pytest.raises(ValueError):
        loss([], [], [])
    with pytest.raises(ValueError):
        loss([0.5], [1, 0], [0.0])


# -- gradients ----------------------------------------------------------------------

def test_linear_probe_gradient_is_logistic():
    cfg = HmcConfig(**MICRO, variant="linear_probe")
    p = init_params(cfg, 2, dtype=np.float64)
    c, h, y = micro_batch(1, 6)
    grads = backward(p, c, h, y, TrainConfig(lambda_reg=0.0))
    prob = predict_proba(p, c, h)
    assert grads["scorer.b"][0] == pytest.approx((prob - y).mean(), rel=1e-12)
    np.testing.assert_allclose(grads["scorer.w"], h.reshape(6, -1).T @ (prob - y) / 6, rtol=1e-12)
    for name, gr in grads.items():
        if not name.startswith("scorer"):
            assert not gr.any(), name


def test_zero_up_projection_kills_down_gradient():
    cfg = HmcConfig(**MICRO, variant="no_gsg")
    p = init_params(cfg, 0, dtype=np.float64)
    for ad in p.adapters:
        ad.w_up[...] = 0
    grads = backward(p, *micro_batch(), TrainConfig())
    for i in range(cfg.k):
        assert not grads[f"lgm.{i}.w_down"].any()
        assert grads[f"lgm.{i}.w_up"].any()


def test_backward_requires_train_mode():
    p = init_params(HmcConfig(**MICRO), dtype=np.float64)
    with pytest.raises(ValueError):
        backward(p, *micro_batch(), TrainConfig(), mode="eval")


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("reduction", ["mean", "sum"])
def test_grad_check_micro_config(variant, reduction):
    cfg = HmcConfig(**MICRO, variant=variant)
    for seed in range(3):
        p = init_params(cfg, seed, dtype=np.float64)
        err = grad_check(p, *micro_batch(seed), TrainConfig(lambda_reg=0.1, loss_reduction=reduction),
                         seed=seed)
        assert err < 1e-4, (variant, seed, err)


def test_grad_check_linear_probe_is_tight():
    p = init_params(HmcConfig(**MICRO, variant="linear_probe"), 1, dtype=np.float64)
    assert grad_check(p, *micro_batch(1), TrainConfig()) < 1e-7


def test_grad_check_second_order_in_delta():
    p = init_params(HmcConfig(**MICRO), 3, dtype=np.float64)
    data = micro_batch(3)
    coarse = grad_check(p, *data, TrainConfig(), delta=1e-4)
    fine = grad_check(p, *data, TrainConfig(), delta=5e-5)
    assert fine <= 4 * coarse + 1e-9


def test_grad_check_eval_mode_single_sample():
    p = init_params(HmcConfig(**MICRO), 3, dtype=np.float64)
    p.gsg.running_var[...] = 0.7
    c, h, _ = micro_batch(2, 1)
    assert grad_check(p, c, h, np.array([0.0]), TrainConfig()) < 1e-4


def test_grad_check_reports_probes():
    p = init_params(HmcConfig(**MICRO), 0, dtype=np.float64)
    err, info = grad_check(p, *micro_batch(), TrainConfig(), return_details=True)
    names = {r[0] for r in info["probes"]}
    assert {"gsg.b2", "scorer.b"} <= names and "gsg.b1" not in names
    # the micro config is smaller than the probe budget, so every entry is probed
    total = sum(a.size for n, a in p.trainable().items() if n != "gsg.b1")
    assert len(info["probes"]) + info["rejected"] == total
    assert err == max(r[4] for r in info["probes"])


@given(st.integers(0, 2**31), st.floats(-3, 3))
def test_train_mode_loss_ignores_pre_norm_bias(seed, shift):
    p = init_params(HmcConfig(**MICRO), seed % 1000, dtype=np.float64)
    c, h, y = micro_batch(seed % 997)
    base = forward_loss(p, c, h, y, TrainConfig())[0]["total"]
    p.gsg.b1[...] += shift
    moved = forward_loss(p, c, h, y, TrainConfig())[0]["total"]
    assert moved == pytest.approx(base, rel=1e-12, abs=1e-13)
    assert not loss_and_grads(p, c, h, y, TrainConfig())[1]["gsg.b1"].any()


def test_regularizer_feeds_gate_gradient():
    # with the scorer weight at zero the only signal reaching the gate is the penalty
    p = init_params(HmcConfig(**MICRO), 0, dtype=np.float64)
    p.scorer_w[...] = 0
    c, h, y = micro_batch()
    g0 = loss_and_grads(p, c, h, y, TrainConfig(lambda_reg=0.0))[1]
    g1 = loss_and_grads(p, c, h, y, TrainConfig(lambda_reg=1.0))[1]
    assert not g0["gsg.b2"].any()
    assert g1["gsg.b2"][0] > 0


# -- Adam ---------------------------------------------------------------------------------

def test_adam_zero_gradient_keeps_params_and_decays_moments():
    cfg = TrainConfig()
    p = init_params(HmcConfig(**MICRO), 0)
    before = {n: a.copy() for n, a in p.trainable().items()}
    state = TrainState.zeros_like(p)
    state.m["scorer.b"][...] = 1.0
    state.v["scorer.b"][...] = 1.0
    adam_step(p, {n: np.zeros_like(a) for n, a in p.trainable().items()}, state, cfg)
    assert state.step == 1
    assert state.m["scorer.b"][0] == pytest.approx(0.9)
    assert state.v["scorer.b"][0] == pytest.approx(0.999)
    for n, a in p.trainable().items():
        if n != "scorer.b":
            np.testing.assert_array_equal(a, before[n])


@pytest.mark.parametrize("g", [0.37, -2.5, 1e-3])
def test_adam_first_step_moves_by_learning_rate(g):
    cfg = TrainConfig(learning_rate=1e-3)
    p = init_params(HmcConfig(**MICRO), 0, dtype=np.float64)
    grads = {n: np.zeros_like(a) for n, a in p.trainable().items()}
    grads["scorer.b"][0] = g
    adam_step(p, grads, TrainState.zeros_like(p), cfg)
    assert p.scorer_b[0] == pytest.approx(-1e-3 * np.sign(g), rel=1e-4)


def test_adam_rejects_mismatched_grads():
    p = init_params(HmcConfig(**MICRO), 0)
    with pytest.raises(ValueError):
        adam_step(p, {"scorer.b": np.zeros(1)}, TrainState.zeros_like(p), TrainConfig())


# -- training loop -------------------------------------------------------------------------

def test_zero_epochs_returns_initial_params():
    bank = planted_bank()
    out = train(bank, SEL, TrainConfig(epochs=0), seed=4)
    ref = init_params(HmcConfig(d_model=8, d_head=4, k=2), 4)
    for (n, a), (_, b) in zip(out["params"].tensors(), ref.tensors()):
        assert a.tobytes() == b.tobytes(), n
    assert out["state"].loss_history == []


def test_training_reduces_loss_and_is_deterministic(tmp_path):
    bank = planted_bank(n=65)  # 130 rows: the last batch of two still runs in train mode
    cfg = TrainConfig(epochs=30, shuffle_seed=3)
    context_before = bank.context.tobytes()
    a = train(bank, SEL, cfg, seed=1, log_path=tmp_path / "log.jsonl")
    b = train(bank, SEL, cfg, seed=1)
    assert bank.context.tobytes() == context_before
    hist = a["state"].loss_history
    assert hist[-1]["total"] < hist[0]["total"]
    for (n, x), (_, y) in zip(a["params"].tensors(), b["params"].tensors()):
        assert x.tobytes() == y.tobytes(), n
    lines = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert len(lines) == 30
    assert set(lines[0]) == {"epoch", "bce", "reg", "total", "s_global_normal", "s_global_anomalous"}


def test_trailing_single_sample_batch():
    bank = planted_bank(n=50).take(range(65))
    out = train(bank, SEL, TrainConfig(epochs=2), seed=0)
    assert len(out["state"].loss_history) == 2


def test_moment_buffers_match_parameter_shapes():
    out = train(planted_bank(), SEL, TrainConfig(epochs=1))
    p, st_ = out["params"], out["state"]
    for n, a in p.trainable().items():
        assert st_.m[n].shape == a.shape and st_.v[n].shape == a.shape


def test_regularizer_lowers_gate_on_normals():
    bank = planted_bank(seed=2)
    strong = train(bank, SEL, TrainConfig(epochs=60, lambda_reg=10.0), seed=0)["params"]
    none = train(bank, SEL, TrainConfig(epochs=60, lambda_reg=0.0), seed=0)["params"]
    assert mean_gate(strong, bank, SEL, 0) < mean_gate(none, bank, SEL, 0)


def test_train_errors():
    bank = planted_bank()
    with pytest.raises(BankError):
        train(bank, [HeadId(0, 0), HeadId(5, 5)], TrainConfig(epochs=1))
    unlabeled = bank.take(range(10))
    import dataclasses
    unlabeled = dataclasses.replace(unlabeled, records=tuple(dataclasses.replace(r, label=None)
                                                             for r in unlabeled.records))
    with pytest.raises(MissingLabelsError):
        train(unlabeled, SEL, TrainConfig(epochs=1))
    normals = bank.take(np.flatnonzero(bank.labels() == 0))
    with pytest.raises(BankError):
        train(normals, SEL, TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train(bank, SEL, TrainConfig(epochs=1), HmcConfig(d_model=9, d_head=4, k=2))
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(loss_reduction="max")
