"""Acceptance criteria, one test each.

Every test prints a single ``[PASS]`` or ``[FAIL]`` line with the measured
numbers before asserting, so the verdicts are visible without ``-s``.
"""

import filecmp
import functools
import itertools
import math
import time

import numpy as np
import pytest

import oracles
from conftest import make_bank
from latent_steer.featurebank import BankMeta, HeadId, SynthSpec, synth_bank
from latent_steer.hmc import VARIANTS, HmcConfig, init_params, param_count
from latent_steer.metrics import average_precision, evaluate_curves, roc_auc
from latent_steer.pipeline import RunConfig, calibration_set, fit, make_banks, run_pipeline, select
from latent_steer.rsa import RsaConfig, head_stats, rank_heads, rsa_score, variance_form_score
from latent_steer.scorer import InferenceConfig, infer, smooth
from latent_steer.trainer import TrainConfig, grad_check, mean_gate

pytestmark = pytest.mark.slow


@pytest.fixture
def criterion(capsys):
    def check(name, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"
    return check


@functools.lru_cache(maxsize=None)
def default_run(seed: int, variant: str, lambda_reg: float = 0.1):
    """synth -> select -> train -> infer -> eval on the default run config."""
    t0 = time.perf_counter()
    cfg = RunConfig().with_overrides({"seed": seed, "hmc.variant": variant,
                                      "train.lambda_reg": lambda_reg})
    calib, holdout = make_banks(cfg)
    report = select(calib, cfg)
    params = fit(calib, report.selected, cfg)["params"]
    ev = evaluate_curves(infer(holdout, params, report.selected, cfg.inference_config()))
    elapsed = time.perf_counter() - t0
    normals = holdout.take(np.flatnonzero(holdout.labels() == 0))
    gate = mean_gate(params, normals, report.selected, 0)
    return {"auc": ev.auc, "ap": ev.ap, "seconds": elapsed, "gate_normal": gate}


def test_parameter_accounting(criterion):
    t0 = time.perf_counter()
    pc = param_count(HmcConfig())
    params = init_params(HmcConfig())
    stored = {
        "gsg": sum(a.size for n, a in params.trainable().items() if n.startswith("gsg.")),
        "lgm": sum(a.size for n, a in params.trainable().items() if n.startswith("lgm.")),
        "scorer": params.scorer_w.size + params.scorer_b.size,
    }
    ms = 1e3 * (time.perf_counter() - t0)
    want = {"gsg": 459_265, "lgm": 59_392, "scorer": 513, "total": 519_170,
            "flops_per_inference": 1_038_592}
    got = {k: pc[k] for k in want}
    ok = got == want and stored == {k: want[k] for k in stored} and sum(stored.values()) == want["total"]
    criterion("parameter accounting", ok, f"counted={got} stored={stored} ({ms:.1f} ms)")


def test_rsa_form_equivalence(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(20)
    worst = 0.0
    for _ in range(50):
        n, d = int(rng.integers(2, 30)), int(rng.integers(1, 9))
        x = rng.normal(size=(2 * n, d)) * rng.uniform(0.1, 10) + rng.uniform(-5, 5, size=d)
        x[n:] += rng.normal(size=d)
        s = head_stats(make_bank({(0, 0): x}, [0] * n + [1] * n), HeadId(0, 0))
        a, b = rsa_score(s, 1e-8), variance_form_score(s, 1e-8)
        worst = max(worst, abs(a - b) / abs(a))
    secs = time.perf_counter() - t0
    criterion("RSA scatter/variance equivalence", worst <= 1e-10 and secs < 1.0,
              f"max relative gap {worst:.2e} over 50 banks ({secs:.2f} s)")


def test_gradient_suite(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    worst, n_cfg, where = 0.0, 0, None
    for variant, reduction, lam in itertools.product(VARIANTS, ("mean", "sum"), (0.0, 0.1, 10.0)):
        d_model, d_head = int(rng.integers(3, 9)), int(rng.integers(2, 6))
        cfg = HmcConfig(d_model=d_model, d_hidden=int(rng.integers(2, 7)), d_head=d_head,
                        k=int(rng.integers(1, 4)), r=int(rng.integers(1, 3)), variant=variant)
        b = int(rng.integers(3, 9))
        seed = int(rng.integers(1 << 30))
        params = init_params(cfg, seed, dtype=np.float64)
        c = rng.normal(size=(b, d_model))
        h = rng.normal(size=(b, cfg.k, d_head))
        y = np.array([0, 1] + list(rng.integers(0, 2, size=b - 2)), dtype=float)
        err = grad_check(params, c, h, y, TrainConfig(lambda_reg=lam, loss_reduction=reduction),
                         seed=seed)
        n_cfg += 1
        if err > worst:
            worst, where = err, (variant, reduction, lam)
    secs = time.perf_counter() - t0
    criterion("gradient suite", worst < 1e-4 and n_cfg >= 20 and secs < 30,
              f"{n_cfg} configs, max relative error {worst:.2e} at {where} ({secs:.1f} s)")


def test_planted_expert_recovery(criterion):
    t0 = time.perf_counter()
    meta = BankMeta(d_model=16, d_head=16, n_layers=4, n_heads_per_layer=4)
    misses, disagreements = [], []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        picks = rng.choice(16, 2, replace=False)
        planted = tuple(HeadId(int(i) // 4, int(i) % 4) for i in picks)
        spec = SynthSpec(meta, 200, 200, tuple((h, 4.0) for h in planted), noise_sigma=1.0,
                         segments_per_video=1, seed=seed)
        bank = synth_bank(spec)
        chosen = {m: set(rank_heads(bank, RsaConfig(k=2, metric=m)).selected)
                  for m in ("rsa", "silhouette", "knn_purity")}
        if chosen["rsa"] != set(planted):
            misses.append(seed)
        if len({frozenset(v) for v in chosen.values()}) != 1:
            disagreements.append(seed)
    secs = time.perf_counter() - t0
    criterion("planted-expert recovery", not misses and not disagreements and secs < 30,
              f"10 seeds at delta=4 sigma, missed={misses} metric disagreements={disagreements} "
              f"({secs:.1f} s)")


def test_end_to_end_separation(criterion):
    full = default_run(0, "full")
    probe = default_run(0, "linear_probe")
    ok = full["auc"] >= 0.95 and full["auc"] >= probe["auc"] and full["seconds"] < 60
    criterion("end-to-end separation", ok,
              f"held-out frame AUC full={full['auc']:.4f} linear_probe={probe['auc']:.4f} "
              f"(full chain {full['seconds']:.1f} s)")


def test_ablation_ordering(criterion):
    seeds = range(5)
    auc = {v: [default_run(s, v)["auc"] for s in seeds] for v in ("full", "no_gsg", "static_scaling")}
    mean = {v: float(np.mean(a)) for v, a in auc.items()}
    ok = mean["full"] >= mean["no_gsg"] and mean["full"] >= mean["static_scaling"]
    per_seed = " ".join(f"{v}={np.round(a, 4).tolist()}" for v, a in auc.items())
    criterion("ablation ordering", ok,
              f"mean AUC over 5 seeds full={mean['full']:.5f} no_gsg={mean['no_gsg']:.5f} "
              f"static_scaling={mean['static_scaling']:.5f}; {per_seed}")


def test_regularizer_effect(criterion):
    strong = default_run(0, "full", 10.0)["gate_normal"]
    none = default_run(0, "full", 0.0)["gate_normal"]
    criterion("regularizer effect", strong < none,
              f"mean eval-mode s_global on held-out normals: lambda=10 {strong:.4f}, "
              f"lambda=0 {none:.4f}")


def test_smoothing_properties(criterion):
    rng = np.random.default_rng(11)
    failures = []
    for case in range(1000):
        n = int(rng.integers(1, 120))
        sigma = float(rng.uniform(0.2, 15))
        cfg = InferenceConfig(sigma_g=sigma)
        x = rng.uniform(size=n) if case % 3 else np.round(rng.uniform(size=n))
        out = smooth(x, cfg)
        if not ((out >= x.min() - 1e-12) & (out <= x.max() + 1e-12)).all():
            failures.append((case, "bound"))
        c = float(rng.uniform())
        if np.max(np.abs(smooth(np.full(n, c), cfg) - c)) > 1e-12:
            failures.append((case, "constant"))
        if np.max(np.abs(smooth(x[::-1], cfg)[::-1] - out)) > 1e-12:
            failures.append((case, "symmetry"))
        t = int(rng.integers(n))
        weights = np.array([smooth(np.eye(n)[j], cfg)[t] for j in range(n)]) if n <= 40 else None
        if weights is not None:
            ref = np.array(oracles.smooth_weights(n, t, sigma))
            if (weights < 0).any() or abs(weights.sum() - 1) > 1e-9 or np.max(np.abs(weights - ref)) > 1e-12:
                failures.append((case, "weights"))
    criterion("smoothing properties", not failures,
              f"1000 random cases, failures={failures[:5]}{'...' if len(failures) > 5 else ''}")


def test_metric_oracles(criterion):
    rng = np.random.default_rng(3)
    alphabet = np.array([0.0, 0.2, 0.2, 0.5, 0.7, 0.9, 1.0])
    worst, cases = 0.0, 0
    for n in range(1, 13):
        for bits in range(1, 2 ** n):
            y = [(bits >> i) & 1 for i in range(n)]
            s = rng.choice(alphabet, size=n).tolist()
            worst = max(worst, abs(average_precision(s, y) - oracles.ap_threshold_sweep(s, y)))
            if 0 < sum(y) < n:
                worst = max(worst, abs(roc_auc(s, y) - oracles.auc_pairs(s, y)))
            cases += 1
    hand_auc = roc_auc([0.9, 0.1, 0.8, 0.2], [1, 0, 0, 1])
    hand_ap = average_precision([4, 3, 2, 1], [1, 0, 1, 0])
    ok = worst <= 1e-12 and hand_auc == 0.75 and abs(hand_ap - 5 / 6) <= 1e-12
    criterion("metric oracles", ok,
              f"{cases} labelings up to length 12, max gap {worst:.1e}; "
              f"hand AUC {hand_auc}, hand AP {hand_ap:.6f}")


def test_pipeline_determinism(criterion, tmp_path):
    cfg = RunConfig()
    run_pipeline(cfg, tmp_path / "a")
    run_pipeline(cfg, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    differ = [str(f) for f in files if not filecmp.cmp(tmp_path / "a" / f, tmp_path / "b" / f,
                                                       shallow=False)]
    kinds = {f.suffix for f in files}
    other = sorted(str(p.relative_to(tmp_path / "b")) for p in (tmp_path / "b").rglob("*")
                   if p.is_file() and p.relative_to(tmp_path / "b") not in set(files))
    ok = not differ and not other and {".lsck", ".json", ".csv", ".svg"} <= kinds
    criterion("pipeline determinism", ok,
              f"{len(files)} files compared byte for byte, differing={differ} extra={other}")
