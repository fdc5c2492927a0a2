"""Acceptance gate: one PASS/FAIL line per criterion, at the stated tolerances.

The desk-scale runs (criteria 5, 6, 7, 9) take most of an hour on one CPU.
"""

import math
import time

import numpy as np
import pytest

from metanet import autodiff as ad
from metanet.cli import gradcheck, main
from metanet.datasets import gen_synthetic_glyphs, save_dataset, split_classes
from metanet.episodes import Episode, TrialPlan, make_trials
from metanet.model import MetaNet, ModelConfig, VariantConfig, as_constants, attention_weights
from metanet.training import (
    ContinualSetup,
    Trainer,
    evaluate,
    params_digest,
    pixel_knn,
    problem_b_dataset,
    protocol_continual,
    protocol_xway,
    xway_model,
)

from acceptance_log import record
from oracles import OP_CASES, max_op_error

SEED = 1
EPISODES = 2000
TRIALS = 400


@pytest.fixture(scope="session")
def glyphs():
    ds = gen_synthetic_glyphs(120, 20, seed=7)
    return split_classes(ds, 100, 20)


@pytest.fixture(scope="session")
def test_trials(glyphs):
    return make_trials(glyphs[1], TrialPlan(TRIALS, 5, 1, 75, seed=0))


def train_variant(variant, train):
    t0 = time.perf_counter()
    trainer = Trainer.fresh(ModelConfig(variant=VariantConfig(variant)), train, seed=SEED)
    trainer.run(EPISODES)
    return trainer, time.perf_counter() - t0


@pytest.fixture(scope="session")
def standard_run(glyphs):
    return train_variant("standard", glyphs[0])


def test_c1_op_gradients():
    t0 = time.perf_counter()
    worst = {kind: max_op_error(kind, instances=100, seed=0) for kind in sorted(OP_CASES)}
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = max(worst.values()) < 1e-4 and elapsed < 60 and set(OP_CASES) == set(ad.op_kinds())
    record(1, ok, f"{len(worst)} ops x 100 instances, max rel err {worst[top]:.2e} ({top}) < 1e-4, "
                  f"{elapsed:.1f}s < 60s")
    assert ok


def test_c2_end_to_end_meta_gradient():
    t0 = time.perf_counter()
    rep = gradcheck("standard", "raw", seed=0)
    elapsed = time.perf_counter() - t0
    groups = rep["groups"]
    ok = (set(groups) == {"W", "Q", "Z", "G"} and rep["ok"] and elapsed < 300
          and all(g["max_rel_error"] < 1e-3 and g["grad_norm"] > 0 for g in groups.values()))
    detail = ", ".join(f"{k} err {g['max_rel_error']:.1e} |g| {g['grad_norm']:.1e}" for k, g in groups.items())
    record(2, ok, f"N=3 L=3 tiny model (init draw {rep['draw']}): {detail}; {elapsed:.0f}s < 300s")
    assert ok


def test_c3_zero_fast_weight_identity():
    rng = np.random.default_rng(0)
    worst = 0.0
    for variant in ("minus", "standard", "plus"):
        model = MetaNet(ModelConfig(variant=VariantConfig(variant)))
        params = model.init_params(rng)
        params = {k: (np.zeros_like(v) if k.startswith(("Z.", "G.")) else v) for k, v in params.items()}
        P = as_constants(params)
        support = Episode(rng.uniform(0, 1, (5, 28, 28)), np.arange(5), rng.uniform(0, 1, (1, 28, 28)),
                          np.zeros(1, int), np.arange(5), np.arange(5), np.arange(1))
        memory = model.build_memory(P, support, rng)
        x = rng.uniform(0, 1, (1000, 28, 28))
        full = model.predict(P, memory, x)
        slow = ad.softmax(model.slow_only_logits(P, x)).data
        worst = max(worst, float(np.abs(full - slow).max()))
    ok = worst <= 1e-12
    record(3, ok, f"3 variants x 1000 inputs, max |p_full - p_slow| = {worst:.1e} <= 1e-12")
    assert ok


def test_c4_attention_normalisation():
    rng = np.random.default_rng(0)
    worst_sum, min_w = 0.0, 1.0
    for _ in range(1000):
        n, d = rng.integers(1, 65), rng.integers(1, 33)
        R = rng.normal(size=(n, d))
        r = rng.normal(size=(3, d))
        w = attention_weights(R, r)
        worst_sum = max(worst_sum, float(np.abs(w.sum(-1) - 1).max()))
        min_w = min(min_w, float(w.min()))
    closed = np.array([math.e / (math.e + 1), 1 / (math.e + 1)])
    two = attention_weights(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1.0, 0.0]))[0]
    err2 = float(np.abs(two - closed).max())
    ok = worst_sum <= 1e-6 and min_w >= 0 and err2 <= 1e-9
    record(4, ok, f"1000 memories: max |sum-1| {worst_sum:.1e} <= 1e-6, min weight {min_w:.1e} >= 0; "
                  f"orthogonal two-slot err {err2:.1e} <= 1e-9")
    assert ok


def test_c5_desk_scale_one_shot(standard_run, test_trials):
    trainer, train_s = standard_run
    t0 = time.perf_counter()
    res = evaluate(trainer.model, trainer.params, test_trials, seed=0)
    elapsed = train_s + time.perf_counter() - t0
    knn = pixel_knn(test_trials)
    ok = res.mean_acc >= knn.mean_acc + 0.15 and res.mean_acc >= 0.60 and elapsed <= 1800
    record(5, ok, f"MetaNet {res} vs pixel kNN {knn} over {TRIALS} 5-way 1-shot trials after {EPISODES} "
                  f"episodes (need >= kNN+15 and >= 60); {elapsed / 60:.1f} min <= 30")
    assert ok


def test_c6_xway(standard_run, glyphs):
    trainer, _ = standard_run
    res = protocol_xway(trainer.model, trainer.params, 10, glyphs[1], trials=TRIALS, queries_per_class=5)
    shapes_ok = True
    for K in range(2, 101):
        new, p = xway_model(trainer.model, trainer.params, K, np.random.default_rng(K))
        shapes_ok &= {k: v.shape for k, v in p.items()} == new.param_shapes()
        shapes_ok &= new.base[-1].units == K and new.embed[-1].units == K
    ep = make_trials(glyphs[1], TrialPlan(1, 20, 1, 20, seed=0))[0]
    wide, wp = xway_model(trainer.model, trainer.params, 20, np.random.default_rng(0))
    P = as_constants(wp)
    probs = wide.predict(P, wide.build_memory(P, ep, None), ep.query_x)
    shapes_ok &= probs.shape == (20, 20)
    ok = res.mean_acc >= 0.30 and shapes_ok
    record(6, ok, f"5-way model tested 10-way: {res} over {TRIALS} trials (need >= 30); "
                  f"K in 2..100 swap shapes {'ok' if shapes_ok else 'BROKEN'}")
    assert ok


def test_c7_continual(glyphs):
    base_b = gen_synthetic_glyphs(10, 20, seed=1_000_003)
    train_b = problem_b_dataset(base_b, shuffles=50, seed=0)
    setup = ContinualSetup(ModelConfig(), glyphs[0], glyphs[1], train_b, episodes_a=1000,
                           schedule=(0, 400, 800, 1200), repetitions=2, eval_trials=100, seed=SEED)
    t0 = time.perf_counter()
    out = protocol_continual(setup)
    elapsed = time.perf_counter() - t0
    curve = {c["b_trials"]: c for c in out["curve"]}
    zero = [r["delta"] for r in out["runs"] if r["b_trials"] == 0]
    complete = (set(curve) == {0, 400, 800, 1200} and all(c["runs"] == 2 for c in curve.values())
                and all(math.isfinite(c["mean_delta"]) for c in curve.values()))
    ok = train_b.class_count == 500 and complete and zero == [0.0, 0.0] and elapsed <= 45 * 60
    deltas = ", ".join(f"{k}: {100 * c['mean_delta']:+.2f}" for k, c in sorted(curve.items()))
    record(7, ok, f"500-class problem B, delta-curve (points) {deltas}; zero-trial deltas {zero}; "
                  f"{elapsed / 60:.1f} min <= 45")
    assert ok


def test_c8_determinism_and_resume(glyphs, tmp_path):
    save_dataset(glyphs[0], tmp_path / "train.mn01")
    save_dataset(glyphs[1], tmp_path / "test.mn01")
    args = ["--dataset", str(tmp_path / "train.mn01"), "--episodes", "20", "--checkpoint-every", "10",
            "--seed", "3", "--threads", "1"]
    codes = [main(["train", *args, "--out", str(tmp_path / d)]) for d in ("a", "b")]
    same_metrics = (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    ev = [main(["eval", "--checkpoint", str(tmp_path / "a" / "final.mnck"), "--test-dataset",
                str(tmp_path / "test.mn01"), "--trials", "20", "--threads", "1", "--out", str(tmp_path / d)])
          for d in ("ea", "eb")]
    same_trials = (tmp_path / "ea" / "trials.jsonl").read_bytes() == (tmp_path / "eb" / "trials.jsonl").read_bytes()
    codes.append(main(["train", *args, "--checkpoint", str(tmp_path / "a" / "ckpt-000010.mnck"),
                       "--out", str(tmp_path / "r")]))
    resumed = (tmp_path / "r" / "final.mnck").read_bytes() == (tmp_path / "a" / "final.mnck").read_bytes()
    ok = codes == [0, 0, 0] and ev == [0, 0] and same_metrics and same_trials and resumed
    record(8, ok, f"metrics stream identical: {same_metrics}, eval trials identical: {same_trials}, "
                  f"resume over 10 steps bitwise: {resumed}")
    assert ok


def test_c9_ablation(standard_run, glyphs, test_trials):
    rows = {}
    for variant in ("minus", "standard", "plus"):
        trainer, secs = standard_run if variant == "standard" else train_variant(variant, glyphs[0])
        res = evaluate(trainer.model, trainer.params, test_trials, seed=0)
        finite = all(np.all(np.isfinite(v)) for v in trainer.params.values())
        rows[variant] = (res, trainer.episode == EPISODES and finite, secs, params_digest(trainer.params))
    ok = all(done for _, done, _, _ in rows.values())
    side = "  ".join(f"{v}: {r[0]} ({r[2] / 60:.1f} min)" for v, r in rows.items())
    record(9, ok, f"{EPISODES} episodes each, {TRIALS} trials: {side}")
    assert ok
