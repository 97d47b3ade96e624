"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``; the lines are also
collected into the terminal summary.
"""

import os
import time
from itertools import combinations
from pathlib import Path

import numpy as np
import pytest

from airsched import engine
from airsched import rng as rngs
from airsched.bounds import BoundInputs, drift_constants, lemma1_bound, lemma2_bound, theorem1_bound
from airsched.channel import PowerPolicy, aircomp_aggregate
from airsched.engine import SimulationConfig
from airsched.learner import (
    Architecture,
    ModelParams,
    apply_global_update,
    init_params,
    local_update,
    loss_and_gradient,
    objective,
)
from airsched.oracle import check_scheduler
from airsched.residual import ResidualStore
from airsched.scheduler import rank_devices
from conftest import ACCEPTANCE_LINES

SEEDS = range(10)

# Desk-scale instance shared by the trend, baseline and residual criteria.
DESK = dict(num_devices=20, rounds=50, lr=0.1, n_train=1000, n_test=5000, b1_k=6,
            b3_kc=10, b3_k=4)


def report(key, ok, detail):
    line = f"criterion {key}: {'PASS' if ok else 'FAIL'} - {detail}"
    ACCEPTANCE_LINES[key] = line
    print(line)
    return ok


_cache: dict = {}


def desk_summary(seed, **changes):
    key = (seed, tuple(sorted(changes.items())))
    if key not in _cache:
        cfg = SimulationConfig(**{**DESK, **changes, "seed": seed})
        _cache[key] = engine.summarize(engine.run(cfg))
    return _cache[key]


# 1 -------------------------------------------------------------------------

def test_c1_noiseless_benchmark_equivalence():
    start = time.perf_counter()
    cfg = SimulationConfig(num_devices=5, rounds=20, n_train=200, n_test=100,
                           policy="benchmark", noiseless=True, seed=11)
    result = engine.run(cfg)
    elapsed = time.perf_counter() - start

    train, _ = engine.load_data(cfg)
    parts = engine.make_partitions(cfg, train)
    model = init_params(engine.make_architecture(cfg, train), cfg.seed)
    for t in range(1, cfg.rounds + 1):
        grads = [local_update(model, train, p, t, cfg.batch_size, cfg.epochs, cfg.lr, cfg.momentum,
                              rngs.device_stream(cfg.seed, p.device_id, t)) for p in parts]
        model = apply_global_update(model, np.mean(grads, axis=0), cfg.lr)
    dev = float(np.max(np.abs(result.model.w - model.w)))
    ok = dev <= 1e-12 and elapsed < 5
    assert report("1", ok, f"max deviation {dev:.2e} (<= 1e-12), run {elapsed:.2f}s (< 5s)")


# 2 -------------------------------------------------------------------------

def test_c2_scheduler_oracle():
    start = time.perf_counter()
    total = agree = 0
    for n in range(1, 13):
        rep = check_scheduler(n, 1000, seed=n)
        total += rep.instances
        agree += rep.agreements
    elapsed = time.perf_counter() - start
    ok = agree == total and elapsed < 60
    assert report("2", ok, f"{agree}/{total} instances agree over N=1..12, {elapsed:.1f}s (< 60s)")


# 3 -------------------------------------------------------------------------

def test_c3_top_k_lemma():
    gen = np.random.default_rng(3)
    checks = agree = 0
    for _ in range(500):
        n = int(gen.integers(1, 11))
        # Quantized qualities so that ties occur.
        q = np.round(gen.uniform(-1, 1, n), 1)
        order = rank_devices(q)
        pos = {i: r for r, i in enumerate(sorted(range(n), key=lambda i: (-q[i], i)))}
        for k in range(1, n + 1):
            subsets = list(combinations(range(n), k))
            sums = np.array([q[list(s)].sum() for s in subsets])
            best = sums.max()
            winners = {frozenset(s) for s, v in zip(subsets, sums) if np.isclose(v, best, atol=1e-12)}
            top = frozenset(order[:k].tolist())
            # With ties, the tie-break must pick among optima, preferring lower ids.
            tie_ok = top == min(winners, key=lambda s: sorted(pos[i] for i in s))
            checks += 1
            agree += top in winners and tie_ok
    ok = agree == checks
    assert report("3", ok, f"{agree}/{checks} (instance, k) pairs match brute force")


# 4 -------------------------------------------------------------------------

def test_c4_gradient_correctness():
    start = time.perf_counter()
    gen = np.random.default_rng(4)
    worst = {}
    for name, arch in (("logistic", Architecture.logistic(8, 4, 1e-4)),
                       ("mlp", Architecture.mlp(8, 4, 6, 1e-4))):
        errs = []
        for _ in range(100):
            X = gen.random((6, arch.input_dim))
            y = gen.integers(0, arch.num_classes, 6)
            p = ModelParams(arch, gen.standard_normal(arch.num_params) * 0.5)
            _, g = loss_and_gradient(p, X, y)
            fd = np.empty_like(g)
            for i in range(g.size):
                e = np.zeros_like(g)
                e[i] = 1e-5
                fd[i] = (objective(p.with_weights(p.w + e), X, y)
                         - objective(p.with_weights(p.w - e), X, y)) / 2e-5
            errs.append(np.linalg.norm(fd - g) / max(np.linalg.norm(g), np.linalg.norm(fd)))
        worst[name] = max(errs)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= 1e-4 and elapsed < 10
    assert report("4", ok, f"max relative error logistic {worst['logistic']:.1e}, "
                           f"mlp {worst['mlp']:.1e} (<= 1e-4), {elapsed:.1f}s (< 10s)")


# 5 -------------------------------------------------------------------------

def test_c5_noise_calibration():
    start = time.perf_counter()
    nu = 0.8
    worst = 0.0
    for k in (1, 2, 10):
        for gamma in (0.3162, 1.0, 3.1623):
            gen = np.random.default_rng(int(k * 1000 + gamma * 10))
            updates = np.tile(np.array([0.25, -0.5]), (k, 1))
            draws = np.array([aircomp_aggregate(updates, PowerPolicy(1.0, gamma), nu, gen).aggregate
                              for _ in range(10_000)])
            var = float(np.var(draws - updates[0], axis=0).mean())
            target = nu**2 / (gamma * k * k)
            worst = max(worst, abs(var / target - 1))
    elapsed = time.perf_counter() - start
    ok = worst <= 0.05 and elapsed < 30
    assert report("5", ok, f"worst relative variance error {worst:.3f} (<= 0.05), {elapsed:.1f}s (< 30s)")


# 6 -------------------------------------------------------------------------

def _hand_residual_trace(mode, pattern, grads):
    r = [[0.0, 0.0] for _ in range(3)]
    sent = []
    for t, sel in enumerate(pattern):
        comb = [[grads[t][n][i] + r[n][i] for i in range(2)] for n in range(3)]
        sent.append(comb)
        for n in range(3):
            if sel[n]:
                r[n] = [0.0, 0.0]
            else:
                r[n] = list(grads[t][n]) if mode == "literal" else list(comb[n])
    return sent


def test_c6_residual_semantics():
    pattern = [[1, 0, 0], [0, 0, 1], [0, 1, 0], [1, 0, 0], [0, 0, 0], [1, 1, 1]]
    grads = np.random.default_rng(6).integers(-9, 10, size=(6, 3, 2)).astype(float)
    exact = True
    for mode in ("literal", "accumulate"):
        expected = _hand_residual_trace(mode, pattern, grads.tolist())
        store = ResidualStore(3, 2, xi=1.0, mode=mode)
        for t, sel in enumerate(pattern):
            comb = store.combine_all(grads[t])
            exact &= bool(np.array_equal(comb, np.array(expected[t])))
            store.update_after_round(np.array(sel, dtype=bool), grads[t], comb)
    # Telescoping: device 1 is unselected in rounds 0-1 and selected in round 2.
    store = ResidualStore(3, 2, xi=1.0, mode="accumulate")
    for t in range(3):
        comb = store.combine_all(grads[t])
        store.update_after_round(np.array(pattern[t], dtype=bool), grads[t], comb)
    telescoped = bool(np.array_equal(comb[1], grads[0, 1] + grads[1, 1] + grads[2, 1]))
    ok = exact and telescoped
    assert report("6", ok, f"hand recursions exact={exact}, telescoping={telescoped}")


# 7 -------------------------------------------------------------------------

def _unrolled(rounds, gap):
    e, out = gap, []
    for x in rounds:
        B, C = drift_constants(x)
        e = C * e + B
        out.append(e - gap)
    return np.array(out)


def test_c7_bound_substitutions():
    base = dict(L=1.0, mu=1.0, lr=0.1, G2=1.0, delta2=1.0, m=0.0, pr_unselected=0.0,
                num_selected=10, batch_size=10, snr_threshold=1.0, g_norm_sq=1.0)
    x = BoundInputs(**base)
    checks = [
        (lemma1_bound(0.0, 1.0, 1.0), 0.0),
        (lemma1_bound(0.5, 1.0, 1.0), 2.0),
        (lemma1_bound(0.9, 0.0, 1.0), 9.0),
        (lemma2_bound(BoundInputs(**{**base, "lr": 0.0})), 0.0),
        (lemma2_bound(x), 0.0051),
        (drift_constants(x)[1], 1.01),
        (drift_constants(x)[0], 0.0001),
        (theorem1_bound([x], 2.0).theorem[0], 0.01 * 2.0 + 0.0001),
    ]
    worst_sub = max(abs(got - want) / max(abs(want), 1e-300) if want else abs(got)
                    for got, want in checks)
    gen = np.random.default_rng(7)
    worst_rec = 0.0
    for _ in range(100):
        rounds = [BoundInputs(L=gen.uniform(0.1, 5), mu=gen.uniform(0.01, 1), lr=gen.uniform(0.001, 0.2),
                              G2=gen.uniform(0, 5), delta2=gen.uniform(0, 2), m=gen.uniform(-1, 1),
                              pr_unselected=gen.uniform(0, 0.95), num_selected=int(gen.integers(1, 30)),
                              batch_size=int(gen.integers(1, 20)), snr_threshold=gen.uniform(0.3, 3.2),
                              g_norm_sq=gen.uniform(0, 3))
                  for _ in range(10)]
        gap = gen.uniform(0, 5)
        got, want = theorem1_bound(rounds, gap).theorem, _unrolled(rounds, gap)
        worst_rec = max(worst_rec, float(np.max(np.abs(got - want) / np.abs(want))))
    ok = worst_sub <= 1e-12 and worst_rec <= 1e-12
    assert report("7", ok, f"substitution rel err {worst_sub:.1e}, recursion rel err {worst_rec:.1e} (<= 1e-12)")


# 8 -------------------------------------------------------------------------

@pytest.mark.slow
def test_c8_trends():
    start = time.perf_counter()
    a_ok = b_ok = c_ok = 0
    for s in SEEDS:
        sel = [desk_summary(s, alpha=a)["mean_selected"] for a in (5e2, 5e3, 5e4)]
        a_ok += sel[0] <= sel[1] <= sel[2]
        lo, hi = desk_summary(s, lambda_e=0.3), desk_summary(s, lambda_e=0.7)
        b_ok += hi["mean_energy"] < lo["mean_energy"] and hi["mean_selected"] < lo["mean_selected"]
        m5, p5 = desk_summary(s, snr_db=-5.0), desk_summary(s, snr_db=5.0)
        c_ok += (p5["mean_selected"] < m5["mean_selected"]
                 and p5["mean_selected_energy"] > m5["mean_selected_energy"])
    elapsed = time.perf_counter() - start
    ok = min(a_ok, b_ok, c_ok) >= 8 and elapsed < 600
    assert report("8", ok, f"alpha {a_ok}/10, lambda_E {b_ok}/10, gamma_thr {c_ok}/10 seeds "
                           f"(each >= 8), {elapsed:.0f}s (< 600s)")


# 9 -------------------------------------------------------------------------

def _mnist_dir():
    for candidate in (os.environ.get("AIRSCHED_MNIST_DIR"),
                      Path(__file__).resolve().parents[1] / "data" / "mnist"):
        if candidate and any(Path(candidate).glob("train-images*")):
            return str(candidate)
    return None


_c9: dict = {}


def _c9_line():
    syn = _c9.get("synthetic")
    mn = _c9.get("mnist")
    syn_txt = f"synthetic {syn[0]}/10" if syn else "synthetic not run"
    mn_txt = f"MNIST-10k {mn[0]}/10" if mn and mn[0] is not None else "MNIST-10k arm not run (data unavailable)"
    ok = bool(syn and syn[0] >= 8 and mn and mn[0] is not None and mn[0] >= 8)
    report("9", ok, f"proposed >= baseline1 at noise_var=3: {syn_txt}, {mn_txt} (each >= 8), "
                    f"{sum(v[1] for v in _c9.values()):.0f}s (< 1200s)")


@pytest.mark.slow
def test_c9_baseline_superiority_synthetic():
    start = time.perf_counter()
    wins = sum(desk_summary(s, noise_var=3.0)["final_accuracy"]
               >= desk_summary(s, noise_var=3.0, policy="baseline1")["final_accuracy"] for s in SEEDS)
    _c9["synthetic"] = (int(wins), time.perf_counter() - start)
    _c9_line()
    assert wins >= 8


@pytest.mark.slow
def test_c9_baseline_superiority_mnist():
    root = _mnist_dir()
    if root is None:
        _c9["mnist"] = (None, 0.0)
        _c9_line()
        pytest.xfail("MNIST IDX files not found (set AIRSCHED_MNIST_DIR); criterion 9 not verified")
    start = time.perf_counter()
    wins = 0
    for s in SEEDS:
        cfg = SimulationConfig(dataset="mnist", mnist_dir=root, mnist_subset=10_000, num_devices=20,
                               rounds=50, noise_var=3.0, b1_k=6, seed=s)
        prop = engine.summarize(engine.run(cfg))["final_accuracy"]
        base = engine.summarize(engine.run(cfg.replace(policy="baseline1")))["final_accuracy"]
        wins += prop >= base
    _c9["mnist"] = (int(wins), time.perf_counter() - start)
    _c9_line()
    assert wins >= 8


# 10 ------------------------------------------------------------------------

@pytest.mark.slow
def test_c10_residual_benefit():
    wins = sum(desk_summary(s, noise_var=3.0)["final_accuracy"]
               >= desk_summary(s, noise_var=3.0, residual=False)["final_accuracy"] for s in SEEDS)
    ok = wins >= 7
    assert report("10", ok, f"residual on >= off in {wins}/10 seeds (>= 7)")


# 11 ------------------------------------------------------------------------

def test_c11_determinism():
    configs = [SimulationConfig(num_devices=8, rounds=8, n_train=200, n_test=100, seed=5),
               SimulationConfig(num_devices=8, rounds=8, n_train=200, n_test=100, seed=5,
                                policy="baseline1", b1_k=3),
               SimulationConfig(num_devices=6, rounds=5, n_train=120, n_test=60, seed=9,
                                model="mlp", hidden=8, partition="noniid", residual_mode="accumulate")]
    identical = 0
    for cfg in configs:
        texts = {engine.metrics_csv(engine.run(cfg.replace(workers=w)).metrics) for w in (1, 1, 4)}
        identical += len(texts) == 1
    ok = identical == len(configs)
    assert report("11", ok, f"{identical}/{len(configs)} configurations byte-identical across "
                            f"repeats and 1 vs 4 workers")
