"""Acceptance criteria, one test per criterion.

Each test records a ``PASS``/``FAIL`` line; conftest prints them at the end of
the session so they appear in plain ``pytest -v`` output.
"""

import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import central_diff, max_rel_error, whole_model_message_passing
from pfedcfr import cli, data, fusion, nn, runtime
from pfedcfr.fusion import GENERIC, PERSONALIZED, SimilarityParams
from pfedcfr.runtime import ClientState, MethodConfig, PenaltySpec

RESULTS = []

BENCH_DATA = {
    "source": "synthetic",
    "num_clusters": 2,
    "samples_per_class": 100,
    "dim": 20,
    "num_classes": 8,
    "std": 0.5,
    "seed": 0,
}
BENCH_PARTITION = {"num_clients": 8, "labels_per_client": 2, "lognormal_sigma": 1.0, "seed": 0}
BENCH_TRAINING = {"rounds": 30, "seed": 0}
SEEDS = (0, 1, 2)


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} | {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def _bench_config(tmp_path, widths, num_feature=None, method="pfedcfr"):
    model = {"widths": widths}
    if num_feature is not None:
        model["num_feature"] = num_feature
    cfg = {
        "method": method,
        "output_dir": "out",
        "model": model,
        "data": BENCH_DATA,
        "partition": BENCH_PARTITION,
        "training": BENCH_TRAINING,
    }
    path = tmp_path / "bench.json"
    path.write_text(json.dumps(cfg))
    return path


def _table(path):
    lines = Path(path).read_text().splitlines()[1:]
    return {row.split(",")[0]: float(row.split(",")[1]) for row in lines}


def test_criterion_1_weight_properties():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst_sum = worst_fixed = 0.0
    symmetric = ordered = True
    count = 0
    for _ in range(1000):
        n = int(rng.choice([2, 5, 20]))
        length = int(rng.choice([3, 100, 10_000]))
        x = rng.normal(size=(n, length)) * rng.uniform(0.1, 3.0)
        sigma = float(2.0 * length * rng.uniform(0.05, 5.0))
        p = SimilarityParams(alpha_t=float(rng.uniform(0.01, 0.99)) * sigma / n, sigma=sigma)
        _, w = fusion.personalized_fuse_layer(list(x), p)
        worst_sum = max(worst_sum, float(np.max(np.abs(w.sum(axis=1) - 1.0))))
        symmetric &= bool(np.array_equal(w, w.T))
        d = fusion.pairwise_distance_sq(x)
        for i in range(n):
            others = [m for m in range(n) if m != i]
            order = sorted(others, key=lambda m: d[i, m])
            ordered &= all(w[i, a] >= w[i, b] for a, b in zip(order, order[1:]))
        same = [x[0]] * n
        fused, _ = fusion.personalized_fuse_layer(same, p)
        worst_fixed = max(worst_fixed, max(float(np.max(np.abs(f - x[0]))) for f in fused))
        count += 1
    elapsed = time.perf_counter() - start
    ok = worst_sum <= 1e-12 and symmetric and ordered and worst_fixed <= 1e-12 and elapsed < 10
    report(
        1, ok,
        f"{count} snapshots, max |row sum - 1| = {worst_sum:.2e}, symmetric={symmetric}, "
        f"ordered={ordered}, fixed point err = {worst_fixed:.2e}, {elapsed:.1f}s (< 10s)",
    )


def test_criterion_2_hand_cases():
    p = SimilarityParams(alpha_t=1.0, sigma=1.0)
    fused, w = fusion.personalized_fuse_layer([np.array([0.0]), np.array([2.0])], p)
    z = math.exp(-4.0)
    err_two = max(abs(w[0, 1] - z), abs(fused[0][0] - 2 * z), abs(fused[1][0] - 2 * (1 - z)))
    close_to_quoted = abs(fused[0][0] - 0.036631) < 1e-6

    snaps = [np.array([1.0, -2.0, 3.0])] * 3
    _, w3 = fusion.personalized_fuse_layer(snaps, SimilarityParams(alpha_t=1e4, sigma=1e6))
    want = np.full((3, 3), 0.01) + np.diag([0.97] * 3)
    err_three = float(np.max(np.abs(w3 - want)))
    ok = err_two <= 1e-12 and err_three <= 1e-12 and close_to_quoted
    report(2, ok, f"N=2 scalar err {err_two:.1e}, fused_1 = {fused[0][0]:.6f}; N=3 identical err {err_three:.1e}")


def _history_bytes(history):
    return [(m.train_loss.tobytes(), m.test_loss.tobytes(), m.test_acc.tobytes()) for m in history]


def test_criterion_3_reductions():
    start = time.perf_counter()
    ds = data.gen_synthetic(2, 30, 10, 4, seed=5)
    shards = data.partition_heterogeneous(ds, data.PartitionConfig(4, 2, 1.0, 5))
    spec = nn.ModelSpec.mlp([10, 8, 4])
    a = runtime.run_experiment(spec, shards, MethodConfig("pfedcfr", r=0, rounds=5, seed=5))
    b = runtime.run_experiment(spec, shards, MethodConfig("fedprox", rounds=5, seed=5))
    identical = _history_bytes(a) == _history_bytes(b)

    # single-block model, every layer personalized: compare each round's targets
    # against a loop that fuses with the independent whole-model update
    one = nn.ModelSpec.mlp([10, 4])
    cfg = MethodConfig("pfedcfr", r=1, rounds=5, seed=5)
    seen = []
    runtime.run_experiment(one, shards, cfg, lambda t, clients, m, f: seen.append([c.personalized_target[1] for c in clients]))

    penalty = cfg.penalty(one)
    start_params = nn.init_model(one, cfg.seed)
    params = [nn.copy_params(start_params) for _ in shards]
    targets = [start_params[0].copy() for _ in shards]
    worst = 0.0
    for t in range(1, 6):
        uploads = [
            runtime.local_train(one, ClientState(s.client_id, s, params[n], {1: targets[n]}, {}), cfg, penalty, t)
            for n, s in enumerate(shards)
        ]
        targets = [v.copy() for v in whole_model_message_passing(uploads, cfg.similarity.alpha_t, cfg.similarity.sigma)]
        params = uploads
        worst = max(worst, max(float(np.max(np.abs(seen[t - 1][n] - targets[n]))) for n in range(len(shards))))
    elapsed = time.perf_counter() - start
    ok = identical and worst <= 1e-12 and elapsed < 60
    report(3, ok, f"pfedcfr(r=0) == fedprox bytes: {identical}; whole-model max err {worst:.1e}; {elapsed:.1f}s (< 60s)")


def test_criterion_4_gradient_checks():
    rng = np.random.default_rng(77)
    start = time.perf_counter()
    worst_data = worst_pen = 0.0
    for _ in range(50):
        depth = int(rng.integers(1, 4))
        widths = [int(w) for w in rng.integers(2, 9, depth + 1)]
        spec = nn.ModelSpec.mlp(widths)
        params = [p + 0.1 * rng.normal(size=p.shape) for p in nn.init_model(spec, int(rng.integers(1 << 30)))]
        batch = nn.Batch(rng.normal(size=(5, widths[0])), rng.integers(0, widths[-1], 5))
        _, g = nn.loss_and_grad(spec, params, batch)
        num = central_diff(lambda ps: nn.loss_and_grad(spec, ps, batch)[0], params)
        worst_data = max(worst_data, max_rel_error(g, num))

        r = int(rng.integers(0, depth + 1))
        plan = fusion.FusionPlan(depth, r)
        sim = SimilarityParams(alpha_t=float(rng.uniform(0.1, 10)), lam=float(rng.uniform(0.1, 10)), mu=float(rng.uniform(1e-3, 1)))
        pen = PenaltySpec.from_plan(plan, sim)
        state = ClientState(
            0, None, params,
            {l: rng.normal(size=params[l - 1].shape) for l in plan.personalized_layers},
            {l: rng.normal(size=params[l - 1].shape) for l in plan.generic_layers},
        )
        _, gp = runtime.penalty_value_and_grad(params, state, pen)
        nump = central_diff(lambda ps: runtime.penalty_value_and_grad(ps, state, pen)[0], params)
        worst_pen = max(worst_pen, max_rel_error(gp, nump))
    elapsed = time.perf_counter() - start
    ok = worst_data < 1e-5 and worst_pen < 1e-5 and elapsed < 30
    report(4, ok, f"50 configs, max rel err data {worst_data:.1e}, penalty {worst_pen:.1e}; {elapsed:.1f}s (< 30s)")


def test_criterion_5_heterogeneity_gap(tmp_path):
    start = time.perf_counter()
    path = _bench_config(tmp_path, [20, 64, 8])
    per_seed = []
    for seed in SEEDS:
        out = tmp_path / f"s{seed}"
        assert cli.main(["compare", str(path), "--methods", "fedavg,fedprox,fedamp,pfedcfr", "--seed", str(seed), "--out", str(out)]) == 0
        per_seed.append(_table(out / "compare.csv"))
    mean = {m: float(np.mean([s[m] for s in per_seed])) for m in per_seed[0]}
    gap = mean["pfedcfr"] - mean["fedavg"]
    elapsed = time.perf_counter() - start
    ok = gap >= 0.10 and elapsed < 600
    detail = ", ".join(f"{m} {v:.4f}" for m, v in sorted(mean.items(), key=lambda kv: -kv[1]))
    report(5, ok, f"{detail}; pfedcfr - fedavg = {100 * gap:.1f}pp (>= 10pp); {elapsed:.0f}s")


def test_criterion_6_threshold_sweep(tmp_path):
    start = time.perf_counter()
    path = _bench_config(tmp_path, [20, 64, 64, 64, 64, 64, 8], num_feature=4)
    per_seed = []
    for seed in SEEDS:
        out = tmp_path / f"s{seed}"
        assert cli.main(["sweep-r", str(path), "--r", "0,2,4,6", "--seed", str(seed), "--out", str(out)]) == 0
        per_seed.append(_table(out / "sweep.csv"))
    mean = {int(r): float(np.mean([s[r] for s in per_seed])) for r in per_seed[0]}
    elapsed = time.perf_counter() - start
    ok = mean[4] >= mean[0] and mean[4] >= mean[6] and elapsed < 1200
    strict = mean[4] > mean[0] and mean[4] > mean[6]
    detail = ", ".join(f"r={r} {v:.4f}" for r, v in sorted(mean.items()))
    report(6, ok, f"{detail}; r=4 >= r=0 and r=6 ({'strict' if strict else 'tie'}); {elapsed:.0f}s")


def test_criterion_7_determinism_and_partition(tmp_path):
    start = time.perf_counter()
    path = _bench_config(tmp_path, [20, 32, 8])
    raw = json.loads(path.read_text())
    raw["training"]["rounds"] = 5
    path.write_text(json.dumps(raw))
    assert cli.main(["run", str(path), "--out", str(tmp_path / "a")]) == 0
    assert cli.main(["run", str(path), "--out", str(tmp_path / "b")]) == 0
    same = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()

    rng = np.random.default_rng(7)
    exact = 0
    for _ in range(20):
        c = int(rng.integers(2, 11))
        n = int(rng.integers(2, 21))
        s = int(rng.integers(1, c + 1))
        s = max(s, -(-c // n))
        ds = data.gen_synthetic(1, int(rng.integers(n, 60)), 3, c, seed=int(rng.integers(1000)))
        cfg = data.PartitionConfig(n, s, float(rng.uniform(0.1, 2.5)), int(rng.integers(1 << 30)), float(rng.uniform(0.5, 0.9)))
        shards = data.partition_heterogeneous(ds, cfg)
        idx = np.concatenate([np.concatenate([sh.train_idx, sh.test_idx]) for sh in shards])
        rows = np.concatenate([np.concatenate([sh.train.inputs, sh.test.inputs]) for sh in shards])
        labels = np.concatenate([np.concatenate([sh.train.labels, sh.test.labels]) for sh in shards])
        order = np.argsort(idx, kind="stable")
        exact += bool(
            np.array_equal(idx[order], np.arange(len(ds)))
            and np.array_equal(rows[order], ds.inputs)
            and np.array_equal(labels[order], ds.labels)
        )
    elapsed = time.perf_counter() - start
    ok = same and exact == 20 and elapsed < 120
    report(7, ok, f"metrics.csv byte-identical: {same}; partition multiset exact {exact}/20; {elapsed:.1f}s (< 120s)")


MNIST_DIR = os.environ.get("PFEDCFR_MNIST_DIR")


@pytest.mark.skipif(not MNIST_DIR, reason="set PFEDCFR_MNIST_DIR to a directory with MNIST train IDX files")
def test_criterion_8_mnist_ordering():
    base = Path(MNIST_DIR)
    full = data.load_idx(base / "train-images-idx3-ubyte", base / "train-labels-idx1-ubyte")
    spec = nn.ModelSpec.mlp([784, 100, 10])
    scores = {m: [] for m in runtime.METHODS}
    for seed in SEEDS:
        ds = data.subsample(full, 2000, seed)
        shards = data.partition_heterogeneous(ds, data.PartitionConfig(20, 2, 1.0, seed))
        for m in runtime.METHODS:
            hist = runtime.run_experiment(spec, shards, MethodConfig(m, r=1, rounds=40, seed=seed))
            scores[m].append(runtime.final_accuracy(hist)[0])
    mean = {m: float(np.mean(v)) for m, v in scores.items()}
    ok = all(mean["pfedcfr"] > mean[m] for m in ("fedamp", "fedavg", "fedprox"))
    report(8, ok, ", ".join(f"{m} {v:.4f}" for m, v in sorted(mean.items(), key=lambda kv: -kv[1])))
