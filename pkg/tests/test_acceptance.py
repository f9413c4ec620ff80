"""The eight acceptance criteria, each at its stated tolerance.

Every test records a one-line verdict (see ``acceptance_log``) that is
printed in the pytest terminal summary.  Run this file directly to print
the lines without pytest.
"""

import functools
import itertools
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from acceptance_log import record
from hfgnn.config import ExperimentConfig, HmmConfig
from hfgnn.federation import (
    RoundConfig,
    init_state,
    propagate_knowledge,
    run_round,
)
from hfgnn.gnn import init_params, loss_and_grads
from hfgnn.graph import ClientDataset, Graph, SbmSpec, generate_sbm, partition_clients, split_masks
from hfgnn.harness import read_flow_csv, run_single
from hfgnn.hmm import HmmModel, StateSequence, joint_log_probability, observation_likelihood

SEEDS = range(5)


# -- 1 ---------------------------------------------------------------------


def _random_instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(8, 21))
    f, C = int(rng.integers(2, 6)), int(rng.integers(2, 5))
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.3]
    g = Graph(n, np.array(edges, dtype=int).reshape(-1, 2), rng.standard_normal((n, f)), rng.integers(0, C, n), C)
    p = init_params(f, C, hidden_dim=6, num_layers=2, seed=seed)
    p = p.unflatten(0.5 * rng.standard_normal(p.size))
    anchor = p.unflatten(0.5 * rng.standard_normal(p.size))
    mask = np.sort(rng.choice(n, size=max(2, n // 2), replace=False))
    return g, p, anchor, mask


def test_1_gradient_correctness():
    start = time.perf_counter()
    step, worst = 1e-5, 0.0
    for seed in range(10):
        g, p, anchor, mask = _random_instance(seed)
        _, grads = loss_and_grads(g, p, mask, anchor, 0.1, 5e-4)
        analytic = grads.flatten()
        flat = p.flatten()
        coords = np.random.default_rng(100 + seed).choice(p.size, size=min(60, p.size), replace=False)
        for i in coords:
            up, down = flat.copy(), flat.copy()
            up[i] += step
            down[i] -= step
            lu, _ = loss_and_grads(g, p.unflatten(up), mask, anchor, 0.1, 5e-4)
            ld, _ = loss_and_grads(g, p.unflatten(down), mask, anchor, 0.1, 5e-4)
            numeric = (lu - ld) / (2 * step)
            # relative error, floored at 1e-6 for coordinates whose gradient is ~0
            err = abs(analytic[i] - numeric) / max(abs(analytic[i]), abs(numeric), 1e-6)
            worst = max(worst, err)
    elapsed = time.perf_counter() - start
    ok = worst < 1e-6 and elapsed < 10
    record(1, ok, f"max relative error {worst:.2e} (< 1e-6), {elapsed:.1f}s (< 10s)")
    assert ok


# -- 2 ---------------------------------------------------------------------


def test_2_hmm_exactness():
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    m = HmmModel(
        rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3), size=3), rng.dirichlet(np.ones(3), size=3)
    )
    obs = tuple(int(o) for o in rng.integers(0, 3, 5))
    hidden_sum = sum(
        math.exp(joint_log_probability(m, StateSequence(h, obs))) for h in itertools.product(range(3), repeat=5)
    )
    marg_err = abs(hidden_sum - math.exp(observation_likelihood(m, obs)))
    obs_sum = sum(math.exp(observation_likelihood(m, y)) for y in itertools.product(range(3), repeat=5))
    norm_err = abs(obs_sum - 1.0)
    elapsed = time.perf_counter() - start
    ok = marg_err < 1e-10 and norm_err < 1e-9 and elapsed < 5
    record(2, ok, f"marginal error {marg_err:.1e} (< 1e-10), normalisation error {norm_err:.1e} (< 1e-9), {elapsed:.2f}s")
    assert ok


# -- 3 ---------------------------------------------------------------------


def _nested_propagation(values, omega, P):
    K = len(values)
    out = np.zeros_like(values)
    for k in range(K):
        for path in itertools.product(range(K), repeat=P):
            w = omega[k, path[0]]
            for a, b in zip(path, path[1:]):
                w *= omega[a, b]
            out[k] += w * values[path[-1]]
    return out


def test_3_propagation_oracle():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        K, P = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        omega = rng.random((K, K)) + 1e-3
        omega /= omega.sum(axis=1, keepdims=True)
        values = rng.standard_normal((K, 3))
        diff = np.abs(propagate_knowledge(values, omega, P) - _nested_propagation(values, omega, P)).max()
        worst = max(worst, diff)
    ok = worst < 1e-12
    record(3, ok, f"max deviation from path-sum oracle {worst:.1e} over 50 trials (< 1e-12)")
    assert ok


# -- 4 ---------------------------------------------------------------------


def _equal_clients(K=4, size=12, seed=4):
    g = generate_sbm(SbmSpec((size,) * K, 0.4, 0.05, seed=seed))
    out = []
    for k in range(K):
        nodes = np.arange(k, K * size, K)
        sub, dropped = g.induced(nodes)
        out.append(split_masks(ClientDataset(k, sub, nodes, dropped_edges=dropped), seed + k))
    return out


def test_4_reduction_identities():
    data = _equal_clients()
    assert len({c.num_samples for c in data}) == 1
    base = dict(num_rounds=3, clients_per_round=len(data))
    hf_cfg = RoundConfig(
        strategy="hfgnn", weighting="uniform", propagation_depth=1, feature_mix=1.0, self_floor=0.0, **base
    )
    fa_cfg = RoundConfig(strategy="fedavg", **base)
    hf = init_state(hf_cfg, data, seed=8)
    fa = init_state(fa_cfg, data, seed=8)
    gap_a = 0.0
    for _ in range(3):
        hf = run_round(hf, hf_cfg, data, seed=8)
        fa = run_round(fa, fa_cfg, data, seed=8)
        for a, b in zip(hf.client_params, fa.client_params):
            gap_a = max(gap_a, np.abs(a.flatten() - b.flatten()).max())

    g = generate_sbm(SbmSpec((15, 15, 15), 0.3, 0.05, seed=5))
    single = partition_clients(g, 1, 0.3, seed=6)
    gap_b = 0.0
    cfg_g = RoundConfig(strategy="global", num_rounds=20, clients_per_round=1)
    central = init_state(cfg_g, single, seed=9)
    fed = {s: init_state(cfg_g, single, seed=9) for s in ("fedavg", "hfgnn")}
    cfgs = {s: replace(cfg_g, strategy=s, weighting="uniform") for s in fed}
    for _ in range(20):
        central = run_round(central, cfg_g, single, seed=9)
        for s in fed:
            fed[s] = run_round(fed[s], cfgs[s], single, seed=9)
            theirs = fed[s].global_params if s == "fedavg" else fed[s].client_params[0]
            gap_b = max(gap_b, np.abs(theirs.flatten() - central.global_params.flatten()).max())

    ok = gap_a < 1e-12 and gap_b < 1e-9
    record(
        4,
        ok,
        f"(a) degenerate hfgnn vs fedavg {gap_a:.1e} (< 1e-12); (b) K=1 vs centralised over 20 rounds {gap_b:.1e} (< 1e-9)",
    )
    assert ok


# -- 5 and 6 ---------------------------------------------------------------


@functools.lru_cache(maxsize=None)
def _mean_accuracy(strategy, K):
    cfg = ExperimentConfig(round=RoundConfig(num_rounds=100, clients_per_round=5))
    accs = [run_single(cfg, s, num_clients=K, strategy=strategy).mean_test_accuracy for s in SEEDS]
    return float(np.mean(accs))


@pytest.mark.slow
def test_5_baseline_ordering():
    start = time.perf_counter()
    acc = {s: _mean_accuracy(s, 10) for s in ("local", "fedavg", "fedprox", "hfgnn")}
    elapsed = time.perf_counter() - start
    clauses = {
        "hfgnn > fedprox": acc["hfgnn"] > acc["fedprox"],
        "fedprox >= fedavg": acc["fedprox"] >= acc["fedavg"],
        "fedavg > local": acc["fedavg"] > acc["local"],
        "hfgnn - fedavg >= 2pt": acc["hfgnn"] - acc["fedavg"] >= 0.02,
    }
    failed = [c for c, ok in clauses.items() if not ok]
    table = ", ".join(f"{s} {100 * a:.2f}" for s, a in acc.items())
    ok = not failed and elapsed < 300
    record(5, ok, f"{table}; {elapsed:.0f}s" + (f"; violated: {', '.join(failed)}" if failed else ""))
    assert ok, f"violated {failed}: {table}"


@pytest.mark.slow
def test_6_client_count_robustness():
    drop = {s: _mean_accuracy(s, 5) - _mean_accuracy(s, 30) for s in ("hfgnn", "fedavg")}
    ok = drop["hfgnn"] <= drop["fedavg"]
    record(6, ok, f"drop K=5 -> K=30: hfgnn {100 * drop['hfgnn']:.2f}pt, fedavg {100 * drop['fedavg']:.2f}pt")
    assert ok


# -- 7 ---------------------------------------------------------------------


def test_7_determinism(tmp_path):
    cfg = ExperimentConfig(
        round=RoundConfig(num_rounds=8, clients_per_round=5), hmm=HmmConfig(enabled=True, drift_scale=0.2)
    )
    identical = True
    for strategy in ("local", "global", "fedavg", "fedprox", "hfgnn"):
        for run in ("a", "b"):
            run_single(cfg, 31, tmp_path / f"{strategy}_{run}", strategy=strategy)
        for name in ("metrics.csv", "flows.csv"):
            a = (tmp_path / f"{strategy}_a" / name).read_bytes()
            b = (tmp_path / f"{strategy}_b" / name).read_bytes()
            identical &= a == b
    record(7, identical, "metrics and flow CSVs byte-identical across reruns for all five strategies with drift")
    assert identical


# -- 8 ---------------------------------------------------------------------


def test_8_flow_accounting(tmp_path):
    R, client_k = 10, 5
    cfg = ExperimentConfig(round=RoundConfig(num_rounds=R, clients_per_round=client_k))
    problems = []
    for strategy in ("fedavg", "fedprox", "hfgnn"):
        result = run_single(cfg, 2, tmp_path / strategy, strategy=strategy)
        n = result.state.global_params.size
        flows = read_flow_csv(tmp_path / strategy / "flows.csv")
        for t in range(1, R + 1):
            up = [f for f in flows if f.round == t and f.direction == "up"]
            if len(up) != client_k or sum(f.param_count for f in up) != client_k * n:
                problems.append((strategy, t))
    ok = not problems
    record(8, ok, f"{R} rounds x 3 strategies: upload rows = {client_k}, volume = {client_k} x parameter count")
    assert ok, problems


if __name__ == "__main__":
    import sys
    import tempfile
    from pathlib import Path

    for name, fn in sorted((k, v) for k, v in globals().items() if k.startswith("test_")):
        try:
            if "tmp_path" in fn.__code__.co_varnames[: fn.__code__.co_argcount]:
                with tempfile.TemporaryDirectory() as d:
                    fn(Path(d))
            else:
                fn()
        except AssertionError:
            pass
    sys.exit(0)
