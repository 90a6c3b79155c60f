"""End-to-end acceptance gate, one test per criterion.

Each test is timed against its runtime limit; the terminal summary prints one
PASS/FAIL line per criterion (see ``conftest.py``).
"""

import functools
import itertools
import json
import math
import time

import numpy as np
import pytest

from moeimbalance import cli
from moeimbalance.core import (
    ExpertLoadProfile,
    ModelArch,
    build_default_deployment,
    constant_trace,
    cyclic_trace,
    read_trace,
    trace_from_experts,
    write_trace,
)
from moeimbalance.defense import (
    balance_by_vulnerability,
    evaluate_defense,
    filter_prompt,
    ppl_proxy,
    vulnerability_scan,
)
from moeimbalance.latsim import CostModel, r_moe, simulate_prefill
from moeimbalance.metrics import bottleneck, coverage, normalized_entropy, tmi
from moeimbalance.core import load_profile_from_trace
from moeimbalance.probe import DENSE_LIKELY, MOE_LIKELY, EndpointConfig, MockEndpoint, classify_backend, run_probe
from moeimbalance.prompts import attack_specs, normal_specs
from moeimbalance.router import SyntheticRouter, repeated_token_trace


def timed(limit_s):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            t0 = time.perf_counter()
            fn(*args, **kwargs)
            elapsed = time.perf_counter() - t0
            kwargs["record_property"]("elapsed_s", round(elapsed, 2))
            assert elapsed < limit_s, f"runtime {elapsed:.1f}s exceeds {limit_s}s"
        return wrapper
    return deco


def _random_trace(rng, arch, n):
    ex = [rng.choice(arch.experts_per_layer, arch.top_k, replace=False) for _ in range(arch.layers * n)]
    return trace_from_experts(arch, np.array(ex, dtype=np.int64).reshape(arch.layers, n, arch.top_k))


def _tmi_enumeration(n):
    # a device can hold j of a token's k selections for every j it has room for;
    # its load relative to the balanced share k / D is maximized over j
    D, Ed, k, j = np.meshgrid(*(np.arange(1, n + 1, dtype=np.int16),) * 3, np.arange(n + 1, dtype=np.int16),
                              indexing="ij", sparse=True)
    jmax = np.where((j <= k) & (j <= Ed), j, 0).max(axis=3)
    D, Ed, k = D[..., 0], Ed[..., 0], k[..., 0]
    return D.astype(np.int64) * jmax / k  # int / int: correctly rounded


@timed(1)
def test_criterion_01_tmi_oracle(record_property):
    oracle = _tmi_enumeration(64)
    got = np.array([[[tmi(D, Ed, k) for k in range(1, 65)] for Ed in range(1, 65)] for D in range(1, 65)])
    bad = np.argwhere(got != oracle)
    assert bad.size == 0, f"{len(bad)} mismatches, first (D,Ed,k)={tuple(bad[0] + 1)}"
    assert tmi(8, 1, 2) == 4


@timed(30)
def test_criterion_02_bottleneck_coverage_bounds(record_property):
    rng = np.random.default_rng(2024)
    for i in range(1000):
        E = int(rng.integers(1, 17))
        k = int(rng.integers(1, min(4, E) + 1))
        arch = ModelArch("r", int(rng.integers(1, 4)), E, k, 50)
        D = int(rng.integers(1, E + 1))
        dep = build_default_deployment(arch, D)
        B = bottleneck(load_profile_from_trace(_random_trace(rng, arch, int(rng.integers(1, 40)))), dep).bottleneck
        assert k / E - 1e-12 <= B <= 1 + 1e-12
        if i % 10 == 0:
            traces = {t: _random_trace(rng, arch, 8) for t in range(5)}
            cov = coverage(traces, dep, range(5)).coverage
            assert k / E - 1e-12 <= cov <= 1 + 1e-12
            conc = {t: constant_trace(arch, rng.choice(E, k, replace=False), 8) for t in range(5)}
            assert coverage(conc, build_default_deployment(arch, E), range(5)).coverage == pytest.approx(1.0, abs=1e-9)


@timed(120)
def test_criterion_03_coverage_monotone_in_ep(record_property):
    arch = ModelArch("synthetic-32e", 8, 32, 2, 2000)
    router = SyntheticRouter.create(arch, seed=0)
    covs = [coverage(router, build_default_deployment(arch, D), range(arch.vocab_size)).coverage for D in (2, 4, 8, 16, 32)]
    record_property("coverage", [round(c, 4) for c in covs])
    assert all(b >= a for a, b in zip(covs, covs[1:])), covs


@timed(10)
def test_criterion_04_latency_oracle(record_property):
    rng = np.random.default_rng(11)
    for _ in range(200):
        D, Ed = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        k = int(rng.integers(1, Ed + 1))
        E = D * Ed
        arch = ModelArch("c", int(rng.integers(1, 4)), E, k, 10)
        N = E * int(rng.integers(1, 5))
        dep = build_default_deployment(arch, D)
        conc, unif = constant_trace(arch, range(k), N), cyclic_trace(arch, N)
        # power-of-two costs keep every product exact in binary floating point
        exact = CostModel(per_token_expert_cost=2.0 ** int(rng.integers(-4, 5)))
        assert r_moe(simulate_prefill(conc, dep, exact), simulate_prefill(unif, dep, exact)) == tmi(D, Ed, k)
        any_cost = CostModel(per_token_expert_cost=float(rng.uniform(0.1, 3)))
        r = r_moe(simulate_prefill(conc, dep, any_cost), simulate_prefill(unif, dep, any_cost))
        assert r == pytest.approx(tmi(D, Ed, k), rel=1e-12)
        over = CostModel(float(rng.uniform(0.1, 3)), float(rng.uniform(0.01, 5)), float(rng.uniform(0.01, 5)),
                         float(rng.uniform(0, 2)))
        r = r_moe(simulate_prefill(conc, dep, over), simulate_prefill(unif, dep, over))
        assert 1 - 1e-12 <= r <= tmi(D, Ed, k) + 1e-12


@timed(60)
def test_criterion_05_entropy(record_property):
    assert normalized_entropy(ExpertLoadProfile(1, np.eye(1, 8))) == 0.0
    assert normalized_entropy(ExpertLoadProfile(2, np.full((3, 8), 0.25))) == pytest.approx(1.0, abs=1e-9)
    two = np.zeros((1, 8))
    two[0, :2] = 1.0
    assert normalized_entropy(ExpertLoadProfile(2, two)) == pytest.approx(1 / 3, abs=1e-9)
    arch = ModelArch("synthetic-32e", 8, 32, 2, 2000)
    router = SyntheticRouter.create(arch, seed=0)
    for token in (0, 17, 1999):
        ents = [normalized_entropy(repeated_token_trace(router, token, n)) for n in (100, 1000, 4000, 16000)]
        assert max(ents) - min(ents) <= 1e-9


def _brute_force_opt(v, D):
    E = len(v)
    cap = E // D
    best = math.inf
    for assign in itertools.product(range(D), repeat=E):
        counts = np.bincount(assign, minlength=D)
        if (counts == cap).all():
            best = min(best, np.bincount(assign, weights=v, minlength=D).max())
    return best


@timed(60)
def test_criterion_06_greedy_placement(record_property):
    assert balance_by_vulnerability([10, 8, 2, 1], 2).tolist() == [0, 1, 1, 0]
    rng = np.random.default_rng(5)
    shapes = [(E, D) for E in range(1, 9) for D in range(1, 5) if E % D == 0]
    worst = 1.0
    for i in range(500):
        E, D = shapes[i % len(shapes)]
        v = rng.integers(0, 50, E)
        out = balance_by_vulnerability(v, D)
        assert (np.bincount(out, minlength=D) == E // D).all()
        got = np.bincount(out, weights=v, minlength=D).max()
        opt = _brute_force_opt(v, D)
        assert got <= 1.5 * opt + 1e-9
        if opt:
            worst = max(worst, got / opt)
    record_property("worst_ratio", round(float(worst), 4))


@timed(120)
def test_criterion_07_defense_direction(record_property):
    arch = ModelArch("synthetic-attractor", 6, 32, 2, 800)
    router = SyntheticRouter.create(arch, seed=4, attractors=4)
    tokens = range(arch.vocab_size)
    vmap = vulnerability_scan(router, arch, tokens)
    changes = {}
    for D in (4, 8):
        assert arch.experts_per_layer // D >= arch.top_k
        ev = evaluate_defense(router, arch, vmap, D, tokens)
        changes[D] = round(ev.relative_change, 4)
        assert ev.coverage_after < ev.coverage_before, (D, ev.coverage_before, ev.coverage_after)
    record_property("relative_change", changes)


def _probe(ratio, corpus, n=50):
    with MockEndpoint(base_latency=0.05, attack_ratio=ratio, noise=0.1, seed=3) as mock:
        ep = EndpointConfig(mock.base_url, "mock-moe", max_requests=2 * n)
        rep = run_probe(ep, attack_specs(n, 2000, seed=1), normal_specs(n, 2000, corpus))
        assert mock.request_count <= ep.max_requests
    assert rep.requests_made <= ep.max_requests
    return rep


@timed(60)
def test_criterion_08_probe_integration(record_property, tmp_path):
    rng = np.random.default_rng(0)
    corpus = tmp_path / "corpus.txt"
    corpus.write_text("\n".join(" ".join(f"w{x}" for x in rng.integers(0, 30_000, 2500)) for _ in range(60)))
    moe = _probe(3.0, corpus)
    record_property("r_api", [round(moe.r_api_point, 3), round(moe.r_api_lower95, 3)])
    assert 2.7 <= moe.r_api_point <= 3.3
    assert moe.r_api_lower95 < moe.r_api_point
    assert classify_backend(moe) == MOE_LIKELY
    assert classify_backend(_probe(1.0, corpus)) == DENSE_LIKELY


@timed(10)
def test_criterion_09_filter_separation(record_property):
    rng = np.random.default_rng(9)
    reps = [[int(t)] * n for t, n in zip(rng.integers(0, 32_000, 10), (1, 2, 10, 100, 1000, 5000, 20_000, 20_000, 7, 64))]
    rand = [rng.integers(0, 32_000, 20_000).tolist() for _ in range(10)]
    for p in reps:
        assert ppl_proxy(p) == 1.0
        assert not filter_prompt(p, 2.0).accept
    scores = []
    for p in rand:
        scores.append(ppl_proxy(p))
        assert scores[-1] > 4
        assert filter_prompt(p, 2.0).accept
    record_property("min_random_ppl", round(min(scores), 1))


@timed(30)
def test_criterion_10_serialization_and_replay(record_property, tmp_path, monkeypatch):
    rng = np.random.default_rng(10)
    for i in range(100):
        E = int(rng.integers(1, 17))
        arch = ModelArch(f"a{i}", int(rng.integers(1, 4)), E, int(rng.integers(1, min(4, E) + 1)), 100)
        t = _random_trace(rng, arch, int(rng.integers(0, 30)))
        write_trace(t, tmp_path / "t.jsonl")
        assert read_trace(tmp_path / "t.jsonl") == t

    monkeypatch.chdir(tmp_path)
    (tmp_path / "arch.json").write_text(json.dumps(
        {"name": "tiny", "layers": 2, "experts_per_layer": 8, "top_k": 2, "vocab_size": 40}))
    (tmp_path / "in.jsonl").write_text("[1,1,1,1]\n[1,2,3,4]\n")
    (tmp_path / "corpus.txt").write_text("a b c d e\nf g h i\n")
    runs = {
        "trace": ["trace", "--arch", "arch.json", "--token", "3", "--length", "40"],
        "baseline": ["trace", "--arch", "arch.json", "--mode", "baseline", "--length", "40"],
        "tmi": ["metrics", "tmi", "--devices", "8", "--experts-per-device", "1", "--top-k", "2"],
        "coverage": ["metrics", "coverage", "--arch", "arch.json", "--devices", "4", "--full", "--repeat-length", "16"],
        "bottleneck": ["metrics", "bottleneck", "--trace", "trace/trace.jsonl", "--devices", "4"],
        "profile": ["metrics", "profile", "--trace", "trace/trace.jsonl"],
        "simulate": ["simulate", "--trace", "trace/trace.jsonl", "--normal", "baseline/trace.jsonl", "--devices", "4"],
        "scan": ["scan", "--arch", "arch.json", "--full", "--repeat-length", "16"],
        "defend": ["defend", "--vmap", "scan/vmap.json", "--devices", "4", "--arch", "arch.json", "--full",
                   "--repeat-length", "16"],
        "filter": ["filter", "--input", "in.jsonl"],
        "prompt": ["prompt", "--length", "50", "--count", "2"],
        "prompt_normal": ["prompt", "--kind", "normal", "--corpus", "corpus.txt", "--length", "12", "--count", "2"],
    }
    for name, argv in runs.items():
        assert cli.main(argv + ["--out-dir", name]) == 0, name
    for name in runs:
        assert cli.main(["replay", "--manifest", f"{name}/manifest.json", "--out-dir", f"replay_{name}"]) == 0, name
        assert json.loads((tmp_path / f"replay_{name}" / "replay.json").read_text())["identical"] is True
    assert {json.loads((tmp_path / n / "manifest.json").read_text())["subcommand"] for n in runs} == cli.OFFLINE
