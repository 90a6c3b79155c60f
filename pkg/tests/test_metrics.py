import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moeimbalance.core import (
    Deployment,
    ExpertLoadProfile,
    ModelArch,
    build_default_deployment,
    constant_trace,
    cyclic_trace,
    load_profile_from_trace,
    write_trace,
)
from moeimbalance.metrics import bottleneck, coverage, device_load, normalized_entropy, sample_tokens, tmi
from moeimbalance.router import SyntheticRouter, repeated_token_trace

from conftest import random_trace


def tmi_oracle(D, Ed, k):
    """Enumerate how many of the k chosen experts can share one device."""
    worst = max(c for c in range(k + 1) if c <= Ed)
    return float(Fraction(worst) / Fraction(k, D))


def test_tmi_mixtral_capped():
    assert tmi(8, 1, 2) == 4.0


def test_tmi_single_device():
    assert tmi(1, 8, 2) == 1.0
    assert tmi(1, 128, 8) == 1.0


def test_tmi_sparse_regime():
    assert tmi(16, 8, 6) == 16.0


@pytest.mark.parametrize("D", [1, 2, 3, 7, 8, 16])
def test_tmi_matches_enumeration(D):
    for Ed in range(1, 20):
        for k in range(1, 20):
            assert tmi(D, Ed, k) == tmi_oracle(D, Ed, k)


def _profile(rho, k):
    return ExpertLoadProfile(k, np.atleast_2d(np.asarray(rho, dtype=float)))


def device_load_oracle(rho_row, mapping_row, D):
    out = []
    for d in range(D):
        members = [rho_row[e] for e in range(len(mapping_row)) if mapping_row[e] == d]
        out.append(sum(members) / len(members))
    return out


def test_device_load_concentrated():
    dep = Deployment(2, np.array([[0, 0, 1, 1]]))
    assert device_load(_profile([1, 1, 0, 0], 2), dep, 0).tolist() == [1.0, 0.0]


def test_device_load_split_pair():
    dep = Deployment(2, np.array([[0, 1, 0, 1]]))
    assert device_load(_profile([1, 1, 0, 0], 2), dep, 0).tolist() == [0.5, 0.5]


def test_device_load_uniform():
    dep = build_default_deployment(ModelArch("a", 1, 8, 2, 10), 4)
    np.testing.assert_allclose(device_load(_profile(np.full(8, 0.25), 2), dep, 0), 0.25)


def test_device_load_empty_device():
    dep = Deployment(3, np.array([[0, 0, 1, 1]]))
    with pytest.raises(ValueError, match="hosts no experts"):
        device_load(_profile([1, 1, 0, 0], 2), dep, 0)


def test_device_load_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        E = int(rng.integers(2, 17))
        D = int(rng.integers(1, E + 1))
        mapping = np.concatenate([np.arange(D), rng.integers(0, D, E - D)])
        rng.shuffle(mapping)
        rho = rng.random(E)
        got = device_load(_profile(rho, 1), Deployment(D, mapping[None, :]), 0)
        np.testing.assert_allclose(got, device_load_oracle(rho, mapping, D), rtol=1e-12)


def test_bottleneck_concentrated_on_one_device():
    arch = ModelArch("a", 4, 8, 2, 10)
    dep = build_default_deployment(arch, 4)  # E_d = 2 = k
    rep = bottleneck(load_profile_from_trace(constant_trace(arch, [2, 3], 10)), dep)
    assert rep.bottleneck == 1.0
    assert rep.argmax_device_per_layer.tolist() == [1] * 4


def test_bottleneck_uniform():
    arch = ModelArch("a", 2, 8, 2, 10)
    rep = bottleneck(load_profile_from_trace(cyclic_trace(arch, 16)), build_default_deployment(arch, 4))
    assert rep.bottleneck == pytest.approx(2 / 8, abs=1e-12)


def test_bottleneck_single_layer_straggler():
    dep = Deployment(2, np.array([[0, 0, 1, 1]]))
    rep = bottleneck(_profile([1, 1, 0, 0], 2), dep)
    assert rep.bottleneck == 1.0 and rep.argmax_device_per_layer.tolist() == [0]
    assert rep.bottleneck == pytest.approx(rep.per_layer_max_load.mean())


def test_bottleneck_bounds_random():
    rng = np.random.default_rng(5)
    for _ in range(200):
        E = int(rng.integers(1, 17))
        k = int(rng.integers(1, min(4, E) + 1))
        arch = ModelArch("r", int(rng.integers(1, 4)), E, k, 10)
        prof = load_profile_from_trace(random_trace(rng, arch, int(rng.integers(1, 30))))
        B = bottleneck(prof, build_default_deployment(arch, int(rng.integers(1, E + 1)))).bottleneck
        assert k / E - 1e-12 <= B <= 1 + 1e-12


def test_concentrated_over_uniform_is_tmi():
    for D, Ed, k in [(2, 4, 2), (4, 2, 2), (4, 8, 3), (8, 4, 4)]:
        E = D * Ed
        arch = ModelArch("x", 1, E, k, 10)
        dep = build_default_deployment(arch, D)
        conc = bottleneck(load_profile_from_trace(constant_trace(arch, range(k), 5)), dep).bottleneck
        unif = bottleneck(load_profile_from_trace(cyclic_trace(arch, E)), dep).bottleneck
        assert conc / unif == pytest.approx(tmi(D, Ed, k), rel=1e-12)


def test_coverage_one_expert_per_device(small_router, small_arch):
    dep = build_default_deployment(small_arch, small_arch.experts_per_layer)
    assert coverage(small_router, dep, range(50), 16).coverage == pytest.approx(1.0, abs=1e-12)


def test_coverage_single_device(small_router, small_arch):
    rep = coverage(small_router, build_default_deployment(small_arch, 1), range(30), 8)
    k, E = small_arch.top_k, small_arch.experts_per_layer
    assert all(b == pytest.approx(k / E) for b in rep.per_token_bottleneck.values())
    assert rep.coverage == pytest.approx(k / E)


def test_coverage_single_token(small_router, small_arch):
    dep = build_default_deployment(small_arch, 2)
    rep = coverage(small_router, dep, [13], 8)
    prof = load_profile_from_trace(repeated_token_trace(small_router, 13, 8))
    assert rep.coverage == bottleneck(prof, dep).bottleneck
    assert rep.tokens_evaluated == 1


def test_coverage_trace_driven_skips_missing(small_router, small_arch):
    dep = build_default_deployment(small_arch, 2)
    traces = {t: repeated_token_trace(small_router, t, 10) for t in (1, 2, 3)}
    rep = coverage(traces, dep, [1, 2, 3, 4], 10)
    assert rep.skipped == [4] and rep.tokens_evaluated == 3
    assert rep.coverage == pytest.approx(coverage(small_router, dep, [1, 2, 3], 10).coverage, abs=0)


def test_coverage_parallel_is_bit_stable(small_router, small_arch):
    dep = build_default_deployment(small_arch, 4)
    a = coverage(small_router, dep, range(120), 8, workers=1)
    b = coverage(small_router, dep, range(120), 8, workers=4)
    assert a.coverage == b.coverage and a.per_token_bottleneck == b.per_token_bottleneck


def test_coverage_monotone_in_ep():
    arch = ModelArch("m", 4, 16, 2, 300)
    r = SyntheticRouter.create(arch, seed=2)
    covs = [coverage(r, build_default_deployment(arch, D), range(300), 4).coverage for D in (1, 2, 4, 8, 16)]
    assert all(a <= b + 1e-12 for a, b in zip(covs, covs[1:]))


def test_entropy_delta():
    arch = ModelArch("a", 2, 8, 1, 10)
    assert normalized_entropy(constant_trace(arch, [3], 20)) == 0.0


def test_entropy_uniform():
    arch = ModelArch("a", 2, 8, 1, 10)
    assert normalized_entropy(cyclic_trace(arch, 8)) == pytest.approx(1.0, abs=1e-9)


def test_entropy_two_atoms():
    arch = ModelArch("a", 3, 8, 2, 10)
    assert normalized_entropy(constant_trace(arch, [1, 6], 9)) == pytest.approx(1 / 3, abs=1e-9)
    assert normalized_entropy(constant_trace(arch, [1, 6], 9)) == pytest.approx(math.log(2) / math.log(8), abs=1e-12)


def test_entropy_single_expert_undefined():
    with pytest.raises(ValueError):
        normalized_entropy(constant_trace(ModelArch("a", 1, 1, 1, 1), [0], 3))


@given(st.integers(0, 10_000))
@settings(max_examples=30)
def test_entropy_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    arch = ModelArch("p", 2, 8, 2, 10)
    prof = load_profile_from_trace(random_trace(rng, arch, 25))
    perm = rng.permutation(8)
    assert normalized_entropy(ExpertLoadProfile(2, prof.rho[:, perm])) == pytest.approx(normalized_entropy(prof), abs=1e-12)


def test_entropy_in_unit_interval():
    rng = np.random.default_rng(9)
    for _ in range(100):
        E = int(rng.integers(2, 17))
        k = int(rng.integers(1, min(4, E) + 1))
        prof = load_profile_from_trace(random_trace(rng, ModelArch("r", 2, E, k, 10), int(rng.integers(1, 30))))
        assert -1e-12 <= normalized_entropy(prof) <= 1 + 1e-12


def test_sample_tokens():
    s = sample_tokens(1000, 50, 3)
    assert len(set(s.tolist())) == 50 and s.max() < 1000
    assert np.array_equal(s, sample_tokens(1000, 50, 3))
    assert sample_tokens(10, None, 0).tolist() == list(range(10))
