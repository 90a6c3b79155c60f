"""Imbalance metrics: theoretical maximum imbalance, per-device load, the layer-averaged
bottleneck, vocabulary coverage and normalized routing entropy."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Mapping, Union

import numpy as np

from .core import Deployment, ExpertLoadProfile, RoutingTrace, load_profile_from_trace
from .router import SyntheticRouter, repeated_token_trace

# a synthetic router, or ingested repetition traces keyed by token id
ProfileSource = Union[SyntheticRouter, Mapping[int, RoutingTrace]]


def tmi(num_devices: int, experts_per_device: int, top_k: int) -> float:
    """Worst-case single-device load over the ideal balanced load."""
    if min(num_devices, experts_per_device, top_k) < 1:
        raise ValueError("all inputs must be positive")
    return num_devices * min(top_k, experts_per_device) / top_k


@dataclass(frozen=True)
class BottleneckReport:
    per_layer_max_load: np.ndarray
    bottleneck: float
    argmax_device_per_layer: np.ndarray

    def to_dict(self) -> dict:
        return {
            "bottleneck": self.bottleneck,
            "per_layer_max_load": [float(x) for x in self.per_layer_max_load],
            "argmax_device_per_layer": [int(d) for d in self.argmax_device_per_layer],
        }


@dataclass(frozen=True)
class CoverageReport:
    per_token_bottleneck: dict[int, float]
    coverage: float
    tokens_evaluated: int
    tokens_requested: int = 0
    skipped: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "coverage": self.coverage,
            "tokens_evaluated": self.tokens_evaluated,
            "tokens_requested": self.tokens_requested,
            "skipped": list(self.skipped),
            "per_token_bottleneck": {str(t): b for t, b in self.per_token_bottleneck.items()},
        }


def _layer_loads(profile: ExpertLoadProfile, deployment: Deployment, layer: int) -> np.ndarray:
    row = deployment.mapping[layer]
    counts = np.bincount(row, minlength=deployment.num_devices)
    if np.any(counts == 0):
        raise ValueError(f"layer {layer}: device {int(np.argmin(counts))} hosts no experts")
    return np.bincount(row, weights=profile.rho[layer], minlength=deployment.num_devices) / counts


def _check(profile: ExpertLoadProfile, deployment: Deployment) -> None:
    if deployment.mapping.shape != profile.rho.shape:
        raise ValueError(
            f"deployment covers {deployment.mapping.shape} layers x experts, profile has {profile.rho.shape}"
        )


def device_load(profile: ExpertLoadProfile, deployment: Deployment, layer: int) -> np.ndarray:
    """Mean ``rho`` over the experts hosted on each device at ``layer``."""
    _check(profile, deployment)
    return _layer_loads(profile, deployment, layer)


def bottleneck(profile: ExpertLoadProfile, deployment: Deployment) -> BottleneckReport:
    _check(profile, deployment)
    loads = np.stack([_layer_loads(profile, deployment, l) for l in range(profile.layers)])
    per_layer = loads.max(axis=1)
    return BottleneckReport(per_layer, float(per_layer.mean()), loads.argmax(axis=1))


def repetition_profiles(
    source: ProfileSource, tokens: Iterable[int], repeat_length: int, workers: int = 1
) -> Iterator[tuple[int, ExpertLoadProfile | None]]:
    """Yield ``(token, profile)`` for each token's repetition prompt, in input order.

    With an ingested trace set, tokens lacking a trace yield ``None``.
    """
    if repeat_length < 1:
        raise ValueError("repeat_length must be >= 1")
    tokens = [int(t) for t in tokens]

    if isinstance(source, SyntheticRouter):
        def one(t):
            return load_profile_from_trace(repeated_token_trace(source, t, repeat_length))
    else:
        def one(t):
            tr = source.get(t)
            if tr is None or tr.num_tokens == 0:
                return None
            return load_profile_from_trace(tr)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            yield from zip(tokens, pool.map(one, tokens))
    else:
        for t in tokens:
            yield t, one(t)


def coverage(
    source: ProfileSource,
    deployment: Deployment,
    token_subset: Iterable[int],
    repeat_length: int = 64,
    workers: int = 1,
) -> CoverageReport:
    """Mean repetition-prompt bottleneck over ``token_subset`` (sorted, de-duplicated)."""
    tokens = sorted({int(t) for t in token_subset})
    if not tokens:
        raise ValueError("token_subset must be non-empty")
    per_token: dict[int, float] = {}
    skipped: list[int] = []
    for t, prof in repetition_profiles(source, tokens, repeat_length, workers):
        if prof is None:
            skipped.append(t)
        else:
            per_token[t] = bottleneck(prof, deployment).bottleneck
    if not per_token:
        raise ValueError("no token in the subset has an available trace")
    total = 0.0
    for t in tokens:
        if t in per_token:
            total += per_token[t]
    return CoverageReport(per_token, total / len(per_token), len(per_token), len(tokens), skipped)


def normalized_entropy(obj: ExpertLoadProfile | RoutingTrace) -> float:
    """Layer-averaged entropy of the expert-selection distribution, divided by ``log E``.

    Membership fractions are divided by ``k`` first so each layer's distribution sums to 1.
    """
    profile = load_profile_from_trace(obj) if isinstance(obj, RoutingTrace) else obj
    E = profile.experts_per_layer
    if E == 1:
        raise ValueError("entropy undefined for a single expert (log E = 0)")
    p = profile.rho / profile.top_k
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    per_layer = -terms.sum(axis=1) / np.log(E)
    return float(per_layer.mean())


def sample_tokens(vocab_size: int, n: int | None, seed: int) -> np.ndarray:
    """Seeded uniform sample without replacement; ``n=None`` (or n >= vocab) sweeps all ids."""
    if n is None or n >= vocab_size:
        return np.arange(vocab_size)
    if n < 1:
        raise ValueError("sample size must be >= 1")
    return np.sort(np.random.default_rng(seed).choice(vocab_size, size=n, replace=False))
