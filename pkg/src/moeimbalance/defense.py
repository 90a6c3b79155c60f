"""Mitigations: vulnerable-expert scanning, vulnerability-aware expert placement and a
repetition filter scored by a unigram perplexity proxy."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import Deployment, ModelArch, build_default_deployment
from .metrics import CoverageReport, ProfileSource, coverage, repetition_profiles

DEFAULT_TAU = 0.9
DEFAULT_FILTER_THRESHOLD = 2.0


@dataclass(frozen=True)
class VulnerabilityMap:
    """``v[l, e]``: scanned tokens whose repetition prompt puts ``rho[l, e] >= tau``."""

    v: np.ndarray  # (L, E) int
    tau: float
    tokens_scanned: int
    skipped: tuple[int, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.int64)
        if v.ndim != 2:
            raise ValueError("v must be a (layers, experts) matrix")
        if v.size and (v.min() < 0 or v.max() > self.tokens_scanned):
            raise ValueError("v entries must lie in [0, tokens_scanned]")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must be in (0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "v", v)

    def to_dict(self) -> dict:
        return {"tau": self.tau, "tokens_scanned": self.tokens_scanned, "skipped": list(self.skipped), "v": self.v.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "VulnerabilityMap":
        for f in ("tau", "tokens_scanned", "v"):
            if f not in d:
                raise ValueError(f"vulnerability map missing field {f!r}")
        return cls(np.asarray(d["v"], dtype=np.int64), float(d["tau"]), int(d["tokens_scanned"]), tuple(d.get("skipped", ())))


def load_vulnerability_map(path) -> VulnerabilityMap:
    return VulnerabilityMap.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def vulnerability_scan(
    source: ProfileSource,
    arch: ModelArch,
    token_subset: Iterable[int],
    repeat_length: int = 64,
    tau: float = DEFAULT_TAU,
    workers: int = 1,
) -> VulnerabilityMap:
    if not 0 < tau <= 1:
        raise ValueError("tau must be in (0, 1]")
    tokens = sorted({int(t) for t in token_subset})
    v = np.zeros((arch.layers, arch.experts_per_layer), dtype=np.int64)
    scanned = 0
    skipped = []
    for t, prof in repetition_profiles(source, tokens, repeat_length, workers):
        if prof is None:
            skipped.append(t)
            continue
        v += prof.rho >= tau
        scanned += 1
    return VulnerabilityMap(v, tau, scanned, tuple(skipped))


def balance_by_vulnerability(v: Sequence[int], num_devices: int) -> np.ndarray:
    """Greedy vulnerability-aware placement for one layer.

    Experts are visited in descending ``v`` (stable: lower index first on ties) and each
    goes to the device with the least accumulated vulnerability that still has spare
    capacity ``E / D`` (lower device index on ties). Returns expert -> device.
    """
    v = np.asarray(v)
    E = v.shape[0]
    if num_devices < 1:
        raise ValueError("num_devices must be positive")
    if E % num_devices:
        raise ValueError(f"{E} experts are not divisible across {num_devices} devices")
    cap = E // num_devices
    V = np.zeros(num_devices, dtype=v.dtype if v.dtype.kind in "if" else np.float64)
    C = np.zeros(num_devices, dtype=np.int64)
    out = np.full(E, -1, dtype=np.int64)
    for e in np.argsort(-v, kind="stable"):
        open_ = np.flatnonzero(C < cap)
        d = open_[np.argmin(V[open_])]
        out[e] = d
        V[d] += v[e]
        C[d] += 1
    return out


def defended_deployment(vmap: VulnerabilityMap, num_devices: int) -> Deployment:
    """Run the placement independently for every layer."""
    return Deployment(num_devices, np.stack([balance_by_vulnerability(row, num_devices) for row in vmap.v]))


@dataclass(frozen=True)
class DefenseEvaluation:
    before: CoverageReport
    after: CoverageReport
    deployment: Deployment

    @property
    def coverage_before(self) -> float:
        return self.before.coverage

    @property
    def coverage_after(self) -> float:
        return self.after.coverage

    @property
    def relative_change(self) -> float:
        return (self.after.coverage - self.before.coverage) / self.before.coverage


def evaluate_defense(
    source: ProfileSource,
    arch: ModelArch,
    vmap: VulnerabilityMap,
    num_devices: int,
    token_subset: Iterable[int],
    repeat_length: int = 64,
    workers: int = 1,
) -> DefenseEvaluation:
    """Coverage under index-order placement vs. the vulnerability-aware placement."""
    tokens = list(token_subset)
    defended = defended_deployment(vmap, num_devices)
    before = coverage(source, build_default_deployment(arch, num_devices), tokens, repeat_length, workers)
    after = coverage(source, defended, tokens, repeat_length, workers)
    return DefenseEvaluation(before, after, defended)


def ppl_proxy(token_ids: Sequence) -> float:
    """exp of the unigram Shannon entropy of the sequence (a stand-in for LM perplexity)."""
    counts = np.fromiter(Counter(token_ids).values(), dtype=np.float64)
    if counts.size == 0:
        raise ValueError("empty sequence")
    if np.all(counts == counts[0]):
        # uniform unigram distribution: perplexity is exactly the support size
        return float(counts.size)
    p = counts / counts.sum()
    return math.exp(-float(np.sum(p * np.log(p))))


@dataclass(frozen=True)
class FilterDecision:
    accept: bool
    score: float

    @property
    def label(self) -> str:
        return "accept" if self.accept else "reject"


def filter_prompt(token_ids: Sequence, threshold: float = DEFAULT_FILTER_THRESHOLD) -> FilterDecision:
    """Reject when the proxy score is strictly below ``threshold``."""
    if not threshold > 1:
        raise ValueError("threshold must be > 1")
    score = ppl_proxy(token_ids)
    return FilterDecision(score >= threshold, score)
