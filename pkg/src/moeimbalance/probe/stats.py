"""Latency-ratio statistics and the MoE-vs-dense side-channel decision."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

MOE_LIKELY = "moe-likely"
DENSE_LIKELY = "dense-likely"
INCONCLUSIVE = "inconclusive"

# between the largest dense ratio (1.160) and the smallest MoE ratio (1.514) observed on public APIs
DEFAULT_MOE_THRESHOLD = 1.4
DEFAULT_DENSE_THRESHOLD = 1.2

N_BOOTSTRAP = 10_000


def r_api_ci(attack_ttft, normal_ttft, confidence: float = 0.95, n_resamples: int = N_BOOTSTRAP, seed: int = 0):
    """Point estimate (ratio of means) and one-sided bootstrap lower bound.

    Each arm is resampled independently; the lower bound is the ``1 - confidence``
    percentile of the resampled ratio.
    """
    a = np.asarray(attack_ttft, dtype=np.float64)
    n = np.asarray(normal_ttft, dtype=np.float64)
    if a.size == 0 or n.size == 0:
        raise ValueError("both arms need at least one sample")
    if not 0 < confidence < 1:
        raise ValueError("confidence must be in (0, 1)")
    if n.mean() == 0:
        raise ZeroDivisionError("normal-arm mean is zero")
    point = float(a.mean() / n.mean())
    rng = np.random.default_rng(seed)
    ma = a[rng.integers(0, a.size, size=(n_resamples, a.size))].mean(axis=1)
    mn = n[rng.integers(0, n.size, size=(n_resamples, n.size))].mean(axis=1)
    with np.errstate(divide="ignore"):
        ratios = ma / mn
    lower = float(np.percentile(ratios, 100 * (1 - confidence)))
    # skewed arms can push the percentile above the point estimate; a lower bound must not exceed it
    return point, min(lower, point)


def classify_ratio(point: float, lower: float, moe_threshold=DEFAULT_MOE_THRESHOLD, dense_threshold=DEFAULT_DENSE_THRESHOLD) -> str:
    if not dense_threshold < moe_threshold:
        raise ValueError("dense_threshold must be below moe_threshold")
    if lower >= moe_threshold:
        return MOE_LIKELY
    if point <= dense_threshold:
        return DENSE_LIKELY
    return INCONCLUSIVE


def classify_backend(report, moe_threshold=DEFAULT_MOE_THRESHOLD, dense_threshold=DEFAULT_DENSE_THRESHOLD) -> str:
    if not dense_threshold < moe_threshold:
        raise ValueError("dense_threshold must be below moe_threshold")
    if not report.valid or report.r_api_point is None:
        return INCONCLUSIVE
    return classify_ratio(report.r_api_point, report.r_api_lower95, moe_threshold, dense_threshold)


@dataclass(frozen=True)
class EPEstimate:
    ep: int | None  # smallest tabulated EP reaching the observation; None if none does
    label: str


def estimate_ep_size(observed: float, curve: Mapping[int, float]) -> EPEstimate:
    """Place an observed API ratio on a simulated/measured EP-size -> R_moe curve."""
    if not curve:
        raise ValueError("empty curve table")
    eps = sorted(int(k) for k in curve)
    vals = [float(curve[k]) for k in sorted(curve, key=int)]
    if any(b < a for a, b in zip(vals, vals[1:])):
        raise ValueError("curve must be non-decreasing in EP size")
    for i, (ep, r) in enumerate(zip(eps, vals)):
        if r >= observed:
            if r == observed:
                return EPEstimate(ep, str(ep))
            if i == 0:
                return EPEstimate(ep, f"<= {ep}")
            return EPEstimate(ep, f"({eps[i - 1]}, {ep}]")
    return EPEstimate(None, f"> {eps[-1]}")
