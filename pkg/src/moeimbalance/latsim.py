"""Event-timeline model of one prefill pass under expert parallelism.

Each device runs one grouped GEMM per layer whose duration is linear in the number of
token-expert memberships routed to it; the layer finishes when the straggler does,
followed by the all-reduce.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np

from .core import Deployment, RoutingTrace


@dataclass(frozen=True)
class CostModel:
    per_token_expert_cost: float = 1.0
    per_layer_fixed_cost: float = 0.0
    allreduce_cost: float = 0.0
    attention_cost_per_token: float = 0.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{k} must be finite and >= 0, got {v}")
        if self.per_token_expert_cost <= 0:
            raise ValueError("per_token_expert_cost must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CostModel":
        known = {k: float(d[k]) for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def load_cost_model(path) -> CostModel:
    return CostModel.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def cost_presets() -> dict[str, CostModel]:
    """Shipped presets. Their constants are synthetic, not measurements."""
    raw = json.loads(resources.files("moeimbalance").joinpath("data/cost_presets.json").read_text("utf-8"))
    return {k: CostModel.from_dict(v) for k, v in raw.items() if not k.startswith("_")}


@dataclass(frozen=True)
class TimelineReport:
    per_layer_device_busy: np.ndarray  # (L, D)
    per_layer_moe_time: np.ndarray  # (L,) straggler busy + all-reduce
    per_layer_idle: np.ndarray  # (L, D)
    total_prefill_time: float
    bottleneck_device_moe_time: np.ndarray  # (L,) kernel time on the straggler
    straggler_per_layer: np.ndarray
    num_tokens: int
    attention_time_per_layer: float

    def to_dict(self) -> dict:
        return {
            "num_tokens": self.num_tokens,
            "total_prefill_time": self.total_prefill_time,
            "attention_time_per_layer": self.attention_time_per_layer,
            "per_layer_moe_time": self.per_layer_moe_time.tolist(),
            "bottleneck_device_moe_time": self.bottleneck_device_moe_time.tolist(),
            "straggler_per_layer": [int(d) for d in self.straggler_per_layer],
            "per_layer_device_busy": self.per_layer_device_busy.tolist(),
            "per_layer_idle": self.per_layer_idle.tolist(),
        }

    def gantt_rows(self) -> Iterable[tuple]:
        """``(layer, phase, device, start, end)`` rows; device is -1 for cluster-wide phases."""
        t = 0.0
        _, D = self.per_layer_device_busy.shape
        for l, moe in enumerate(self.per_layer_moe_time):
            if self.attention_time_per_layer:
                yield l, "attention", -1, t, t + self.attention_time_per_layer
                t += self.attention_time_per_layer
            straggler = self.bottleneck_device_moe_time[l]
            for d in range(D):
                busy = self.per_layer_device_busy[l, d]
                yield l, "moe", d, t, t + busy
                if self.per_layer_idle[l, d] > 0:
                    yield l, "idle", d, t + busy, t + straggler
            t += straggler
            ar = moe - straggler
            if ar > 0:
                yield l, "allreduce", -1, t, t + ar
            t += ar


def device_memberships(trace: RoutingTrace, deployment: Deployment) -> np.ndarray:
    """(L, D) count of token-expert memberships landing on each device."""
    L = trace.arch.layers
    out = np.zeros((L, deployment.num_devices), dtype=np.int64)
    for l in range(L):
        dev = deployment.mapping[l][trace.experts[l].ravel()]
        out[l] = np.bincount(dev, minlength=deployment.num_devices)
    return out


def simulate_prefill(trace: RoutingTrace, deployment: Deployment, cost: CostModel | None = None) -> TimelineReport:
    cost = cost or CostModel()
    deployment.check_arch(trace.arch)
    L, D, N = trace.arch.layers, deployment.num_devices, trace.num_tokens
    if N == 0:
        z = np.zeros((L, D))
        return TimelineReport(z, np.zeros(L), z.copy(), 0.0, np.zeros(L), np.zeros(L, dtype=np.int64), 0, 0.0)
    counts = device_memberships(trace, deployment)
    busy = cost.per_layer_fixed_cost + cost.per_token_expert_cost * counts
    straggler_time = busy.max(axis=1)
    moe = straggler_time + cost.allreduce_cost
    idle = straggler_time[:, None] - busy
    attn = cost.attention_cost_per_token * N
    total = float(np.sum(attn + moe))
    return TimelineReport(busy, moe, idle, total, straggler_time, busy.argmax(axis=1), N, attn)


def r_moe(attack: TimelineReport, normal: TimelineReport, layer: int | None = None) -> float:
    """Straggler MoE-kernel time ratio at ``layer``; ``None`` averages the per-layer ratios."""
    if attack.num_tokens != normal.num_tokens:
        raise ValueError("attack and normal reports must cover equal token counts")
    a, n = attack.bottleneck_device_moe_time, normal.bottleneck_device_moe_time
    if a.shape != n.shape:
        raise ValueError("reports come from different layer counts")
    if layer is not None:
        if n[layer] == 0:
            raise ZeroDivisionError("normal MoE time is zero")
        return float(a[layer] / n[layer])
    if np.any(n == 0):
        raise ZeroDivisionError("normal MoE time is zero")
    return float(np.mean(a / n))


def calibrate_cost_model(samples, base: CostModel | None = None) -> tuple[CostModel, np.ndarray]:
    """Least-squares fit of ``time = fixed + slope * tokens``.

    Returns the fitted model (other constants copied from ``base``) and the residuals.
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("samples must be (token_count, observed_time) pairs")
    x, y = arr[:, 0], arr[:, 1]
    if np.unique(x).size < 2:
        raise ValueError("need at least two distinct token counts (rank-deficient fit)")
    A = np.column_stack([x, np.ones_like(x)])
    (slope, fixed), *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ np.array([slope, fixed])
    base = base or CostModel()
    fitted = CostModel(
        per_token_expert_cost=float(slope),
        per_layer_fixed_cost=max(float(fixed), 0.0),
        allreduce_cost=base.allreduce_cost,
        attention_cost_per_token=base.attention_cost_per_token,
    )
    return fitted, resid
