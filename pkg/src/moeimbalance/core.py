"""Domain types shared by every module: architectures, deployments, routing traces
and per-expert load profiles, plus their file formats."""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ConfigError(ValueError):
    """Invalid architecture / deployment configuration. ``field`` names the culprit."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


class TraceParseError(ValueError):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ModelArch:
    name: str
    layers: int
    experts_per_layer: int
    top_k: int
    vocab_size: int

    def __post_init__(self):
        for f in ("layers", "experts_per_layer", "top_k", "vocab_size"):
            v = getattr(self, f)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ConfigError(f, f"expected a positive integer, got {v!r}")
            if v < 1:
                raise ConfigError(f, f"must be positive, got {v}")
        if self.top_k > self.experts_per_layer:
            raise ConfigError("top_k", "top_k exceeds experts_per_layer")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "layers": int(self.layers),
            "experts_per_layer": int(self.experts_per_layer),
            "top_k": int(self.top_k),
            "vocab_size": int(self.vocab_size),
        }


_ARCH_FIELDS = ("name", "layers", "experts_per_layer", "top_k", "vocab_size")


def arch_from_dict(d: dict) -> ModelArch:
    if not isinstance(d, dict):
        raise ConfigError("<root>", "architecture config must be a JSON object")
    for f in _ARCH_FIELDS:
        if f not in d:
            raise ConfigError(f, "missing required field")
    if not isinstance(d["name"], str):
        raise ConfigError("name", "must be a string")
    return ModelArch(**{f: d[f] for f in _ARCH_FIELDS})


def load_arch_config(path) -> ModelArch:
    """Read and validate a JSON architecture file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise ConfigError("<file>", f"not UTF-8: {exc}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    return arch_from_dict(d)


def preset_archs() -> dict[str, ModelArch]:
    """Architectures of the models studied (layer count, experts, top-k, vocab)."""
    raw = json.loads(resources.files("moeimbalance").joinpath("data/archs.json").read_text("utf-8"))
    return {d["name"]: arch_from_dict(d) for d in raw}


@dataclass(frozen=True, eq=False)
class Deployment:
    """Expert-to-device placement. ``mapping[l][e]`` is the device hosting expert ``e``
    at layer ``l``; each row is a partition of the layer's experts."""

    num_devices: int
    mapping: np.ndarray  # (L, E) int

    def __post_init__(self):
        if self.num_devices < 1:
            raise ConfigError("num_devices", "must be positive")
        m = np.asarray(self.mapping)
        if m.ndim != 2:
            raise ConfigError("mapping", "expected one expert->device row per layer")
        if not np.issubdtype(m.dtype, np.integer):
            raise ConfigError("mapping", "device indices must be integers")
        if m.size and (m.min() < 0 or m.max() >= self.num_devices):
            raise ConfigError("mapping", f"device index outside [0, {self.num_devices})")
        object.__setattr__(self, "mapping", _frozen(m.astype(np.int64)))

    @property
    def layers(self) -> int:
        return self.mapping.shape[0]

    @property
    def experts_per_layer(self) -> int:
        return self.mapping.shape[1]

    def experts_on(self, layer: int, device: int) -> np.ndarray:
        return np.flatnonzero(self.mapping[layer] == device)

    def device_expert_counts(self) -> np.ndarray:
        """(L, D) number of experts per device per layer."""
        out = np.zeros((self.layers, self.num_devices), dtype=np.int64)
        for l in range(self.layers):
            out[l] = np.bincount(self.mapping[l], minlength=self.num_devices)
        return out

    def check_arch(self, arch: ModelArch) -> None:
        if self.mapping.shape != (arch.layers, arch.experts_per_layer):
            raise ConfigError(
                "mapping",
                f"shape {self.mapping.shape} does not match arch "
                f"({arch.layers} layers x {arch.experts_per_layer} experts)",
            )

    def to_dict(self) -> dict:
        return {
            "num_devices": int(self.num_devices),
            "mapping": [[int(d) for d in row] for row in self.mapping],
            "device_experts": [
                [[int(e) for e in self.experts_on(l, d)] for d in range(self.num_devices)]
                for l in range(self.layers)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Deployment":
        if "num_devices" not in d or "mapping" not in d:
            raise ConfigError("mapping", "deployment requires num_devices and mapping")
        return cls(int(d["num_devices"]), np.asarray(d["mapping"], dtype=np.int64))

    def __eq__(self, other):
        if not isinstance(other, Deployment):
            return NotImplemented
        return self.num_devices == other.num_devices and np.array_equal(self.mapping, other.mapping)

    __hash__ = None


def build_default_deployment(arch: ModelArch, num_devices: int) -> Deployment:
    """Contiguous index-order blocks; the first ``E mod D`` devices get one extra expert."""
    E = arch.experts_per_layer
    if num_devices < 1:
        raise ConfigError("num_devices", "must be positive")
    if num_devices > E:
        raise ConfigError("num_devices", f"{num_devices} devices for {E} experts leaves a device empty")
    base, rem = divmod(E, num_devices)
    counts = [base + (1 if d < rem else 0) for d in range(num_devices)]
    row = np.repeat(np.arange(num_devices), counts)
    return Deployment(num_devices, np.tile(row, (arch.layers, 1)))


@dataclass(frozen=True, eq=False)
class RoutingTrace:
    """Per-layer top-k selections for a token sequence.

    ``experts`` and ``weights`` have shape ``(layers, num_tokens, top_k)``.
    """

    arch: ModelArch
    experts: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        a = self.arch
        ex = np.asarray(self.experts)
        w = np.asarray(self.weights, dtype=np.float64)
        if ex.size == 0:
            ex = ex.reshape(a.layers, 0, a.top_k).astype(np.int64)
            w = w.reshape(a.layers, 0, a.top_k)
        if ex.ndim != 3 or ex.shape[0] != a.layers or ex.shape[2] != a.top_k:
            raise ValueError(f"experts must have shape (layers={a.layers}, N, top_k={a.top_k}), got {ex.shape}")
        if w.shape != ex.shape:
            raise ValueError("weights shape must match experts shape")
        if not np.issubdtype(ex.dtype, np.integer):
            raise ValueError("expert indices must be integers")
        if ex.size:
            if ex.min() < 0 or ex.max() >= a.experts_per_layer:
                raise ValueError("expert index out of range")
            s = np.sort(ex, axis=2)
            if a.top_k > 1 and np.any(s[:, :, 1:] == s[:, :, :-1]):
                raise ValueError("expert indices within one (layer, token) must be distinct")
            if not np.all(np.isfinite(w)) or w.min() < 0:
                raise ValueError("gate weights must be finite and non-negative")
            if np.any(np.abs(w.sum(axis=2) - 1.0) > 1e-6):
                raise ValueError("gate weights must sum to 1 per (layer, token)")
        object.__setattr__(self, "experts", _frozen(ex.astype(np.int64)))
        object.__setattr__(self, "weights", _frozen(w))

    @property
    def num_tokens(self) -> int:
        return self.experts.shape[1]

    def __eq__(self, other):
        if not isinstance(other, RoutingTrace):
            return NotImplemented
        return (
            self.arch == other.arch
            and np.array_equal(self.experts, other.experts)
            and np.array_equal(self.weights, other.weights)
        )

    __hash__ = None


def empty_trace(arch: ModelArch) -> RoutingTrace:
    z = np.zeros((arch.layers, 0, arch.top_k))
    return RoutingTrace(arch, z.astype(np.int64), z)


def trace_from_experts(arch: ModelArch, experts, weights=None) -> RoutingTrace:
    """Build a trace from an ``(L, N, k)`` selection array; weights default to 1/k."""
    ex = np.asarray(experts, dtype=np.int64)
    if weights is None:
        weights = np.full(ex.shape, 1.0 / arch.top_k)
    return RoutingTrace(arch, ex, weights)


def constant_trace(arch: ModelArch, experts: Sequence[int], num_tokens: int) -> RoutingTrace:
    """Every token selects the same ``experts`` at every layer (full concentration)."""
    sel = np.asarray(experts, dtype=np.int64)
    return trace_from_experts(arch, np.broadcast_to(sel, (arch.layers, num_tokens, arch.top_k)))


def cyclic_trace(arch: ModelArch, num_tokens: int) -> RoutingTrace:
    """Token ``i`` selects experts ``i*k .. i*k+k-1 (mod E)``.

    Perfectly balanced whenever ``num_tokens * k`` is a multiple of ``E``.
    """
    E, k = arch.experts_per_layer, arch.top_k
    base = (np.arange(num_tokens)[:, None] * k + np.arange(k)[None, :]) % E
    return trace_from_experts(arch, np.broadcast_to(base, (arch.layers, num_tokens, k)))


@dataclass(frozen=True, eq=False)
class ExpertLoadProfile:
    """``rho[l, e]``: fraction of tokens whose layer-``l`` top-k set contains ``e``."""

    top_k: int
    rho: np.ndarray  # (L, E)

    def __post_init__(self):
        object.__setattr__(self, "rho", _frozen(np.asarray(self.rho, dtype=np.float64)))

    @property
    def layers(self) -> int:
        return self.rho.shape[0]

    @property
    def experts_per_layer(self) -> int:
        return self.rho.shape[1]


def load_profile_from_trace(trace: RoutingTrace) -> ExpertLoadProfile:
    n = trace.num_tokens
    if n == 0:
        raise ValueError("profile undefined for zero tokens")
    E = trace.arch.experts_per_layer
    counts = np.stack([np.bincount(trace.experts[l].ravel(), minlength=E) for l in range(trace.arch.layers)])
    return ExpertLoadProfile(trace.arch.top_k, counts / n)


def profile_heatmap_rows(profile: ExpertLoadProfile) -> Iterable[tuple[int, int, float]]:
    for l in range(profile.layers):
        for e in range(profile.experts_per_layer):
            yield l, e, float(profile.rho[l, e])


# -- trace file format (JSON Lines) -------------------------------------------------


def write_trace(trace: RoutingTrace, path) -> None:
    """Header line, then one record per (layer, token) in layer-major order."""
    a = trace.arch
    header = {
        "layers": a.layers,
        "experts": a.experts_per_layer,
        "top_k": a.top_k,
        "num_tokens": trace.num_tokens,
        "name": a.name,
        "vocab_size": a.vocab_size,
    }
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header) + "\n")
        for l in range(a.layers):
            ex, w = trace.experts[l], trace.weights[l]
            for i in range(trace.num_tokens):
                rec = {
                    "token": i,
                    "layer": l,
                    "experts": [int(e) for e in ex[i]],
                    "weights": [float(x) for x in w[i]],
                }
                fh.write(json.dumps(rec) + "\n")


def _int_field(rec: dict, key: str, lineno: int) -> int:
    v = rec.get(key)
    if isinstance(v, bool) or not isinstance(v, int):
        raise TraceParseError(lineno, f"field {key!r} must be an integer")
    return v


def read_trace(path, arch: ModelArch | None = None) -> RoutingTrace:
    """Parse a JSONL trace. ``arch`` supplies name/vocab when the header lacks them
    and is required for a completely empty file."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    numbered = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip()]
    if not numbered:
        return empty_trace(arch if arch is not None else ModelArch("empty", 1, 1, 1, 1))

    lineno, first = numbered[0]
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise TraceParseError(lineno, f"malformed header: {exc}") from None
    if not isinstance(header, dict):
        raise TraceParseError(lineno, "header must be an object")
    L = _int_field(header, "layers", lineno)
    E = _int_field(header, "experts", lineno)
    k = _int_field(header, "top_k", lineno)
    N = _int_field(header, "num_tokens", lineno)
    if N < 0:
        raise TraceParseError(lineno, "num_tokens must be non-negative")
    name = header.get("name", arch.name if arch else "ingested")
    vocab = header.get("vocab_size", arch.vocab_size if arch else 1)
    try:
        tarch = ModelArch(name, L, E, k, vocab)
    except ConfigError as exc:
        raise TraceParseError(lineno, str(exc)) from None

    experts = np.full((L, N, k), -1, dtype=np.int64)
    weights = np.zeros((L, N, k))
    seen = np.zeros((L, N), dtype=bool)
    for lineno, ln in numbered[1:]:
        try:
            rec = json.loads(ln)
        except json.JSONDecodeError as exc:
            raise TraceParseError(lineno, f"malformed record: {exc}") from None
        if not isinstance(rec, dict):
            raise TraceParseError(lineno, "record must be an object")
        i = _int_field(rec, "token", lineno)
        l = _int_field(rec, "layer", lineno)
        if not 0 <= i < N:
            raise TraceParseError(lineno, f"token {i} outside [0, {N})")
        if not 0 <= l < L:
            raise TraceParseError(lineno, f"layer {l} outside [0, {L})")
        ex, w = rec.get("experts"), rec.get("weights")
        if not isinstance(ex, list) or not isinstance(w, list):
            raise TraceParseError(lineno, "experts and weights must be lists")
        if len(ex) != k:
            raise TraceParseError(lineno, f"expected {k} experts, got {len(ex)}")
        if len(w) != k:
            raise TraceParseError(lineno, f"expected {k} weights, got {len(w)}")
        if any(isinstance(e, bool) or not isinstance(e, int) for e in ex):
            raise TraceParseError(lineno, "expert indices must be integers")
        if any(not 0 <= e < E for e in ex):
            raise TraceParseError(lineno, f"expert index out of range [0, {E})")
        if len(set(ex)) != k:
            raise TraceParseError(lineno, "duplicate expert index")
        if any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in w):
            raise TraceParseError(lineno, "weights must be numbers")
        if any(x < 0 for x in w) or abs(sum(w) - 1.0) > 1e-6:
            raise TraceParseError(lineno, "weights must be non-negative and sum to 1")
        if seen[l, i]:
            raise TraceParseError(lineno, f"duplicate record for token {i}, layer {l}")
        seen[l, i] = True
        experts[l, i] = ex
        weights[l, i] = w
    if not seen.all():
        l, i = map(int, np.argwhere(~seen)[0])
        raise TraceParseError(numbered[-1][0], f"missing record for token {i}, layer {l} ({int((~seen).sum())} missing)")
    return RoutingTrace(tarch, experts, weights)
