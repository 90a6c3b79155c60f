"""Synthetic top-k gating router and a toy MoE layer.

The router stands in for a real model when no ingested trace is available. Hidden
states evolve through a fixed orthogonal mixing per layer; the MoE output is not fed
back, so routing depends only on the token id and the seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ModelArch, RoutingTrace, empty_trace

DEFAULT_HIDDEN_DIM = 32


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


@dataclass(frozen=True, eq=False)
class SyntheticRouter:
    arch: ModelArch
    hidden_dim: int
    token_embeddings: np.ndarray  # (V, H)
    router_weights: np.ndarray  # (L, H, E)
    layer_mixing: np.ndarray  # (L, H, H)
    router_bias: np.ndarray  # (L, E); zero unless attractors were requested
    seed: int

    @classmethod
    def create(
        cls,
        arch: ModelArch,
        hidden_dim: int = DEFAULT_HIDDEN_DIM,
        seed: int = 0,
        logit_scale: float = 3.0,
        attractors: int = 0,
        attractor_strength: float = 4.0,
    ) -> "SyntheticRouter":
        """Draw all matrices from ``seed``.

        ``attractors > 0`` picks that many experts per layer at random and biases their
        logits upward, which concentrates repeated-token routing on a sparse subset.
        """
        if hidden_dim < 1:
            raise ValueError("hidden_dim must be positive")
        if not 0 <= attractors <= arch.experts_per_layer:
            raise ValueError("attractors must be in [0, experts_per_layer]")
        rng = np.random.default_rng(seed)
        L, E, H = arch.layers, arch.experts_per_layer, hidden_dim
        emb = rng.standard_normal((arch.vocab_size, H)) / np.sqrt(H)
        w = rng.standard_normal((L, H, E)) * logit_scale
        mix = np.stack([_orthogonal(rng, H) for _ in range(L)])
        bias = np.zeros((L, E))
        if attractors:
            for l in range(L):
                bias[l, rng.choice(E, size=attractors, replace=False)] = attractor_strength
        for a in (emb, w, mix, bias):
            a.setflags(write=False)
        return cls(arch, H, emb, w, mix, bias, seed)

    def attractor_experts(self, layer: int) -> np.ndarray:
        return np.flatnonzero(self.router_bias[layer] > 0)


@dataclass(frozen=True, eq=False)
class ToyExperts:
    """Each expert is a linear map; ``matrices`` has shape (L, E, H, H)."""

    matrices: np.ndarray

    @classmethod
    def create(cls, arch: ModelArch, hidden_dim: int = DEFAULT_HIDDEN_DIM, seed: int = 0) -> "ToyExperts":
        rng = np.random.default_rng(seed)
        m = rng.standard_normal((arch.layers, arch.experts_per_layer, hidden_dim, hidden_dim)) / np.sqrt(hidden_dim)
        return cls(m)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    ez = np.exp(z)
    return ez / np.sum(ez, axis=-1, keepdims=True)


def _check_hidden(router: SyntheticRouter, h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != router.hidden_dim:
        raise ValueError(f"hidden vector must have length {router.hidden_dim}")
    if not np.all(np.isfinite(h)):
        raise ValueError("hidden state contains non-finite values")
    return h


def gate(router: SyntheticRouter, layer: int, h) -> np.ndarray:
    """Router probabilities ``softmax(h @ W_l + b_l)`` over the layer's experts."""
    h = _check_hidden(router, h)
    return softmax(h @ router.router_weights[layer] + router.router_bias[layer])


def select_topk(gates, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the ``k`` largest gates (ties -> lower index) and their renormalized weights."""
    g = np.asarray(gates, dtype=np.float64)
    if not 1 <= k <= g.shape[-1]:
        raise ValueError(f"k={k} outside [1, {g.shape[-1]}]")
    idx = np.argsort(-g, axis=-1, kind="stable")[..., :k]
    sel = np.take_along_axis(g, idx, axis=-1)
    return idx, sel / sel.sum(axis=-1, keepdims=True)


def toy_moe_forward(router: SyntheticRouter, experts: ToyExperts, layer: int, h) -> np.ndarray:
    """``y = sum_i w_i * E_i h`` over the selected experts, with renormalized weights."""
    h = _check_hidden(router, h)
    idx, w = select_topk(gate(router, layer, h), router.arch.top_k)
    y = np.zeros_like(h)
    for e, wi in zip(idx, w):
        y = y + wi * (experts.matrices[layer, e] @ h)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("non-finite MoE output")
    return y


def trace_for_token_sequence(router: SyntheticRouter, token_ids) -> RoutingTrace:
    arch = router.arch
    ids = np.asarray(token_ids, dtype=np.int64).ravel()
    if ids.size == 0:
        return empty_trace(arch)
    if ids.min() < 0 or ids.max() >= arch.vocab_size:
        bad = ids[(ids < 0) | (ids >= arch.vocab_size)][0]
        raise ValueError(f"token id {int(bad)} outside vocabulary [0, {arch.vocab_size})")
    # routing depends only on the token id, so route each distinct id once
    uniq, inverse = np.unique(ids, return_inverse=True)
    h = router.token_embeddings[uniq]
    experts = np.empty((arch.layers, uniq.size, arch.top_k), dtype=np.int64)
    weights = np.empty((arch.layers, uniq.size, arch.top_k))
    for l in range(arch.layers):
        probs = softmax(h @ router.router_weights[l] + router.router_bias[l])
        experts[l], weights[l] = select_topk(probs, arch.top_k)
        h = h @ router.layer_mixing[l].T
    return RoutingTrace(arch, experts[:, inverse], weights[:, inverse])


def repeated_token_trace(router: SyntheticRouter, token: int, length: int) -> RoutingTrace:
    return trace_for_token_sequence(router, np.full(length, token, dtype=np.int64))


def sample_baseline_tokens(vocab_size: int, length: int, seed: int) -> np.ndarray:
    if length < 1:
        raise ValueError("length must be >= 1")
    return np.random.default_rng(seed).integers(0, vocab_size, size=length)


def sample_baseline_trace(router: SyntheticRouter, length: int, seed: int) -> RoutingTrace:
    """Trace over ``length`` token ids drawn uniformly from the vocabulary."""
    return trace_for_token_sequence(router, sample_baseline_tokens(router.arch.vocab_size, length, seed))
