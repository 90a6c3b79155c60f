"""Attack and matched normal prompts as plain text.

A *unit* is a whitespace-delimited word; unit counts approximate model-token counts.
"""

from __future__ import annotations

import logging
import uuid
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_UNIT = "the"
DEFAULT_PROMPT_LENGTH = 20_000


@dataclass(frozen=True)
class PromptSpec:
    kind: Literal["attack", "normal"]
    target_length: int
    repeated_unit: str = DEFAULT_UNIT
    system_prompt: str = ""
    nonce: str = ""
    corpus_path: str | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("attack", "normal"):
            raise ValueError(f"unknown prompt kind {self.kind!r}")
        if self.target_length < 1:
            raise ValueError("target_length must be >= 1")


def _units(text: str) -> list[str]:
    return text.split()


def user_body(spec: PromptSpec) -> str:
    """The user-message part of a prompt: nonce followed by the body units."""
    if spec.kind == "attack":
        unit = spec.repeated_unit.strip()
        if not unit:
            raise ValueError("repeated_unit must be non-empty")
        if len(_units(unit)) != 1:
            raise ValueError("repeated_unit must be a single whitespace-free unit")
        body = [unit] * spec.target_length
    else:
        body = _normal_units(spec)
    return " ".join(_units(spec.nonce) + body)


def build_attack_prompt(spec: PromptSpec) -> str:
    """system prompt, nonce, then ``target_length`` copies of the unit, space-joined."""
    if spec.kind != "attack":
        raise ValueError("spec is not an attack spec")
    text = " ".join(p for p in (spec.system_prompt.strip(), user_body(spec)) if p)
    extra = len(_units(spec.system_prompt)) + len(_units(spec.nonce))
    if extra > 0.01 * (extra + spec.target_length):
        log.warning("repeated units are under 99%% of the prompt (%d template units)", extra)
    return text


def _read_documents(path) -> list[list[str]]:
    if path is None:
        raise ValueError("normal prompts need a corpus_path")
    text = Path(path).read_text(encoding="utf-8")
    docs = [_units(line) for line in text.splitlines()]
    docs = [d for d in docs if d]
    if not docs:
        raise ValueError(f"corpus {path} is empty")
    return docs


def _normal_units(spec: PromptSpec) -> list[str]:
    docs = _read_documents(spec.corpus_path)
    order = np.random.default_rng(spec.seed).permutation(len(docs))
    out: list[str] = []
    # cycle the shuffled corpus until long enough
    while len(out) < spec.target_length:
        for i in order:
            out.extend(docs[i])
            if len(out) >= spec.target_length:
                break
    return out[: spec.target_length]


def build_normal_prompt(spec: PromptSpec) -> str:
    """Seeded document selection from a corpus (one document per line), truncated to
    ``target_length`` units; documents are concatenated when one is too short."""
    if spec.kind != "normal":
        raise ValueError("spec is not a normal spec")
    return " ".join(p for p in (spec.system_prompt.strip(), user_body(spec)) if p)


def build_prompt(spec: PromptSpec) -> str:
    return build_attack_prompt(spec) if spec.kind == "attack" else build_normal_prompt(spec)


def chat_messages(spec: PromptSpec) -> list[dict]:
    msgs = []
    if spec.system_prompt.strip():
        msgs.append({"role": "system", "content": spec.system_prompt})
    msgs.append({"role": "user", "content": user_body(spec)})
    return msgs


def make_nonce(index: int, seed: int | None = None) -> str:
    """Unique per-prompt prefix; seeded nonces are reproducible."""
    if seed is None:
        return f"[{index}:{uuid.uuid4().hex[:12]}]"
    rng = np.random.default_rng([seed, index])
    return f"[{index}:{rng.integers(0, 2**48):012x}]"


def attack_specs(count, target_length, unit=DEFAULT_UNIT, system_prompt="", seed=None, units=None):
    """``count`` attack specs with pairwise-distinct nonces.

    ``units`` optionally cycles the repeated unit across prompts instead of fixing it.
    """
    base = PromptSpec("attack", target_length, unit, system_prompt)
    out = []
    for i in range(count):
        u = units[i % len(units)] if units else unit
        out.append(replace(base, repeated_unit=u, nonce=make_nonce(i, seed)))
    return out


def normal_specs(count, target_length, corpus_path, system_prompt="", seed=0, nonce_seed=None):
    base = PromptSpec("normal", target_length, system_prompt=system_prompt, corpus_path=str(corpus_path))
    return [replace(base, seed=seed + i, nonce=make_nonce(i, nonce_seed)) for i in range(count)]
