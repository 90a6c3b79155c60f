"""
Vulnerable experts and a placement that spreads them
====================================================

A scan counts, per expert, how many repeated tokens route almost all of their
positions to it. The greedy placement then spreads the most vulnerable experts
over different devices.
"""

import numpy as np

from moeimbalance import ModelArch
from moeimbalance.defense import balance_by_vulnerability, evaluate_defense, filter_prompt, vulnerability_scan
from moeimbalance.router import SyntheticRouter

# small worked instance
print("v=[10,8,2,1] on 2 devices ->", balance_by_vulnerability([10, 8, 2, 1], 2))

# a router where a few experts per layer attract most repeated tokens
arch = ModelArch("synthetic-attractor", layers=6, experts_per_layer=32, top_k=2, vocab_size=800)
router = SyntheticRouter.create(arch, seed=4, attractors=4)
vmap = vulnerability_scan(router, arch, range(arch.vocab_size))
print("layer 0 vulnerability:", vmap.v[0])
print("attractors at layer 0:", router.attractor_experts(0))

for D in (4, 8):
    ev = evaluate_defense(router, arch, vmap, D, range(arch.vocab_size))
    print(f"EP {D}: coverage {ev.coverage_before:.4f} -> {ev.coverage_after:.4f} ({100 * ev.relative_change:+.1f}%)")

# the cheap input-side check
rng = np.random.default_rng(0)
for prompt in ([5] * 1000, rng.integers(0, 32000, 1000).tolist()):
    d = filter_prompt(prompt)
    print(d.label, round(d.score, 2))
