"""
Coverage as the expert-parallel group grows
===========================================

Coverage averages, over the vocabulary, the straggler load a single repeated
token causes. More devices means fewer experts per device, so one device ends up
with a larger share of a concentrated prompt.
"""

from moeimbalance import ModelArch, build_default_deployment
from moeimbalance.metrics import coverage, tmi
from moeimbalance.router import SyntheticRouter

arch = ModelArch("synthetic-32e", layers=8, experts_per_layer=32, top_k=2, vocab_size=2000)
router = SyntheticRouter.create(arch, seed=0)

print(" EP   E_d   TMI    coverage")
for D in (1, 2, 4, 8, 16, 32):
    dep = build_default_deployment(arch, D)
    cov = coverage(router, dep, range(arch.vocab_size), repeat_length=64).coverage
    print(f"{D:3d} {arch.experts_per_layer // D:5d} {tmi(D, arch.experts_per_layer // D, arch.top_k):5.1f}   {cov:.4f}")

# worst-case mixtral layout: one expert per device
print("tmi(8, 1, 2) =", tmi(8, 1, 2))
