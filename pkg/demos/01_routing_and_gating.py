"""
Routing a prompt through a synthetic top-k router
=================================================

A repeated token produces the same hidden state at every position, so every
position picks the same k experts. A varied prompt spreads over many experts.
"""

import numpy as np

from moeimbalance import preset_archs
from moeimbalance.core import load_profile_from_trace
from moeimbalance.metrics import normalized_entropy
from moeimbalance.router import SyntheticRouter, gate, repeated_token_trace, sample_baseline_trace, select_topk

arch = preset_archs()["Mixtral-8x7B"]
print(arch)
router = SyntheticRouter.create(arch, seed=0)

# gate values for one token embedding at layer 0
h = router.token_embeddings[42]
g = gate(router, 0, h)
idx, w = select_topk(g, arch.top_k)
print("gates:", np.round(g, 3))
print("top-k:", idx, "renormalized weights:", np.round(w, 3))

# one repeated token vs a sampled baseline prompt
rep = repeated_token_trace(router, 42, 2000)
base = sample_baseline_trace(router, 2000, seed=1)
print("layer-0 experts of the repeated prompt:", np.unique(rep.experts[0]))
print("entropy  repeated %.3f   baseline %.3f" % (normalized_entropy(rep), normalized_entropy(base)))

# expert load fractions for the first two layers
rho = load_profile_from_trace(rep).rho
print("rho (repeated), layers 0-1:\n", np.round(rho[:2], 2))
