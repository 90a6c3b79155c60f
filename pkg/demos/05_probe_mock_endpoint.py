"""
Probing a chat endpoint for MoE-style latency amplification
===========================================================

Runs against the bundled loopback mock only. The mock delays attack prompts
three times longer than normal ones, with 10% noise.
"""

import tempfile
from pathlib import Path

import numpy as np

from moeimbalance.probe import EndpointConfig, MockEndpoint, estimate_ep_size, run_probe
from moeimbalance.prompts import attack_specs, normal_specs

# a throw-away corpus of random words for the normal arm
rng = np.random.default_rng(0)
tmp = Path(tempfile.mkdtemp())
corpus = tmp / "corpus.txt"
corpus.write_text("\n".join(" ".join(f"w{x}" for x in rng.integers(0, 30000, 600)) for _ in range(40)))

with MockEndpoint(base_latency=0.03, attack_ratio=3.0, noise=0.1) as mock:
    ep = EndpointConfig(mock.base_url, "mock-moe", max_requests=40)
    report = run_probe(ep, attack_specs(20, 500, seed=0), normal_specs(20, 500, corpus), raw_path=tmp / "raw.jsonl")

print("requests:", report.requests_made, "of", ep.max_requests)
print("R_api = %.3f  (lower 95%%: %.3f)" % (report.r_api_point, report.r_api_lower95))
print("verdict:", report.verdict)

# where would this ratio sit on a measured curve?
curve = {2: 1.034, 4: 1.047, 8: 1.074}
print("EP estimate:", estimate_ep_size(report.r_api_point, curve).label)
