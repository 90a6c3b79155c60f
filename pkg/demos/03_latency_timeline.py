"""
Prefill timeline and kernel-level amplification
===============================================

Every device waits for the slowest one before the all-reduce. Concentrated
routing makes one device do all the work.
"""

from moeimbalance import build_default_deployment, preset_archs
from moeimbalance.latsim import calibrate_cost_model, cost_presets, r_moe, simulate_prefill
from moeimbalance.router import SyntheticRouter, repeated_token_trace, sample_baseline_trace

arch = preset_archs()["Mixtral-8x7B"]
router = SyntheticRouter.create(arch, seed=0)
attack = repeated_token_trace(router, 7, 4000)
normal = sample_baseline_trace(router, 4000, seed=3)

for D in (2, 4, 8):
    dep = build_default_deployment(arch, D)
    for name, cost in cost_presets().items():
        a, n = simulate_prefill(attack, dep, cost), simulate_prefill(normal, dep, cost)
        # attention is outside the MoE kernel, so only the end-to-end ratio sees it
        prefill = a.total_prefill_time / n.total_prefill_time
        print(f"EP {D}  {name:16s} R_moe = {r_moe(a, n):.3f}   prefill ratio = {prefill:.3f}")

# first layer of the attack timeline at EP 8: one straggler, everyone else idles
rep = simulate_prefill(attack, build_default_deployment(arch, 8), cost_presets()["moe_dominant"])
for layer, phase, dev, start, end in rep.gantt_rows():
    if layer > 0:
        break
    print(f"layer {layer} device {dev} {phase:9s} {float(start):8.1f} -> {float(end):8.1f}")

# fit a cost model from (tokens on device, measured time) pairs
samples = [(100, 1.2), (200, 2.1), (400, 4.05), (800, 7.9)]
fit, resid = calibrate_cost_model(samples)
print("fitted:", fit, "residuals:", resid.round(3))
