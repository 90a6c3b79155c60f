"""Routing-imbalance analysis for expert-parallel Mixture-of-Experts inference."""

from .core import (
    ConfigError,
    Deployment,
    ExpertLoadProfile,
    ModelArch,
    RoutingTrace,
    TraceParseError,
    build_default_deployment,
    constant_trace,
    cyclic_trace,
    load_arch_config,
    load_profile_from_trace,
    preset_archs,
    read_trace,
    trace_from_experts,
    write_trace,
)
from .defense import (
    VulnerabilityMap,
    balance_by_vulnerability,
    defended_deployment,
    evaluate_defense,
    filter_prompt,
    ppl_proxy,
    vulnerability_scan,
)
from .latsim import CostModel, TimelineReport, calibrate_cost_model, r_moe, simulate_prefill
from .metrics import bottleneck, coverage, device_load, normalized_entropy, tmi
from .prompts import PromptSpec, build_attack_prompt, build_normal_prompt
from .router import (
    SyntheticRouter,
    ToyExperts,
    gate,
    sample_baseline_trace,
    select_topk,
    toy_moe_forward,
    trace_for_token_sequence,
)

__version__ = "0.1.0"
