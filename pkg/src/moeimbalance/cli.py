"""Command-line entry point.

Every subcommand writes its artifacts plus ``manifest.json`` into ``--out-dir``.
Offline subcommands can be re-run from a manifest with ``replay``.

Exit codes: 0 ok, 1 runtime failure, 2 usage or validation error.

File schemas
  arch JSON        {"name", "layers", "experts_per_layer", "top_k", "vocab_size"}
  trace JSONL      header {"layers","experts","top_k","num_tokens"[,"name","vocab_size"]},
                   then {"token","layer","experts":[...],"weights":[...]} for every (token, layer)
  cost JSON        {"per_token_expert_cost","per_layer_fixed_cost","allreduce_cost","attention_cost_per_token"}
  deployment JSON  {"num_devices", "mapping": [[device of expert e] per layer]}
  vmap JSON        {"tau", "tokens_scanned", "v": [[count per expert] per layer]}
  endpoint JSON    {"base_url","model_name"[,"auth_env","max_new_tokens","request_timeout",
                   "inter_request_delay","max_requests","stream","max_retries"]}
  filter input     one JSON array of token ids (or strings) per line
  manifest JSON    schema_version 1: subcommand, argv, cwd, seeds, inputs/outputs sha256, timestamps
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from contextlib import contextmanager
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .core import (
    ConfigError,
    Deployment,
    TraceParseError,
    build_default_deployment,
    load_arch_config,
    load_profile_from_trace,
    preset_archs,
    profile_heatmap_rows,
    read_trace,
    write_trace,
)
from .defense import (
    DEFAULT_FILTER_THRESHOLD,
    DEFAULT_TAU,
    evaluate_defense,
    filter_prompt,
    load_vulnerability_map,
    vulnerability_scan,
)
from .latsim import cost_presets, load_cost_model, r_moe, simulate_prefill
from .metrics import bottleneck, coverage, normalized_entropy, sample_tokens, tmi
from .prompts import attack_specs, build_prompt, normal_specs
from .router import DEFAULT_HIDDEN_DIM, SyntheticRouter, sample_baseline_tokens, trace_for_token_sequence

log = logging.getLogger("moeimbalance")

MANIFEST_SCHEMA_VERSION = 1
OFFLINE = {"trace", "metrics", "simulate", "scan", "defend", "filter", "prompt"}
FILE_ARGS = ("arch", "trace", "normal", "deployment", "cost", "vmap", "input", "system_file",
             "corpus", "endpoint", "tokens_file", "curves", "manifest")


class UsageError(Exception):
    pass


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- shared option groups ---------------------------------------------------------


def _add_out(p):
    p.add_argument("--out-dir", default=".", help="directory for outputs and manifest.json (default: .)")


def _add_arch(p):
    g = p.add_argument_group("architecture")
    g.add_argument("--arch", help="architecture JSON file")
    g.add_argument("--preset", default="Mixtral-8x7B", help="built-in architecture name (default: Mixtral-8x7B)")


def _add_router(p):
    _add_arch(p)
    g = p.add_argument_group("synthetic router")
    g.add_argument("--seed", type=int, default=0, help="router seed")
    g.add_argument("--hidden-dim", type=int, default=DEFAULT_HIDDEN_DIM)
    g.add_argument("--attractors", type=int, default=0, help="biased attractor experts per layer")
    g.add_argument("--attractor-strength", type=float, default=4.0)


def _add_tokens(p):
    g = p.add_argument_group("token sweep")
    g.add_argument("--sample", type=int, default=2000, help="sampled vocabulary size (default: 2000)")
    g.add_argument("--full", action="store_true", help="sweep the entire vocabulary")
    g.add_argument("--sample-seed", type=int, help="token-sample seed (default: --seed)")
    g.add_argument("--repeat-length", type=int, default=64, help="units per repetition prompt")
    g.add_argument("--trace-dir", help="ingested repetition traces named token_<id>.jsonl instead of the router")
    g.add_argument("--workers", type=int, default=1)


def _arch(args):
    if args.arch:
        return load_arch_config(args.arch)
    presets = preset_archs()
    if args.preset not in presets:
        raise UsageError(f"unknown preset {args.preset!r}; choose from {', '.join(presets)}")
    return presets[args.preset]


def _router(args, arch=None):
    arch = arch or _arch(args)
    try:
        return SyntheticRouter.create(arch, args.hidden_dim, args.seed,
                                      attractors=args.attractors, attractor_strength=args.attractor_strength)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _source_and_tokens(args, arch):
    if args.trace_dir:
        traces = {}
        for f in sorted(Path(args.trace_dir).glob("token_*.jsonl")):
            traces[int(f.stem.split("_", 1)[1])] = read_trace(f)
        tokens = sorted(traces) if args.full else sample_tokens(arch.vocab_size, args.sample, _sample_seed(args))
        return traces, tokens
    tokens = sample_tokens(arch.vocab_size, None if args.full else args.sample, _sample_seed(args))
    return _router(args, arch), tokens


def _sample_seed(args):
    return args.seed if args.sample_seed is None else args.sample_seed


def _deployment(args, arch):
    if getattr(args, "deployment", None):
        dep = Deployment.from_dict(json.loads(Path(args.deployment).read_text(encoding="utf-8")))
        dep.check_arch(arch)
        return dep
    if args.devices is None:
        raise UsageError("--devices or --deployment is required")
    return build_default_deployment(arch, args.devices)


# -- subcommands ------------------------------------------------------------------


def cmd_trace(args, out: Path):
    arch = _arch(args)
    router = _router(args, arch)
    if args.length < 1:
        raise UsageError("--length must be >= 1")
    if args.mode == "repeat":
        if args.token is None:
            raise UsageError("--mode repeat needs --token")
        tokens = np.full(args.length, args.token, dtype=np.int64)
    elif args.mode == "baseline":
        tokens = sample_baseline_tokens(arch.vocab_size, args.length, _sample_seed(args))
    else:
        if not args.tokens_file:
            raise UsageError("--mode sequence needs --tokens-file")
        tokens = np.asarray(json.loads(Path(args.tokens_file).read_text(encoding="utf-8")), dtype=np.int64)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= arch.vocab_size):
        raise UsageError(f"token id outside vocabulary [0, {arch.vocab_size})")
    trace = trace_for_token_sequence(router, tokens)
    write_trace(trace, out / "trace.jsonl")
    return ["trace.jsonl"]


def cmd_metrics(args, out: Path):
    if args.metric == "tmi":
        if min(args.devices, args.experts_per_device, args.top_k) < 1:
            raise UsageError("all tmi inputs must be positive")
        _write_json(out / "tmi.json", {"num_devices": args.devices, "experts_per_device": args.experts_per_device,
                                       "top_k": args.top_k, "tmi": tmi(args.devices, args.experts_per_device, args.top_k)})
        return ["tmi.json"]
    if args.metric == "coverage":
        arch = _arch(args)
        dep = _deployment(args, arch)
        source, tokens = _source_and_tokens(args, arch)
        rep = coverage(source, dep, tokens, args.repeat_length, args.workers)
        d = rep.to_dict()
        d.update(arch=arch.to_dict(), num_devices=dep.num_devices, full_vocab=bool(args.full))
        _write_json(out / "coverage.json", d)
        _write_csv(out / "coverage.csv", ["token_id", "B"], sorted(rep.per_token_bottleneck.items()))
        return ["coverage.json", "coverage.csv"]
    trace = read_trace(args.trace)
    if trace.num_tokens == 0:
        raise UsageError("trace has zero tokens")
    prof = load_profile_from_trace(trace)
    if args.metric == "bottleneck":
        dep = _deployment(args, trace.arch)
        rep = bottleneck(prof, dep)
        _write_json(out / "bottleneck.json", {"num_devices": dep.num_devices, **rep.to_dict()})
        return ["bottleneck.json"]
    # profile
    ent = normalized_entropy(prof) if trace.arch.experts_per_layer > 1 else None
    _write_json(out / "profile.json", {"num_tokens": trace.num_tokens, "normalized_entropy": ent, "rho": prof.rho.tolist()})
    _write_csv(out / "heatmap.csv", ["layer", "expert", "rho"], profile_heatmap_rows(prof))
    return ["profile.json", "heatmap.csv"]


def _cost(args):
    if args.cost:
        return load_cost_model(args.cost)
    presets = cost_presets()
    if args.cost_preset not in presets:
        raise UsageError(f"unknown cost preset {args.cost_preset!r}; choose from {', '.join(presets)}")
    return presets[args.cost_preset]


def cmd_simulate(args, out: Path):
    cost = _cost(args)
    attack = read_trace(args.trace)
    dep = _deployment(args, attack.arch)
    reports = {"attack": simulate_prefill(attack, dep, cost)}
    if args.normal:
        normal = read_trace(args.normal)
        if normal.arch.layers != attack.arch.layers or normal.arch.experts_per_layer != attack.arch.experts_per_layer:
            raise UsageError("attack and normal traces have different architectures")
        reports["normal"] = simulate_prefill(normal, dep, cost)
    result = {"num_devices": dep.num_devices, "cost_model": cost.to_dict(),
              "timelines": {k: v.to_dict() for k, v in reports.items()}}
    if "normal" in reports:
        a, n = reports["attack"], reports["normal"]
        result["r_moe"] = r_moe(a, n, args.layer)
        result["r_moe_layer"] = "mean" if args.layer is None else args.layer
        result["prefill_ratio"] = a.total_prefill_time / n.total_prefill_time if n.total_prefill_time else None
    _write_json(out / "timeline.json", result)
    rows = [(name, *row) for name, rep in reports.items() for row in rep.gantt_rows()]
    _write_csv(out / "timeline.csv", ["trace", "layer", "phase", "device", "start", "end"], rows)
    return ["timeline.json", "timeline.csv"]


def cmd_scan(args, out: Path):
    arch = _arch(args)
    source, tokens = _source_and_tokens(args, arch)
    vmap = vulnerability_scan(source, arch, tokens, args.repeat_length, args.tau, args.workers)
    _write_json(out / "vmap.json", vmap.to_dict())
    return ["vmap.json"]


def cmd_defend(args, out: Path):
    vmap = load_vulnerability_map(args.vmap)
    arch = _arch(args)
    if vmap.v.shape != (arch.layers, arch.experts_per_layer):
        raise UsageError(f"vmap shape {vmap.v.shape} does not match architecture {arch.name}")
    source, tokens = _source_and_tokens(args, arch)
    ev = evaluate_defense(source, arch, vmap, args.devices, tokens, args.repeat_length, args.workers)
    _write_json(out / "deployment.json", ev.deployment.to_dict())
    _write_json(out / "defense.json", {"num_devices": args.devices, "coverage_before": ev.coverage_before,
                                       "coverage_after": ev.coverage_after, "relative_change": ev.relative_change,
                                       "tokens_evaluated": ev.before.tokens_evaluated})
    rows = [(t, b, ev.after.per_token_bottleneck[t]) for t, b in sorted(ev.before.per_token_bottleneck.items())]
    _write_csv(out / "coverage_before_after.csv", ["token_id", "B_before", "B_after"], rows)
    return ["deployment.json", "defense.json", "coverage_before_after.csv"]


def cmd_filter(args, out: Path):
    if not args.threshold > 1:
        raise UsageError("--threshold must be > 1")
    lines = []
    with open(args.input, encoding="utf-8") as fh:
        for n, ln in enumerate(fh, 1):
            if not ln.strip():
                continue
            try:
                seq = json.loads(ln)
            except json.JSONDecodeError as exc:
                raise UsageError(f"{args.input}:{n}: {exc}") from None
            if not isinstance(seq, list) or not seq:
                raise UsageError(f"{args.input}:{n}: expected a non-empty JSON array")
            d = filter_prompt([json.dumps(x) if isinstance(x, (list, dict)) else x for x in seq], args.threshold)
            lines.append(json.dumps({"line": n, "decision": d.label, "proxy_ppl": d.score}))
    (out / "filter.jsonl").write_text("".join(l + "\n" for l in lines), encoding="utf-8")
    return ["filter.jsonl"]


def cmd_prompt(args, out: Path):
    system = Path(args.system_file).read_text(encoding="utf-8") if args.system_file else ""
    if args.count < 1 or args.length < 1:
        raise UsageError("--count and --length must be >= 1")
    if args.kind == "attack":
        specs = attack_specs(args.count, args.length, args.unit, system, seed=args.seed)
    else:
        if not args.corpus:
            raise UsageError("--kind normal needs --corpus")
        specs = normal_specs(args.count, args.length, args.corpus, system, seed=args.seed, nonce_seed=args.seed)
    names = []
    for i, spec in enumerate(specs):
        name = f"{args.kind}_{i:04d}.txt"
        (out / name).write_text(build_prompt(spec) + "\n", encoding="utf-8")
        names.append(name)
    return names


def _curve(args):
    if args.curves:
        return {int(k): float(v) for k, v in json.loads(Path(args.curves).read_text(encoding="utf-8")).items()}
    if args.curve_preset:
        raw = json.loads(resources.files("moeimbalance").joinpath("data/r_moe_curves.json").read_text("utf-8"))
        if args.curve_preset not in raw:
            raise UsageError(f"no R_moe curve for {args.curve_preset!r}")
        return {int(k): v for k, v in raw[args.curve_preset].items()}
    return None


def cmd_probe(args, out: Path):
    from .probe import EndpointConfig, estimate_ep_size, run_probe, write_report

    ep = EndpointConfig.from_file(args.endpoint)
    if args.budget is not None:
        ep = EndpointConfig(**{**ep.__dict__, "max_requests": args.budget})
    if args.non_stream:
        ep = EndpointConfig(**{**ep.__dict__, "stream": False})
    system = Path(args.system_file).read_text(encoding="utf-8") if args.system_file else ""
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    curve = _curve(args)  # validate before spending any requests
    attack = attack_specs(args.count, args.length, args.unit, system)
    normal = normal_specs(args.count, args.length, args.corpus, system, seed=args.seed)
    report = run_probe(ep, attack, normal, raw_path=out / "raw_samples.jsonl",
                       confidence=args.confidence, seed=args.seed)
    write_report(report, out / "probe_report.json")
    names = ["raw_samples.jsonl", "probe_report.json"]
    if curve and report.valid:
        est = estimate_ep_size(report.r_api_point, curve)
        _write_json(out / "ep_estimate.json", {"observed_r_api": report.r_api_point, "ep": est.ep, "label": est.label,
                                               "curve": {str(k): v for k, v in sorted(curve.items())}})
        names.append("ep_estimate.json")
    print(json.dumps({"verdict": report.verdict, "r_api_point": report.r_api_point,
                      "r_api_lower95": report.r_api_lower95, "requests_made": report.requests_made,
                      "valid": report.valid}))
    return names


def _strip_out_dir(argv):
    res, skip = [], False
    for a in argv:
        if skip:
            skip = False
            continue
        if a == "--out-dir":
            skip = True
            continue
        if a.startswith("--out-dir="):
            continue
        res.append(a)
    return res


@contextmanager
def _cwd(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


def cmd_replay(args, out: Path):
    m = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    if m.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise UsageError(f"unsupported manifest schema {m.get('schema_version')!r}")
    if m["subcommand"] not in OFFLINE:
        raise UsageError(f"subcommand {m['subcommand']!r} is not replayable")
    target = out.resolve()
    with _cwd(m["cwd"]):
        for path, digest in m.get("inputs", {}).items():
            if Path(path).is_file() and _sha256(path) != digest:
                log.warning("input %s changed since the original run", path)
        code = main(m["argv"] + ["--out-dir", str(target)])
    if code != 0:
        raise RuntimeError(f"replayed command exited with {code}")
    mismatched = [n for n, d in m["outputs"].items() if _sha256(target / n) != d]
    _write_json(out / "replay.json", {"manifest": str(args.manifest), "identical": not mismatched, "mismatched": mismatched})
    if mismatched:
        raise RuntimeError(f"replay outputs differ: {', '.join(mismatched)}")
    return ["replay.json"]


# -- parser -------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="moeimbalance", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("trace", help="generate a routing trace from the synthetic router")
    _add_router(s)
    s.add_argument("--mode", choices=["repeat", "baseline", "sequence"], default="repeat")
    s.add_argument("--token", type=int, help="repeated token id (repeat mode)")
    s.add_argument("--length", type=int, default=1000)
    s.add_argument("--sample-seed", type=int, help="baseline token seed (default: --seed)")
    s.add_argument("--tokens-file", help="JSON array of token ids (sequence mode)")
    _add_out(s)
    s.set_defaults(func=cmd_trace)

    s = sub.add_parser("metrics", help="TMI, coverage, bottleneck, expert-load profile")
    msub = s.add_subparsers(dest="metric", required=True)
    m = msub.add_parser("tmi")
    m.add_argument("--devices", type=int, required=True)
    m.add_argument("--experts-per-device", type=int, required=True)
    m.add_argument("--top-k", type=int, required=True)
    _add_out(m)
    m = msub.add_parser("coverage", help="mean repetition-prompt bottleneck over a token sweep")
    _add_router(m)
    _add_tokens(m)
    m.add_argument("--devices", type=int)
    m.add_argument("--deployment", help="deployment JSON (default: index-order blocks)")
    _add_out(m)
    m = msub.add_parser("bottleneck", help="per-layer straggler load of one trace")
    m.add_argument("--trace", required=True)
    m.add_argument("--devices", type=int)
    m.add_argument("--deployment")
    _add_out(m)
    m = msub.add_parser("profile", help="expert-load heatmap CSV and normalized entropy")
    m.add_argument("--trace", required=True)
    _add_out(m)
    s.set_defaults(func=cmd_metrics)

    s = sub.add_parser("simulate", help="prefill timeline and R_moe")
    s.add_argument("--trace", required=True, help="attack trace")
    s.add_argument("--normal", help="normal trace; enables R_moe")
    s.add_argument("--devices", type=int)
    s.add_argument("--deployment")
    s.add_argument("--cost", help="cost-model JSON")
    s.add_argument("--cost-preset", default="exact", help="built-in (synthetic) cost preset")
    s.add_argument("--layer", type=int, help="R_moe at one layer (default: mean over layers)")
    _add_out(s)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("scan", help="vulnerable-expert scan")
    _add_router(s)
    _add_tokens(s)
    s.add_argument("--tau", type=float, default=DEFAULT_TAU)
    _add_out(s)
    s.set_defaults(func=cmd_scan)

    s = sub.add_parser("defend", help="vulnerability-aware placement and before/after coverage")
    s.add_argument("--vmap", required=True)
    s.add_argument("--devices", type=int, required=True)
    _add_router(s)
    _add_tokens(s)
    _add_out(s)
    s.set_defaults(func=cmd_defend)

    s = sub.add_parser("filter", help="proxy-PPL repetition filter")
    s.add_argument("--input", required=True)
    s.add_argument("--threshold", type=float, default=DEFAULT_FILTER_THRESHOLD)
    _add_out(s)
    s.set_defaults(func=cmd_filter)

    s = sub.add_parser("prompt", help="build attack or normal prompt texts")
    s.add_argument("--kind", choices=["attack", "normal"], default="attack")
    s.add_argument("--unit", default="the")
    s.add_argument("--length", type=int, default=20_000)
    s.add_argument("--system-file")
    s.add_argument("--corpus", help="text corpus, one document per line (normal prompts)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, default=1)
    _add_out(s)
    s.set_defaults(func=cmd_prompt)

    s = sub.add_parser("probe", help="measure TTFT amplification against an endpoint")
    s.add_argument("--endpoint", required=True)
    s.add_argument("--count", type=int, default=10, help="prompts per arm")
    s.add_argument("--budget", type=int, help="hard request cap (overrides max_requests)")
    s.add_argument("--length", type=int, default=20_000)
    s.add_argument("--unit", default="the")
    s.add_argument("--corpus", required=True)
    s.add_argument("--system-file")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--confidence", type=float, default=0.95)
    s.add_argument("--non-stream", action="store_true")
    s.add_argument("--curves", help="JSON {ep_size: R_moe} for EP-size inference")
    s.add_argument("--curve-preset", help="shipped R_moe curve by model name")
    _add_out(s)
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("replay", help="re-run an offline subcommand from its manifest")
    s.add_argument("--manifest", required=True)
    _add_out(s)
    s.set_defaults(func=cmd_replay)
    return p


def _input_digests(args) -> dict:
    out = {}
    for name in FILE_ARGS:
        v = getattr(args, name, None)
        if v and Path(v).is_file():
            out[v] = _sha256(v)
    td = getattr(args, "trace_dir", None)
    if td:
        for f in sorted(Path(td).glob("token_*.jsonl")):
            out[str(f)] = _sha256(f)
    return out


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    started = _now()
    out = Path(args.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        outputs = args.func(args, out)
    except (UsageError, ConfigError, TraceParseError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if args.command != "replay":
        seeds = {k: getattr(args, k) for k in ("seed", "sample_seed") if getattr(args, k, None) is not None}
        manifest = {
            "schema_version": MANIFEST_SCHEMA_VERSION,
            "tool": "moeimbalance",
            "tool_version": __version__,
            "subcommand": args.command,
            "argv": _strip_out_dir(argv),
            "cwd": os.getcwd(),
            "args": {k: v for k, v in vars(args).items() if k != "func"},
            "seeds": seeds,
            "inputs": _input_digests(args),
            "outputs": {n: _sha256(out / n) for n in outputs},
            "started_at": started,
            "finished_at": _now(),
        }
        _write_json(out / "manifest.json", manifest)
    return 0


if __name__ == "__main__":
    sys.exit(main())
