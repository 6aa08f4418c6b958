#!/usr/bin/env python3
"""
Experiment CLI for decentralized DNN partitioning.

Verbs:
    partition  Optimal partition of one model on one device
    simulate   Play the budget game on a scenario; writes trace.csv and devices.csv
    compare    DDS against the EO/SO/DADS baselines for several fleet sizes; writes summary.csv
    converge   Play the game from several initial budgets; writes convergence.csv
    catalog    List the synthetic catalog models, optionally exporting model files
    validate   Check a model file and/or a scenario's contraction condition

Exit codes: 0 ok, 1 input error, 2 price did not settle (only with --strict).

Usage:
    python dds.py partition --model catalog:VGG11 --server-gflops 60
    python dds.py partition --model models/diamond.model --server-gflops 0 --dump-latency-graph
    python dds.py simulate --scenario scenarios/default.txt --out results
    python dds.py compare --n 5,25,50,100 --out results
    python dds.py converge --a0 0,0.01,0.05,0.1 --gnuplot
"""

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import pandas as pd

from cost import DeviceProfile, ServerProfile, inference_cost
from game import contraction_holds
from model_graph import CATALOG, catalog_model, check_model, load_model, serialize_model, total_flops
from partition import RAW_INPUT, build_latency_graph, dump_latency_graph, min_cut
from simulation import (
    BYTES_PER_MBIT,
    ScenarioConfig,
    compare,
    convergence_frame,
    convergence_study,
    load_scenario,
    resolve_gamma,
    run_dds,
    sample_devices,
    server_profile,
)

EXIT_OK = 0
EXIT_INPUT_ERROR = 1
EXIT_NOT_CONVERGED = 2

DEFAULT_OUT = "results"
DEFAULT_COUNTS = "5,25,50,100"
DEFAULT_A0 = "0,0.01,0.05,0.1"
CATALOG_PREFIX = "catalog:"


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors with the input-error exit code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"Error: {message}", file=sys.stderr)
        sys.exit(EXIT_INPUT_ERROR)


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'")


def resolve_seed(args) -> int | None:
    """--seed wins, then DDS_SEED, else None (keep the scenario's own seed)."""
    if getattr(args, "seed", None) is not None:
        return args.seed
    env_seed = os.environ.get("DDS_SEED")
    if env_seed:
        try:
            return int(env_seed)
        except ValueError:
            raise ValueError(f"DDS_SEED must be an integer, got '{env_seed}'")
    return None


def resolve_model(source: str, seed: int):
    """Load `catalog:NAME` from the generator, anything else from a model file."""
    if source.startswith(CATALOG_PREFIX):
        return catalog_model(source[len(CATALOG_PREFIX):], seed)
    return load_model(source)


def build_scenario(args) -> ScenarioConfig:
    cfg = load_scenario(args.scenario) if args.scenario else ScenarioConfig()
    overrides = {}
    seed = resolve_seed(args)
    if seed is not None:
        overrides["seed"] = seed
    count = getattr(args, "n", None)
    if isinstance(count, int):
        overrides["device_count"] = count
        overrides["tracked_device"] = min(cfg.tracked_device, count - 1)
    if getattr(args, "a0", None) is not None and isinstance(args.a0, float):
        overrides["a0_fraction"] = args.a0
    return replace(cfg, **overrides)


def _output_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_partition(args) -> int:
    seed = resolve_seed(args) or 0
    g = resolve_model(args.model, seed)
    dev = DeviceProfile(
        id="device",
        compute=args.compute_gflops * 1e9,
        bandwidth=args.bandwidth_mbps * BYTES_PER_MBIT,
        model=g,
        alpha_local=args.alpha_local,
        raw_input_bytes=args.raw_input_bytes,
        result_bytes=args.result_bytes,
    )
    g_alloc = args.server_gflops * 1e9
    srv = ServerProfile(capacity=max(g_alloc, 1.0), alpha_server=args.alpha_server)

    lg = build_latency_graph(g, dev, g_alloc, srv.alpha_server)
    if args.dump_latency_graph:
        print(dump_latency_graph(lg), end="")

    value, strategy = min_cut(lg)
    breakdown = inference_cost(strategy, dev, srv, g_alloc)
    order = g.vertex_ids
    cut = [f"{'input' if u == RAW_INPUT else u}->{v}" for u, v in strategy.cut_edges]

    print(f"Model: {g.name} ({len(g.vertices)} layers, {len(g.edges)} edges, {total_flops(g) / 1e9:.4g} GFLOP)")
    print(f"Local:  {', '.join(v for v in order if v in strategy.local_set) or '(none)'}")
    print(f"Server: {', '.join(v for v in order if v in strategy.server_set) or '(none)'}")
    print(f"Cut edges: {', '.join(cut) or '(none)'}")
    if strategy.is_all_local:
        print("Placement: all-local")
    print(f"T = {value:.6f} s  (T^l = {breakdown.t_local:.6f}, T^t = {breakdown.t_net:.6f}, T^s = {breakdown.t_server:.6f})")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = build_scenario(args)
    out = _output_dir(args)

    print(f"Simulating {cfg.device_count} devices (seed {cfg.seed}, schedule {cfg.schedule})")
    result = run_dds(cfg, progress=not args.quiet, verbose=args.verbose)

    result.trace_frame().to_csv(out / "trace.csv", index=False)
    result.devices_frame().to_csv(out / "devices.csv", index=False)
    pd.DataFrame([result.summary()]).to_csv(out / "summary.csv", index=False)

    status = f"converged in {result.convergence_round} rounds" if result.converged else f"not converged after {result.rounds} rounds"
    print(f"Price {status}: A = {result.final_price:.6f}, gamma = {result.gamma:.4g}")
    print(f"Mean T = {result.mean('t_total'):.6f} s, server FLOP share = {result.server_flop_share:.3f}")
    print(f"✓ Wrote {out / 'trace.csv'}, {out / 'devices.csv'} and {out / 'summary.csv'}")

    if args.strict and not result.converged:
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = build_scenario(args)
    out = _output_dir(args)
    counts = args.n or _int_list(DEFAULT_COUNTS)
    if any(n < 1 for n in counts):
        raise ValueError(f"Fleet sizes must be positive, got {counts}")

    summary, dds_runs = compare(cfg, counts, progress=not args.quiet)
    summary.to_csv(out / "summary.csv", index=False)

    print(f"\n{'=' * 60}")
    print(summary.to_string(index=False))
    print(f"{'=' * 60}")
    for n in counts:
        rows = summary[summary["N"] == n].set_index("method")
        ratio = rows.loc["DDS", "mean_T"] / rows.loc["DADS", "mean_T"]
        print(f"N = {n}: DDS/DADS mean T ratio = {ratio:.4f}")
    for n, run in dds_runs.items():
        if not run.converged:
            print(f"Warning: price did not settle within {run.rounds} rounds for N = {n} (A = {run.final_price:.6f})")
    print(f"✓ Wrote {out / 'summary.csv'}")

    if args.strict and not all(run.converged for run in dds_runs.values()):
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def write_gnuplot(frame, path: Path) -> None:
    """Whitespace-separated blocks, one per initial budget, for gnuplot's `index`."""
    blocks = []
    for fraction, group in frame.groupby("a0_fraction", sort=False):
        lines = [f"# a0_fraction = {fraction}", "# iteration A_observed A"]
        lines += [f"{row.iteration} {row.A_observed:.12g} {row.A:.12g}" for row in group.itertuples()]
        blocks.append("\n".join(lines))
    path.write_text("\n\n\n".join(blocks) + "\n", encoding="utf-8")


def cmd_converge(args) -> int:
    cfg = build_scenario(args)
    out = _output_dir(args)
    fractions = args.a0 or _float_list(DEFAULT_A0)

    runs = convergence_study(cfg, fractions, progress=not args.quiet)
    frame = convergence_frame(runs)
    frame.to_csv(out / "convergence.csv", index=False)
    if args.gnuplot:
        write_gnuplot(frame, out / "convergence.dat")

    for fraction, run in runs.items():
        status = f"converged in {run.convergence_round} rounds" if run.converged else "did not converge"
        print(f"a0 = {fraction:g} S: {status}, final A = {run.final_price:.6f}")
    finals = [run.final_price for run in runs.values()]
    spread = (max(finals) - min(finals)) / max(max(finals), 1e-12)
    print(f"Final price spread across initial budgets: {spread:.2%}")
    print(f"✓ Wrote {out / 'convergence.csv'}")

    if args.strict and not all(run.converged for run in runs.values()):
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_catalog(args) -> int:
    seed = resolve_seed(args) or 0
    out = _output_dir(args) if args.out else None

    print(f"{'model':<10} {'vertices':>8} {'edges':>6} {'GFLOPs':>8}")
    for name in CATALOG:
        g = catalog_model(name, seed)
        print(f"{name:<10} {len(g.vertices):>8} {len(g.edges):>6} {total_flops(g) / 1e9:>8.2f}")
        if out:
            (out / f"{name}.model").write_text(serialize_model(g), encoding="utf-8")
    if out:
        print(f"✓ Wrote {len(CATALOG)} model files to {out}")
    return EXIT_OK


def cmd_validate(args) -> int:
    if not args.model and not args.scenario:
        raise ValueError("validate needs --model and/or --scenario")

    passed = True
    if args.model:
        g = resolve_model(args.model, resolve_seed(args) or 0)
        warnings = check_model(g)
        for warning in warnings:
            print(f"Warning: {warning}")
        print(f"✓ Model {g.name}: {len(g.vertices)} layers, {len(g.edges)} edges, {total_flops(g) / 1e9:.4g} GFLOP")

    if args.scenario:
        cfg = build_scenario(args)
        devices = sample_devices(cfg)
        srv = server_profile(cfg)
        gamma = resolve_gamma(cfg, devices, srv)
        c_max = max(srv.alpha_server * total_flops(d.model) for d in devices)
        if contraction_holds(gamma, c_max, srv.capacity):
            print(f"✓ Contraction condition holds: gamma = {gamma:.4g} > {c_max / (4 * srv.capacity ** 2):.4g}")
        else:
            print(f"FAIL: gamma = {gamma:.4g} does not exceed {c_max / (4 * srv.capacity ** 2):.4g}; convergence not guaranteed")
            passed = False

    return EXIT_OK if passed else EXIT_INPUT_ERROR


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(description="Decentralized DNN partitioning experiments")
    verbs = parser.add_subparsers(dest="verb", required=True)

    def scenario_flags(p, counts_as_list=False):
        p.add_argument("--scenario", help="Scenario file (key = value lines; default: built-in defaults)")
        p.add_argument("--seed", type=int, help="Seed override (default: $DDS_SEED, else the scenario's)")
        p.add_argument("--out", default=DEFAULT_OUT, help=f"Output directory (default: {DEFAULT_OUT})")
        p.add_argument("--strict", action="store_true", help="Exit 2 if the price does not settle")
        p.add_argument("--quiet", action="store_true", help="Hide progress bars")
        if counts_as_list:
            p.add_argument("--n", type=_int_list, help=f"Fleet sizes (default: {DEFAULT_COUNTS})")
        else:
            p.add_argument("--n", type=int, help="Number of devices (overrides the scenario)")

    p = verbs.add_parser("partition", help="Optimal partition of one model on one device")
    p.add_argument("--model", required=True, help="Model file or catalog:NAME")
    p.add_argument("--seed", type=int, help="Catalog generator seed (default: $DDS_SEED, else 0)")
    p.add_argument("--compute-gflops", type=float, default=15.0, help="Device compute (default: 15)")
    p.add_argument("--bandwidth-mbps", type=float, default=8.0, help="Device bandwidth (default: 8)")
    p.add_argument("--server-gflops", type=float, default=60.0, help="Server allocation g (default: 60)")
    p.add_argument("--alpha-local", type=float, default=1.0, help="Local overhead factor (default: 1)")
    p.add_argument("--alpha-server", type=float, default=1.0, help="Server overhead factor (default: 1)")
    p.add_argument("--raw-input-bytes", type=float, default=602112, help="Raw input size (default: 602112)")
    p.add_argument("--result-bytes", type=float, default=4096, help="Result size (default: 4096)")
    p.add_argument("--dump-latency-graph", action="store_true", help="Print the latency graph arcs")
    p.set_defaults(handler=cmd_partition)

    p = verbs.add_parser("simulate", help="Play the budget game on one scenario")
    scenario_flags(p)
    p.add_argument("--a0", type=float, help="Initial budget as a fraction of S (overrides the scenario)")
    p.add_argument("--verbose", action="store_true", help="Print the price after every round")
    p.set_defaults(handler=cmd_simulate)

    p = verbs.add_parser("compare", help="DDS against EO/SO/DADS for several fleet sizes")
    scenario_flags(p, counts_as_list=True)
    p.set_defaults(handler=cmd_compare)

    p = verbs.add_parser("converge", help="Price traces from several initial budgets")
    scenario_flags(p)
    p.add_argument("--a0", type=_float_list, help=f"Initial budgets as fractions of S (default: {DEFAULT_A0})")
    p.add_argument("--gnuplot", action="store_true", help="Also write convergence.dat")
    p.set_defaults(handler=cmd_converge)

    p = verbs.add_parser("catalog", help="List the catalog models")
    p.add_argument("--seed", type=int, help="Generator seed (default: $DDS_SEED, else 0)")
    p.add_argument("--out", help="Write <name>.model files into this directory")
    p.set_defaults(handler=cmd_catalog)

    p = verbs.add_parser("validate", help="Check a model and/or a scenario")
    p.add_argument("--model", help="Model file or catalog:NAME")
    p.add_argument("--scenario", help="Scenario file")
    p.add_argument("--seed", type=int, help="Seed override")
    p.set_defaults(handler=cmd_validate)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
