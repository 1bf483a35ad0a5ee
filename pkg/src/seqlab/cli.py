"""Command line entry point.

Subcommands:

  verify   equivalence grid (schemes x kernels x P) against the oracle
  cost     analytic per-link communication volumes and scheme ratios
  trace    run a simulated forward and export the exact ledger
  memory   per-rank model-state and activation memory estimates
  sweep    proportional (n, P) scaling of per-link volumes

Common flags: --config PATH, --out DIR, --format {table,csv,json},
--seed U64, --mode {lockstep,concurrent}, --plot. Config files are flat
``key = value`` text using the flag names (dashes or underscores); CLI
flags override config values. All randomness flows from --seed.

Files are written only when --out is given: each command emits canonical
CSV and JSON side by side, plus a PNG figure when --plot is set.
"""

from __future__ import annotations

import argparse
import os
import sys

from .baselines import run_megatron_blocks, run_ring_attention
from .costmodel import (
    COST_CSV_COLUMNS,
    CostInputs,
    MemoryInputs,
    SCHEMES,
    activation_memory_per_rank,
    build_cost_report,
    worked_memory_example,
    zero_memory_per_rank,
)
from .ioutil import csv_text, json_text, write_text
from .kernels import default_mask_for
from .layers import AttentionSpec, make_input, make_weights
from .report import format_table
from .ulysses import run_ulysses_blocks
from .verify import (
    BLOCK_SIZE,
    DEFAULT_SEED,
    GRID_B,
    GRID_D,
    GRID_HEADS,
    GRID_N,
    GRID_P,
    SCHEME_KERNELS,
    default_grid,
    run_grid,
)

MEMORY_CSV_COLUMNS = [
    "stage", "psi", "p_data", "p_seq",
    "model_state_bytes", "activation_bytes", "total_bytes",
]

TRACE_TOTALS_COLUMNS = [
    "collective", "records", "aggregate_elements", "per_rank_egress_elements",
]


def _csv_ints(s: str) -> tuple[int, ...]:
    return tuple(int(v) for v in s.split(",") if v.strip() != "")


def _csv_strs(s: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in s.split(",") if v.strip() != "")


def build_parser() -> tuple[argparse.ArgumentParser, dict]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="flat key=value config file")
    common.add_argument("--out", default=None, help="directory for CSV/JSON (and figures)")
    common.add_argument("--format", choices=("table", "csv", "json"), default="table",
                        help="stdout rendering")
    common.add_argument("--seed", type=int, default=DEFAULT_SEED)
    common.add_argument("--mode", choices=("lockstep", "concurrent"), default="lockstep")
    common.add_argument("--plot", action="store_true",
                        help="render a figure next to the delimited output (needs --out)")

    parser = argparse.ArgumentParser(prog="seqlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    registry: dict[str, argparse.ArgumentParser] = {}

    p_verify = sub.add_parser("verify", parents=[common],
                              help="equivalence grid against the oracle")
    p_verify.add_argument("--schemes", type=_csv_strs,
                          default=tuple(SCHEME_KERNELS))
    p_verify.add_argument("--kernels", type=_csv_strs,
                          default=("dense", "causal", "blocked"))
    p_verify.add_argument("--n-list", type=_csv_ints, default=GRID_N)
    p_verify.add_argument("--b-list", type=_csv_ints, default=GRID_B)
    p_verify.add_argument("--d-list", type=_csv_ints, default=GRID_D)
    p_verify.add_argument("--heads-list", type=_csv_ints, default=GRID_HEADS)
    p_verify.add_argument("--p-list", type=_csv_ints, default=GRID_P)
    p_verify.add_argument("--jobs", type=int, default=1,
                          help="grid cells to run concurrently")
    p_verify.add_argument("--perturb", type=float, default=0.0,
                          help="failure-injection fixture: offset added to one output element")
    registry["verify"] = p_verify

    p_cost = sub.add_parser("cost", parents=[common], help="analytic per-link volumes")
    p_cost.add_argument("--n", type=int, default=1024)
    p_cost.add_argument("--b", type=int, default=1)
    p_cost.add_argument("--h", type=int, default=512)
    p_cost.add_argument("--p", type=_csv_ints, default=(4,), help="parallel degree(s)")
    p_cost.add_argument("--layers", type=int, default=1)
    p_cost.add_argument("--convention", choices=("exact", "paper_asymptotic"),
                        default="paper_asymptotic")
    p_cost.add_argument("--bytes", action="store_true",
                        help="display bytes instead of elements")
    p_cost.add_argument("--element-bytes", type=int, default=2)
    registry["cost"] = p_cost

    p_trace = sub.add_parser("trace", parents=[common],
                             help="simulated forward with exact ledger export")
    p_trace.add_argument("--scheme", choices=SCHEMES, default="ulysses")
    p_trace.add_argument("--n", type=int, default=8)
    p_trace.add_argument("--b", type=int, default=1)
    p_trace.add_argument("--h", type=int, default=8, help="hidden size")
    p_trace.add_argument("--heads", type=int, default=4)
    p_trace.add_argument("--p", type=int, default=4)
    p_trace.add_argument("--layers", type=int, default=1)
    p_trace.add_argument("--kernel", choices=("dense", "causal", "blocked"),
                         default="dense")
    registry["trace"] = p_trace

    p_mem = sub.add_parser("memory", parents=[common],
                           help="per-rank memory estimates across p_seq")
    p_mem.add_argument("--psi", type=float, default=1.2e9, help="parameter count")
    p_mem.add_argument("--p-data", type=int, default=1)
    p_mem.add_argument("--p-seq", type=_csv_ints, default=(1, 2, 4, 8, 16, 32, 64))
    p_mem.add_argument("--stage", type=int, choices=(0, 1, 2, 3), default=3)
    p_mem.add_argument("--n", type=int, default=0, help="tokens for activation estimate (0 = off)")
    p_mem.add_argument("--b", type=int, default=1)
    p_mem.add_argument("--h", type=int, default=0)
    p_mem.add_argument("--layers", type=int, default=0)
    p_mem.add_argument("--c-act", type=float, default=16.0,
                       help="activation bytes per token per hidden unit per layer")
    p_mem.add_argument("--worked-example", action="store_true",
                       help="print the documented fits/does-not-fit example")
    registry["memory"] = p_mem

    p_sweep = sub.add_parser("sweep", parents=[common],
                             help="proportional (n, P) scaling of per-link volumes")
    p_sweep.add_argument("--base-n", type=int, default=8192)
    p_sweep.add_argument("--base-p", type=int, default=8)
    p_sweep.add_argument("--b", type=int, default=1)
    p_sweep.add_argument("--h", type=int, default=512)
    p_sweep.add_argument("--scales", type=_csv_ints, default=(1, 2, 4, 8))
    p_sweep.add_argument("--layers", type=int, default=1)
    p_sweep.add_argument("--convention", choices=("exact", "paper_asymptotic"),
                         default="paper_asymptotic")
    registry["sweep"] = p_sweep

    return parser, registry


# -- config files -------------------------------------------------------------


def load_config(path: str) -> dict[str, str]:
    """Flat ``key = value`` lines; '#' comments; keys match the flag names."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            values[key.strip().replace("-", "_")] = value.strip()
    return values


def apply_config(subparser: argparse.ArgumentParser, config: dict[str, str]):
    """Install config values as subcommand defaults; CLI flags still win."""
    actions = {a.dest: a for a in subparser._actions}
    for key, raw in config.items():
        action = actions.get(key)
        if action is None:
            raise ValueError(f"unknown config key {key!r}")
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            value = raw.lower() in ("1", "true", "yes", "on")
        elif action.type is not None:
            value = action.type(raw)
        else:
            value = raw
        if action.choices is not None and value not in action.choices:
            raise ValueError(f"config key {key!r}: {value!r} not in {tuple(action.choices)}")
        action.default = value


# -- output helpers -----------------------------------------------------------


def _emit(args, name: str, header: list[str], rows: list[list], json_obj) -> None:
    if args.format == "table":
        sys.stdout.write(format_table(header, rows))
    elif args.format == "csv":
        sys.stdout.write(csv_text(header, rows))
    else:
        sys.stdout.write(json_text(json_obj))
    if args.out:
        write_text(os.path.join(args.out, f"{name}.csv"), csv_text(header, rows))
        write_text(os.path.join(args.out, f"{name}.json"), json_text(json_obj))


def _require_out_for_plot(args):
    if args.plot and not args.out:
        raise ValueError("--plot needs --out to know where to put the figure")


# -- subcommands ---------------------------------------------------------------


def cmd_verify(args) -> int:
    cells = default_grid(
        schemes=args.schemes, kernels=args.kernels, n_list=args.n_list,
        b_list=args.b_list, d_list=args.d_list, heads_list=args.heads_list,
        p_list=args.p_list,
    )
    report = run_grid(cells, seed=args.seed, mode=args.mode, jobs=args.jobs,
                      perturb=args.perturb)
    header, rows = _verify_matrix(report)
    if args.format == "json":
        sys.stdout.write(json_text(report))
    else:
        sys.stdout.write(format_table(header, rows))
        status = "PASS" if report["all_passed"] else "FAIL"
        sys.stdout.write(f"{status}: {report['cell_count']} cells, "
                         f"{len(report['failures'])} failures\n")
        for label in report["failures"]:
            sys.stdout.write(f"  failed: {label}\n")
    if args.out:
        write_text(os.path.join(args.out, "verify_report.json"), json_text(report))
    return 0 if report["all_passed"] else 1


def _verify_matrix(report) -> tuple[list[str], list[list]]:
    cells = report["cells"]
    p_values = sorted({c["p"] for c in cells})
    pairs = []
    for scheme in SCHEME_KERNELS:
        for kernel in SCHEME_KERNELS[scheme]:
            if any(c["scheme"] == scheme and c["kernel"] == kernel for c in cells):
                pairs.append((scheme, kernel))
    header = ["scheme/kernel"] + [f"P={p}" for p in p_values]
    rows = []
    for scheme, kernel in pairs:
        row = [f"{scheme}/{kernel}"]
        for p in p_values:
            sub = [c for c in cells
                   if c["scheme"] == scheme and c["kernel"] == kernel and c["p"] == p]
            if not sub:
                row.append("-")
            else:
                worst = max(c["max_abs_err"] for c in sub)
                mark = "ok" if all(c["passed"] for c in sub) else "FAIL"
                row.append(f"{mark} {worst:.1e}")
        rows.append(row)
    return header, rows


def cmd_cost(args) -> int:
    _require_out_for_plot(args)
    factor = args.element_bytes if args.bytes else 1
    unit = "bytes" if args.bytes else "elements"
    rows, json_rows = [], []
    per_scheme = {s: [] for s in SCHEMES}
    for p in args.p:
        rep = build_cost_report(CostInputs(n=args.n, b=args.b, h=args.h, p=p,
                                           layers=args.layers,
                                           convention=args.convention))
        rows.extend(rep.rows())
        json_rows.append(rep.to_json_obj())
        for s in SCHEMES:
            per_scheme[s].append(rep.per_link[s] * factor)
    table_rows = rows
    if factor != 1:
        table_rows = [r[:7] + [_scaled(r[7], factor), _scaled(r[8], factor), r[9]]
                      for r in rows]
    if args.format == "table":
        sys.stdout.write(f"per-link communication volume ({unit}/layer)\n")
    _emit_cost(args, table_rows, rows, json_rows)
    if args.plot:
        from .plots import plot_cost

        path = plot_cost(list(args.p), per_scheme, unit,
                         os.path.join(args.out, "cost.png"))
        sys.stdout.write(f"figure: {path}\n")
    return 0


def _scaled(v, factor):
    return v * factor


def _emit_cost(args, table_rows, csv_rows, json_rows):
    if args.format == "table":
        sys.stdout.write(format_table(COST_CSV_COLUMNS, table_rows))
    elif args.format == "csv":
        sys.stdout.write(csv_text(COST_CSV_COLUMNS, csv_rows))
    else:
        sys.stdout.write(json_text(json_rows))
    if args.out:
        write_text(os.path.join(args.out, "cost.csv"), csv_text(COST_CSV_COLUMNS, csv_rows))
        write_text(os.path.join(args.out, "cost.json"), json_text(json_rows))


def cmd_trace(args) -> int:
    _require_out_for_plot(args)
    if args.scheme == "ring" and args.kernel == "blocked":
        raise ValueError("ring attention supports dense/causal kernels only")
    mask = default_mask_for(args.kernel, args.n, BLOCK_SIZE)
    spec = AttentionSpec(n=args.n, b=args.b, d=args.h, h_heads=args.heads, mask=mask)
    spec.check_group(args.p)
    weights = [make_weights(args.h, args.seed, layer=i) for i in range(args.layers)]
    x = make_input(args.n, args.b, args.h, args.seed)
    if args.scheme == "ulysses":
        _, ledger = run_ulysses_blocks(x, weights, spec, args.kernel, args.p, args.mode)
    elif args.scheme == "megatron":
        _, ledger = run_megatron_blocks(x, weights, spec, args.kernel, args.p, args.mode)
    else:
        _, ledger = run_ring_attention(x, weights, spec, args.p, args.mode)

    totals_rows = []
    counts = ledger.counts_by_collective()
    for kind in sorted(counts):
        totals_rows.append([
            kind, counts[kind], ledger.total_aggregate(kind), ledger.total_egress(kind),
        ])
    totals_rows.append(["total", len(ledger), ledger.total_aggregate(), ledger.total_egress()])

    if args.format == "table":
        sys.stdout.write(format_table(TRACE_TOTALS_COLUMNS, totals_rows))
    elif args.format == "csv":
        sys.stdout.write(ledger.to_csv_text())
    else:
        sys.stdout.write(ledger.to_json_text())
    if args.out:
        ledger.write_csv(os.path.join(args.out, "ledger.csv"))
        ledger.write_json(os.path.join(args.out, "ledger.json"))
    if args.plot:
        from .plots import plot_trace

        path = plot_trace(ledger.records, os.path.join(args.out, "trace.png"))
        sys.stdout.write(f"figure: {path}\n")
    return 0


def cmd_memory(args) -> int:
    _require_out_for_plot(args)
    want_activation = args.n > 0 and args.h > 0 and args.layers > 0
    rows = []
    model_series, act_series = [], []
    for p_seq in args.p_seq:
        m = MemoryInputs(psi=args.psi, p_data=args.p_data, p_seq=p_seq,
                         zero_stage=args.stage)
        model_state = zero_memory_per_rank(m)
        act = (activation_memory_per_rank(args.n, args.b, args.h, args.layers,
                                          p_seq, args.c_act)
               if want_activation else 0.0)
        rows.append([args.stage, args.psi, args.p_data, p_seq,
                     model_state, act, model_state + act])
        model_series.append(model_state)
        act_series.append(act)
    json_obj = [dict(zip(MEMORY_CSV_COLUMNS, r)) for r in rows]
    _emit(args, "memory", MEMORY_CSV_COLUMNS, rows, json_obj)
    if args.worked_example:
        sys.stdout.write(_worked_example_text())
    if args.plot:
        from .plots import plot_memory

        path = plot_memory(list(args.p_seq), model_series, act_series,
                           os.path.join(args.out, "memory.png"))
        sys.stdout.write(f"figure: {path}\n")
    return 0


def _worked_example_text() -> str:
    ex = worked_memory_example()
    gb = 1e9
    return (
        "\nworked example: psi={psi:.2e} params, n={n} tokens, h={h}, "
        "{layers} layers, budget {budget:.0f} GB/rank\n"
        "  replicated states + unsharded activations: {rep:.1f} GB/rank -> fits: {fr}\n"
        "  stage-3 over p_data={pd} x p_seq={ps} + sharded activations: "
        "{part:.1f} GB/rank -> fits: {fp}\n".format(
            psi=ex["psi"], n=ex["n"], h=ex["h"], layers=ex["layers"],
            budget=ex["budget_bytes"] / gb,
            rep=ex["replicated_total_bytes"] / gb, fr=ex["fits_replicated"],
            pd=ex["p_data"], ps=ex["p_seq"],
            part=ex["partitioned_total_bytes"] / gb, fp=ex["fits_partitioned"],
        )
    )


def cmd_sweep(args) -> int:
    _require_out_for_plot(args)
    rows, json_rows = [], []
    per_scheme = {s: [] for s in SCHEMES}
    for k in args.scales:
        c = CostInputs(n=k * args.base_n, b=args.b, h=args.h, p=k * args.base_p,
                       layers=args.layers, convention=args.convention)
        rep = build_cost_report(c)
        rows.extend(rep.rows())
        json_rows.append(rep.to_json_obj())
        for s in SCHEMES:
            per_scheme[s].append(rep.per_link[s])
    if args.format == "table":
        sys.stdout.write(
            f"per-link volume (elements/layer), (n, P) scaled from "
            f"({args.base_n}, {args.base_p})\n"
        )
        sys.stdout.write(format_table(COST_CSV_COLUMNS, rows))
    elif args.format == "csv":
        sys.stdout.write(csv_text(COST_CSV_COLUMNS, rows))
    else:
        sys.stdout.write(json_text(json_rows))
    if args.out:
        write_text(os.path.join(args.out, "sweep.csv"), csv_text(COST_CSV_COLUMNS, rows))
        write_text(os.path.join(args.out, "sweep.json"), json_text(json_rows))
    if args.plot:
        from .plots import plot_sweep

        path = plot_sweep(list(args.scales), per_scheme, "elements",
                          os.path.join(args.out, "sweep.png"))
        sys.stdout.write(f"figure: {path}\n")
    return 0


_COMMANDS = {
    "verify": cmd_verify,
    "cost": cmd_cost,
    "trace": cmd_trace,
    "memory": cmd_memory,
    "sweep": cmd_sweep,
}


def main(argv=None) -> int:
    parser, registry = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.config:
            config = load_config(args.config)
            apply_config(registry[args.command], config)
            args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
