"""Command-line front end.

Four subcommands:

  correctness  fused kernels vs the float64 oracle at small shapes
  bench        timing + ledger-memory sweep, fused vs unfused baseline
  converge     train the tiny decoder both ways and compare trajectories
  report       render a results CSV produced by `bench --csv`

Defaults can come from a flat `key = value` config file (`--config`);
explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import csv
import sys

from .bench import (
    ALL_OPS,
    DEFAULT_BUDGET,
    DEFAULT_OPS,
    DEFAULT_REPEATS,
    HIDDEN_SWEEP,
    VOCAB_SWEEP,
    SchemaMismatch,
    ShapeTooLarge,
    format_table,
    read_records,
    run_bench,
    run_correctness,
    summarize,
    write_records,
)
from .converge import ConvergeConfig, NonFiniteLoss, converge
from .core import DType, NonContiguousInput


def load_config(path: str) -> dict[str, str]:
    """Flat key = value pairs, # comments, blank lines ignored."""
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value, got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            out[key.strip().replace("-", "_")] = value.strip()
    return out


def _resolve(args: argparse.Namespace, config: dict[str, str], key: str, fallback, cast):
    """Flag beats config file beats built-in default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in config:
        return cast(config[key])
    return fallback


def _csv_ints(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _csv_names(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _parse_shapes(text: str) -> list[tuple[int, int, int]]:
    """\"256x4096,128x40960x256\" -> [(256, 4096, 0), (128, 40960, 256)]."""
    triples = []
    for part in _csv_names(text):
        dims = [int(d) for d in part.split("x")]
        if len(dims) == 2:
            triples.append((dims[0], dims[1], 0))
        elif len(dims) == 3:
            triples.append((dims[0], dims[1], dims[2]))
        else:
            raise ValueError(f"shape {part!r} must be RxC or RxCxH")
    return triples


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value defaults file")
    p.add_argument("--seed", type=int, default=None, help="rng seed (default 0)")
    p.add_argument("--dtype", choices=["f32", "f64"], default=None, help="working dtype")
    p.add_argument("--csv", help="also write results to this CSV file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rowfuse", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    pc = sub.add_parser("correctness", help="fused kernels vs the float64 oracle")
    _add_common(pc)
    pc.add_argument("--ops", default=None, help=f"comma list from {', '.join(ALL_OPS)}")
    pc.add_argument("--shapes", default=None, help="RxC or RxCxH triples, comma separated")

    pb = sub.add_parser("bench", help="timing and memory sweep vs the unfused baseline")
    _add_common(pb)
    pb.add_argument("--ops", default=None, help=f"comma list (default: {', '.join(DEFAULT_OPS)})")
    pb.add_argument("--shapes", default=None, help="explicit RxC[xH] triples for every op")
    pb.add_argument("--rows", type=int, default=None, help="override the fixed row count")
    pb.add_argument(
        "--hidden", default=None, help=f"hidden-size sweep (default {list(HIDDEN_SWEEP)})"
    )
    pb.add_argument(
        "--vocab", default=None, help=f"vocab-size sweep for the losses (default {list(VOCAB_SWEEP)})"
    )
    pb.add_argument("--repeats", type=int, default=None, help=f"timed runs (default {DEFAULT_REPEATS})")
    pb.add_argument("--parallel", type=int, default=None, help="row-block worker threads")
    pb.add_argument(
        "--budget-bytes", type=int, default=None, help=f"working-set cap (default {DEFAULT_BUDGET})"
    )

    pv = sub.add_parser("converge", help="tiny-decoder training parity check")
    _add_common(pv)
    pv.add_argument("--steps", type=int, default=None, help="training steps (default 100)")
    pv.add_argument("--lr", type=float, default=None, help="learning rate")
    pv.add_argument("--path-a", choices=["fused", "reference"], default=None)
    pv.add_argument("--path-b", choices=["fused", "reference"], default=None)
    pv.add_argument(
        "--replay-noncontiguous",
        action="store_true",
        help="feed path A's rotation backward a strided gradient view",
    )
    pv.add_argument(
        "--no-guards",
        action="store_true",
        help="ignore the layout flag during the replay (demonstrates the failure)",
    )

    pr = sub.add_parser("report", help="summarize a bench CSV")
    pr.add_argument("csv_path", help="file written by bench --csv")
    pr.add_argument("--csv", help="write the merged speedup/mem_ratio rows here")
    return parser


def cmd_correctness(args: argparse.Namespace) -> int:
    config = load_config(args.config) if args.config else {}
    ops_list = _resolve(args, config, "ops", ",".join(ALL_OPS), str)
    shapes = _resolve(args, config, "shapes", None, str)
    dtype_arg = _resolve(args, config, "dtype", None, str)
    seed = _resolve(args, config, "seed", 0, int)
    # one dtype when asked, the full f32 + f64 matrix otherwise
    dtypes = [DType.parse(dtype_arg)] if dtype_arg else [DType.F32, DType.F64]

    results = []
    for dtype in dtypes:
        results.extend(
            run_correctness(
                _csv_names(ops_list),
                _parse_shapes(shapes) if shapes else None,
                dtype,
                seed,
            )
        )
    failures = 0
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        failures += 0 if r.passed else 1
        dims = f"{r.rows}x{r.cols}" + (f"x{r.hidden}" if r.hidden else "")
        print(
            f"{status}  {r.op:<14} {dims:<14} {r.dtype}  {r.output:<8} "
            f"max_abs={r.max_abs:.3e} max_rel={r.max_rel:.3e}"
        )
    print(f"{len(results) - failures}/{len(results)} checks passed")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                ["op", "rows", "cols", "hidden", "dtype", "output", "max_abs", "max_rel", "passed"]
            )
            for r in results:
                writer.writerow(
                    [r.op, r.rows, r.cols, r.hidden, r.dtype, r.output,
                     f"{r.max_abs:.9g}", f"{r.max_rel:.9g}", int(r.passed)]
                )
    return 1 if failures else 0


def cmd_bench(args: argparse.Namespace) -> int:
    config = load_config(args.config) if args.config else {}
    ops_list = _csv_names(_resolve(args, config, "ops", ",".join(DEFAULT_OPS), str))
    shapes_arg = _resolve(args, config, "shapes", None, str)
    rows_override = _resolve(args, config, "rows", None, int)
    hidden_arg = _resolve(args, config, "hidden", None, str)
    vocab_arg = _resolve(args, config, "vocab", None, str)
    dtype = DType.parse(_resolve(args, config, "dtype", "f32", str))
    repeats = _resolve(args, config, "repeats", DEFAULT_REPEATS, int)
    seed = _resolve(args, config, "seed", 0, int)
    workers = _resolve(args, config, "parallel", 0, int)
    budget = _resolve(args, config, "budget_bytes", DEFAULT_BUDGET, int)

    shapes_by_op: dict[str, list[tuple[int, int, int]] | None] = {op: None for op in ops_list}
    if shapes_arg:
        explicit = _parse_shapes(shapes_arg)
        shapes_by_op = {op: explicit for op in ops_list}
    elif rows_override or hidden_arg or vocab_arg:
        # rebuild the default sweeps with the requested dimensions
        hid = _csv_ints(hidden_arg) if hidden_arg else list(HIDDEN_SWEEP)
        voc = _csv_ints(vocab_arg) if vocab_arg else list(VOCAB_SWEEP)
        for op in ops_list:
            if op in ("rmsnorm", "layernorm", "rope"):
                shapes_by_op[op] = [(rows_override or 256, h, 0) for h in hid]
            elif op in ("swiglu", "geglu"):
                shapes_by_op[op] = [(r, 512, 0) for r in hid]
            elif op == "cross_entropy":
                shapes_by_op[op] = [(rows_override or 512, v, 0) for v in voc]
            elif op == "linear_ce":
                shapes_by_op[op] = [(rows_override or 128, v, 256) for v in voc]

    progress = lambda msg: print(f"bench: {msg}", flush=True)  # noqa: E731
    try:
        records = []
        for op in ops_list:
            records.extend(
                run_bench([op], shapes_by_op[op], dtype, repeats, seed, workers, budget, progress)
            )
    except ShapeTooLarge as exc:
        print(f"refusing to run: {exc}", file=sys.stderr)
        return 2

    print(format_table(summarize(records)))
    if args.csv:
        write_records(args.csv, records)
        print(f"wrote {len(records)} records to {args.csv}")
    return 0


def cmd_converge(args: argparse.Namespace) -> int:
    config = load_config(args.config) if args.config else {}
    cfg = ConvergeConfig(
        steps=_resolve(args, config, "steps", 100, int),
        seed=_resolve(args, config, "seed", 0, int),
        dtype=DType.parse(_resolve(args, config, "dtype", "f32", str)),
        lr=_resolve(args, config, "lr", ConvergeConfig.lr, float),
        path_a=_resolve(args, config, "path_a", "fused", str),
        path_b=_resolve(args, config, "path_b", "reference", str),
        replay_noncontiguous=args.replay_noncontiguous or config.get("replay_noncontiguous") == "1",
        guards_enabled=not (args.no_guards or config.get("no_guards") == "1"),
    )
    try:
        report = converge(cfg)
    except NonContiguousInput as exc:
        print(f"layout guard rejected the replayed gradient: {exc}")
        return 2
    except NonFiniteLoss as exc:
        print(f"training diverged to a non-finite loss: {exc}")
        return 2

    print(
        f"{cfg.path_a} vs {cfg.path_b}: {report.steps} steps, "
        f"loss {report.losses_a[0]:.6f} -> {report.losses_a[-1]:.6f}"
    )
    print(
        f"max |loss_a - loss_b| = {report.max_loss_diff:.3e}, "
        f"final param diff = {report.final_param_diff:.3e}, "
        f"final logits diff = {report.final_logits_diff:.3e}"
    )
    print("PASS" if report.passed else "FAIL")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss_a", "loss_b"])
            for i, (a, b) in enumerate(zip(report.losses_a, report.losses_b)):
                writer.writerow([i, f"{a:.9g}", f"{b:.9g}"])
    return 0 if report.passed else 1


def cmd_report(args: argparse.Namespace) -> int:
    try:
        records = read_records(args.csv_path)
    except SchemaMismatch as exc:
        print(f"bad results file: {exc}", file=sys.stderr)
        return 2
    rows = summarize(records)
    print(format_table(rows))
    if args.csv and rows:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(rows[0].keys())
            for row in rows:
                writer.writerow(row.values())
    return 0


_COMMANDS = {
    "correctness": cmd_correctness,
    "bench": cmd_bench,
    "converge": cmd_converge,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return _COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
