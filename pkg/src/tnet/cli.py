"""``tnet`` command line.

Exit codes: 0 success, 1 invalid usage or input, 2 numerical failure.
"""
import argparse
import csv
import io
import logging
import sys
import warnings
from pathlib import Path

from . import analysis
from .decomp import (
    hooi, load_bundle, mps_reconstruct, relative_error, save_bundle, tt_rank_bounds, tt_svd,
    tucker_reconstruct,
)
from .grad import DivergenceError, OptimizerState, make_toy_task, train_toy
from .net import ArchConfig, benchmark_conv
from .tensor_core import ConvergenceError, TensorError, load_tensor

logger = logging.getLogger("tnet")

TOY_SHAPE = (2, 2, 3, 2, 8, 8, 3, 3)
BENCH_GEOMETRY = {"channels": 128, "height": 64, "width": 64, "batch": 64}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_ranks(text):
    """``full`` or a comma-separated list of positive integers."""
    text = text.strip()
    if text == "full":
        return "full"
    try:
        ranks = tuple(int(tok) for tok in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed rank list {text!r}") from None
    if any(r < 1 for r in ranks):
        raise argparse.ArgumentTypeError(f"ranks must be positive: {text!r}")
    return ranks


def _load_arch(path, default_shape):
    if path is None:
        return ArchConfig.from_shape(default_shape)
    return ArchConfig.from_json(path)


def _overhead(args, arch):
    if args.overhead is not None:
        return args.overhead
    if arch.overhead_params is not None:
        return arch.overhead_params
    return analysis.DEFAULT_OVERHEAD


def _emit_reports(reports, dense_total, csv_path, out):
    out.write(analysis.format_table(reports, dense_total))
    if csv_path:
        Path(csv_path).write_text(analysis.reports_to_csv(reports, dense_total), newline="")


def _published_ratio(arch, method, ranks):
    """Reported ratio for a configuration that appears in the reference tables, else None."""
    if arch.shape != analysis.REFERENCE_SHAPE:
        return None
    if method == "mps":
        rows = [analysis.TABLE3_MPS_ROW]
    else:
        rows = analysis.TABLE2_ROWS + analysis.TABLE3_TUCKER_ROWS
    for known, reported in rows:
        if tuple(known) == tuple(ranks):
            return reported
    return None


def cmd_analyze(args, out):
    arch = _load_arch(args.arch, analysis.REFERENCE_SHAPE)
    e = _overhead(args, arch)
    reports = [analysis.make_report("dense", arch, overhead=e)]
    if args.tucker_ranks is not None:
        ranks = arch.shape if args.tucker_ranks == "full" else args.tucker_ranks
        reports.append(analysis.make_report(
            "tucker", arch, ranks, e, _published_ratio(arch, "tucker", ranks)))
    if args.mps_ranks is not None:
        if args.mps_ranks == "full":
            raise UsageError("--mps-ranks needs an explicit chain")
        reports.append(analysis.make_report(
            "mps", arch, args.mps_ranks, e, _published_ratio(arch, "mps", args.mps_ranks)))
    _emit_reports(reports, reports[0].total, args.csv, out)


def _cmd_table(name):
    def run(args, out):
        e = args.overhead if args.overhead is not None else analysis.DEFAULT_OVERHEAD
        reports = analysis.reproduce_tables(overhead=e)[name]
        _emit_reports(reports, reports[0].total, args.csv, out)
    return run


def _method_ranks(args):
    ranks = args.ranks
    if ranks is None:
        ranks = args.tucker_ranks if args.method == "tucker" else args.mps_ranks
    if ranks is None:
        raise UsageError("decompose needs --ranks")
    return ranks


def cmd_decompose(args, out):
    tensor = load_tensor(args.input)
    ranks = _method_ranks(args)
    if args.method == "tucker":
        ranks = tensor.shape if ranks == "full" else ranks
        decomposition, history = hooi(tensor, ranks, tol=args.tol, max_iter=args.max_iter)
        approx = tucker_reconstruct(decomposition)
        iterations = len(history) - 1
    else:
        if ranks == "full":
            ranks = tt_rank_bounds(tensor.shape)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            decomposition = tt_svd(tensor, ranks)
        for w in caught:
            logger.warning("%s", w.message)
        approx = mps_reconstruct(decomposition)
        iterations = 0
    err = relative_error(tensor, approx)
    meta = save_bundle(args.out, decomposition, relative_err=err, iterations=iterations)
    if args.arch:
        ArchConfig.from_json(args.arch).to_json(Path(args.out) / "arch.json")
    out.write(f"method {meta['method']}\nranks {','.join(map(str, meta['ranks']))}\n"
              f"relative_error {err:.17g}\niterations {iterations}\n")


def cmd_reconstruct_error(args, out):
    decomposition, meta = load_bundle(args.bundle)
    approx = tucker_reconstruct(decomposition) if meta["method"] == "tucker" else mps_reconstruct(decomposition)
    err = relative_error(load_tensor(args.against), approx)
    out.write(f"{err:.17g}\n")


def cmd_train_toy(args, out):
    if args.seed is None:
        raise UsageError("train-toy requires --seed")
    arch = _load_arch(args.arch, TOY_SHAPE)
    ranks = arch.shape if args.ranks in (None, "full") else args.ranks
    task = make_toy_task(args.seed)
    opt = OptimizerState() if args.lr is None else OptimizerState(lr=args.lr)
    result = train_toy(arch, ranks, task, args.steps, opt=opt)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "loss"])
    for step, loss in enumerate(result.losses):
        writer.writerow([step, format(loss, ".17g")])
    if args.csv:
        Path(args.csv).write_text(buf.getvalue(), newline="")
    else:
        out.write(buf.getvalue())
    if args.out:
        save_bundle(args.out, result.tucker, iterations=args.steps)
        arch.to_json(Path(args.out) / "arch.json")


def cmd_bench(args, out):
    if args.seed is None:
        raise UsageError("bench requires --seed")
    ranks = args.ranks
    if ranks in (None, "full"):
        ranks = (BENCH_GEOMETRY["channels"],) if ranks == "full" else (96, 64, 50, 32)
    batch = max(1, round(BENCH_GEOMETRY["batch"] * args.scale))
    rows = benchmark_conv(
        ranks, channels=BENCH_GEOMETRY["channels"], height=BENCH_GEOMETRY["height"],
        width=BENCH_GEOMETRY["width"], batch=batch, runs=args.runs, warmup=args.warmup,
        seed=args.seed)
    out.write(f"# 3x3 conv, {BENCH_GEOMETRY['channels']} channels, "
              f"{BENCH_GEOMETRY['height']}x{BENCH_GEOMETRY['width']} input, batch {batch}; "
              "wall-clock times depend on hardware\n")
    header = ["rank", "compression", "mac_ratio", "baseline_ms", "factorized_ms", "speedup"]
    out.write("  ".join(f"{h:>13}" for h in header) + "\n")
    for r in rows:
        out.write("  ".join([
            f"{r['rank']:>13d}", f"{r['compression']:>12.2f}x", f"{r['mac_ratio']:>12.3f}x",
            f"{1e3 * r['baseline_s']:>13.2f}", f"{1e3 * r['factorized_s']:>13.2f}",
            f"{r['speedup']:>12.2f}x"]) + "\n")
    if args.csv:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        keys = list(rows[0]) if rows else []
        writer.writerow(keys)
        for r in rows:
            writer.writerow([format(r[k], ".17g") if isinstance(r[k], float) else r[k] for k in keys])
        Path(args.csv).write_text(buf.getvalue(), newline="")


def build_parser():
    parser = _Parser(prog="tnet", description="Whole-network tensor parametrization tools.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("analyze", help="parameter counts and compression ratios")
    p.add_argument("--arch")
    p.add_argument("--tucker-ranks", type=parse_ranks)
    p.add_argument("--mps-ranks", type=parse_ranks)
    p.add_argument("--overhead", type=int)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_analyze)

    for name in ("table2", "table3"):
        p = sub.add_parser(name, help=f"reproduce the compression ratios of {name}")
        p.add_argument("--overhead", type=int)
        p.add_argument("--csv")
        p.set_defaults(func=_cmd_table(name))

    p = sub.add_parser("decompose", help="Tucker (HOOI) or MPS (TT-SVD) decomposition of a tensor file")
    p.add_argument("--input", required=True)
    p.add_argument("--method", choices=("tucker", "mps"), default="tucker")
    p.add_argument("--ranks", type=parse_ranks)
    p.add_argument("--tucker-ranks", type=parse_ranks)
    p.add_argument("--mps-ranks", type=parse_ranks)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--arch")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("reconstruct-error", help="relative error of a bundle against a tensor file")
    p.add_argument("--bundle", required=True)
    p.add_argument("--against", required=True)
    p.set_defaults(func=cmd_reconstruct_error)

    p = sub.add_parser("train-toy", help="train the toy Tucker-parametrized hourglass")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--arch")
    p.add_argument("--ranks", type=parse_ranks)
    p.add_argument("--lr", type=float)
    p.add_argument("--csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("bench", help="time dense vs factorized 3x3 convolution")
    p.add_argument("--seed", type=int)
    p.add_argument("--ranks", type=parse_ranks)
    p.add_argument("--scale", type=float, default=1 / 64, help="fraction of the batch of 64 to time")
    p.add_argument("--runs", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--csv")
    p.set_defaults(func=cmd_bench)
    return parser


def run(argv=None, out=None):
    out = sys.stdout if out is None else out
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        args.func(args, out)
    except (ConvergenceError, DivergenceError, FloatingPointError) as exc:
        print(f"tnet: numerical failure: {exc}", file=sys.stderr)
        return 2
    except (UsageError, TensorError, ValueError, KeyError, OSError, IndexError) as exc:
        print(f"tnet: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())
