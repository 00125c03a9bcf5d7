"""Parameter counts and compression ratios for the tensorized hourglass network.

All counts are exact Python integers. Ratios include an additive overhead
``E`` for parameters that live outside the weight tensor (stem, prediction
heads, BatchNorm); it is added to both the compressed and the dense total.
"""
import csv
import io
import math
from dataclasses import dataclass
from decimal import ROUND_HALF_EVEN, Decimal

from .net import ArchConfig, weight_tensor_shape
from .tensor_core import RankError

__all__ = [
    "REFERENCE_SHAPE", "DEFAULT_OVERHEAD", "TABLE2_ROWS", "TABLE3_TUCKER_ROWS", "TABLE3_MPS_ROW",
    "ParamReport", "count_dense", "count_tucker", "count_mps", "count_layerwise",
    "count_tnet_features", "count_trimmed", "compression_ratio", "fit_overhead",
    "format_ratio", "make_report", "reproduce_tables", "format_table", "reports_to_csv",
]

REFERENCE_SHAPE = (4, 4, 3, 2, 128, 128, 3, 3)

# Single-mode rank reductions and the compression ratios reported for them.
TABLE2_ROWS = [
    ((3, 4, 3, 2, 128, 128, 3, 3), 1.28),
    ((2, 4, 3, 2, 128, 128, 3, 3), 1.82),
    ((1, 4, 3, 2, 128, 128, 3, 3), 3.03),
    ((4, 3, 3, 2, 128, 128, 3, 3), 1.28),
    ((4, 2, 3, 2, 128, 128, 3, 3), 1.82),
    ((4, 1, 3, 2, 128, 128, 3, 3), 3.03),
    ((4, 4, 2, 2, 128, 128, 3, 3), 1.43),
    ((4, 4, 1, 2, 128, 128, 3, 3), 2.50),
    ((4, 4, 3, 1, 128, 128, 3, 3), 1.82),
    ((4, 4, 3, 2, 96, 96, 3, 3), 1.64),
    ((4, 4, 3, 2, 64, 64, 3, 3), 3.03),
    ((4, 4, 3, 2, 32, 32, 3, 3), 6.25),
    ((4, 4, 3, 2, 128, 128, 2, 2), 1.98),
]

# Multi-mode Tucker configurations and the MPS chain, with reported ratios.
TABLE3_TUCKER_ROWS = [
    ((4, 3, 3, 2, 110, 110, 3, 3), 1.7),
    ((4, 4, 2, 2, 110, 110, 3, 3), 1.8),
    ((3, 3, 3, 2, 110, 110, 2, 2), 3.7),
    ((3, 2, 3, 2, 96, 96, 3, 3), 3.4),
    ((3, 3, 2, 2, 80, 80, 3, 3), 4.2),
    ((2, 2, 2, 2, 96, 96, 3, 3), 5.2),
]
TABLE3_MPS_ROW = ((1, 4, 4, 12, 24, 110, 9, 3, 1), 7.4)

# Least-squares fit of E to TABLE2_ROWS on a 1e3 grid over [0, 5e6]; see fit_overhead().
DEFAULT_OVERHEAD = 1_633_000


def _shape(arch):
    if isinstance(arch, ArchConfig):
        return weight_tensor_shape(arch)
    return tuple(int(i) for i in arch)


def count_dense(arch):
    return math.prod(_shape(arch))


def count_tucker(arch, ranks):
    """Core size plus factor sizes: ``prod R_k + sum R_k * I_k``."""
    dims = _shape(arch)
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != len(dims) or any(not 1 <= r <= i for r, i in zip(ranks, dims)):
        raise RankError(f"invalid Tucker ranks {ranks} for shape {dims}")
    return math.prod(ranks) + sum(r * i for r, i in zip(ranks, dims))


def count_mps(arch, chain):
    """``sum_k R_k * I_k * R_{k+1}`` over a rank chain that includes the boundary ones."""
    dims = _shape(arch)
    chain = tuple(int(r) for r in chain)
    if len(chain) != len(dims) + 1:
        raise RankError(f"rank chain needs {len(dims) + 1} entries, got {len(chain)}")
    if chain[0] != 1 or chain[-1] != 1:
        raise RankError("boundary ranks must be 1")
    for k, r in enumerate(chain):
        bound = min(math.prod(dims[:k]), math.prod(dims[k:]))
        if not 1 <= r <= bound:
            raise RankError(f"rank R_{k}={r} outside [1, {bound}]")
    return sum(chain[k] * dims[k] * chain[k + 1] for k in range(len(dims)))


def _n_conv(dims):
    return math.prod(dims[:4])


def _check_feature_ranks(dims, r_in, r_out):
    if not (1 <= r_in <= dims[4] and 1 <= r_out <= dims[5]):
        raise RankError(f"feature ranks ({r_in}, {r_out}) outside ({dims[4]}, {dims[5]})")


def count_layerwise(arch, r_in, r_out):
    """Every layer compressed separately with its own channel factors."""
    dims = _shape(arch)
    _check_feature_ranks(dims, r_in, r_out)
    per_layer = r_in * r_out * dims[6] * dims[7] + r_in * dims[4] + r_out * dims[5]
    return _n_conv(dims) * per_layer


def count_tnet_features(arch, r_in, r_out):
    """Per-layer spatial cores with one pair of channel factors shared across all layers."""
    dims = _shape(arch)
    _check_feature_ranks(dims, r_in, r_out)
    return _n_conv(dims) * r_in * r_out * dims[6] * dims[7] + r_in * dims[4] + r_out * dims[5]


def count_trimmed(arch, width):
    dims = list(_shape(arch))
    if not 1 <= width <= dims[4]:
        raise ValueError(f"trimmed width {width} outside [1, {dims[4]}]")
    dims[4] = dims[5] = int(width)
    return math.prod(dims)


def compression_ratio(method_total, dense_total):
    if method_total <= 0 or dense_total <= 0:
        raise ValueError("parameter totals must be positive")
    return dense_total / method_total


def format_ratio(ratio, digits=2):
    quantum = Decimal(1).scaleb(-digits)
    return f"{Decimal(ratio).quantize(quantum, rounding=ROUND_HALF_EVEN)}x"


def fit_overhead(rows=TABLE2_ROWS, shape=REFERENCE_SHAPE, upper=5_000_000, step=1_000):
    """Grid search for the overhead minimising the squared ratio error over `rows`."""
    dense = count_dense(shape)
    counts = [(count_tucker(shape, ranks), reported) for ranks, reported in rows]
    best_e, best_loss = 0, math.inf
    for e in range(0, upper + 1, step):
        loss = sum(((dense + e) / (c + e) - reported) ** 2 for c, reported in counts)
        if loss < best_loss:
            best_e, best_loss = e, loss
    return best_e


@dataclass(frozen=True)
class ParamReport:
    method: str
    ranks: tuple
    tensorized: int
    overhead: int
    reported_ratio: float = None

    @property
    def total(self):
        return self.tensorized + self.overhead

    def ratio(self, dense_total):
        return compression_ratio(self.total, dense_total)


def make_report(method, arch, ranks=None, overhead=DEFAULT_OVERHEAD, reported=None):
    dims = _shape(arch)
    if method == "dense":
        count, ranks = count_dense(dims), tuple(dims)
    elif method == "tucker":
        count = count_tucker(dims, ranks)
    elif method == "mps":
        count = count_mps(dims, ranks)
    elif method == "trimmed":
        count = count_trimmed(dims, ranks[0])
    elif method == "layerwise":
        count = count_layerwise(dims, *ranks)
    else:
        raise ValueError(f"unknown method {method!r}")
    return ParamReport(method, tuple(int(r) for r in ranks), count, int(overhead), reported)


def reproduce_tables(arch=REFERENCE_SHAPE, overhead=DEFAULT_OVERHEAD):
    """Reports for every single-mode row and every Tucker/MPS multi-mode row.

    Returns ``{"table2": [...], "table3": [...]}``; the dense reference is the
    first entry of each list.
    """
    dense = make_report("dense", arch, overhead=overhead, reported=1.0)
    table2 = [dense] + [
        make_report("tucker", arch, ranks, overhead, reported) for ranks, reported in TABLE2_ROWS]
    table3 = [dense] + [
        make_report("tucker", arch, ranks, overhead, reported) for ranks, reported in TABLE3_TUCKER_ROWS]
    table3.append(make_report("mps", arch, TABLE3_MPS_ROW[0], overhead, TABLE3_MPS_ROW[1]))
    return {"table2": table2, "table3": table3}


def _rows(reports, dense_total):
    for r in reports:
        yield [r.method, ",".join(map(str, r.ranks)), str(r.tensorized), str(r.overhead),
               str(r.total), format_ratio(r.ratio(dense_total)),
               "" if r.reported_ratio is None else f"{r.reported_ratio:g}x"]


def format_table(reports, dense_total):
    """Aligned plain-text table; the computed ratio is the last column unless a reported value exists."""
    header = ["method", "ranks", "tensorized", "overhead", "total", "ratio", "reported"]
    body = list(_rows(reports, dense_total))
    if all(not row[-1] for row in body):
        header, body = header[:-1], [row[:-1] for row in body]
    widths = [max(len(h), *(len(row[i]) for row in body)) for i, h in enumerate(header)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths)).rstrip()]
    for row in body:
        lines.append("  ".join(c.rjust(w) if i >= 2 else c.ljust(w)
                               for i, (c, w) in enumerate(zip(row, widths))).rstrip())
    return "\n".join(lines) + "\n"


def reports_to_csv(reports, dense_total):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "ranks", "tensorized", "overhead", "total", "ratio"])
    for r in reports:
        writer.writerow([r.method, " ".join(map(str, r.ranks)), r.tensorized, r.overhead,
                         r.total, format(r.ratio(dense_total), ".17g")])
    return buf.getvalue()
