"""The single 8th-order weight tensor of a stacked hourglass network.

Modes, in order: number of stacked hourglasses, hourglass depth, pathway
(encoder / decoder / skip), convolutions per block, input features, output
features, kernel height and kernel width. A layer is addressed by its first
four indices; its kernel is the remaining ``(f_in, f_out, h, w)`` block.

Convolution kernels use the ``(f_in, f_out, h, w)`` axis order throughout and
the convolution is a cross-correlation with zero padding. Feature maps are
``(C, H, W)`` or batched ``(N, C, H, W)`` arrays.
"""
import enum
import json
import statistics
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .decomp import MPSCores, TuckerFactors, _chain_step
from .tensor_core import ShapeError, as_tensor

__all__ = [
    "Pathway", "ArchConfig", "TNetWeights", "FactorizedConv",
    "weight_tensor_shape", "layer_indices", "slice_kernel", "partial_core_contract",
    "factorized_kernel", "conv2d_reference", "conv2d_backward", "factorized_conv2d",
    "conv_output_size", "conv_flops", "benchmark_conv",
]

MODE_NAMES = ("n_hg", "hg_depth", "hg_subnet", "b_depth", "f_in", "f_out", "kernel_h", "kernel_w")


class Pathway(enum.IntEnum):
    """Index into the ``hg_subnet`` mode."""

    ENCODER = 0
    DECODER = 1
    SKIP = 2


@dataclass(frozen=True)
class ArchConfig:
    n_hg: int
    hg_depth: int
    hg_subnet: int
    b_depth: int
    f_in: int
    f_out: int
    kernel_h: int
    kernel_w: int
    overhead_params: int = None

    def __post_init__(self):
        for name in MODE_NAMES:
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.overhead_params is not None and self.overhead_params < 0:
            raise ValueError("overhead_params must be nonnegative")

    @classmethod
    def from_shape(cls, shape, overhead_params=None):
        if len(shape) != 8:
            raise ValueError(f"expected 8 extents, got {len(shape)}")
        return cls(*(int(s) for s in shape), overhead_params=overhead_params)

    @classmethod
    def from_json(cls, path):
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown architecture keys: {sorted(unknown)}")
        missing = set(MODE_NAMES) - set(data)
        if missing:
            raise ValueError(f"missing architecture keys: {sorted(missing)}")
        return cls(**data)

    def to_json(self, path):
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")

    @property
    def shape(self):
        return weight_tensor_shape(self)

    @property
    def n_conv(self):
        return self.n_hg * self.hg_depth * self.hg_subnet * self.b_depth


def weight_tensor_shape(arch):
    return tuple(int(getattr(arch, name)) for name in MODE_NAMES)


def layer_indices(arch):
    """All ``(i0, i1, i2, i3)`` layer addresses in row-major order."""
    return list(np.ndindex(*weight_tensor_shape(arch)[:4]))


@dataclass
class TNetWeights:
    """Network weights in dense, Tucker or MPS form."""

    form: object
    arch: ArchConfig

    def __post_init__(self):
        if isinstance(self.form, (TuckerFactors, MPSCores)):
            full = self.form.shape
        else:
            self.form = as_tensor(self.form, "weights")
            full = self.form.shape
        if tuple(full) != self.arch.shape:
            raise ShapeError(f"weights of shape {tuple(full)} do not match architecture {self.arch.shape}")

    @property
    def kind(self):
        if isinstance(self.form, TuckerFactors):
            return "tucker"
        if isinstance(self.form, MPSCores):
            return "mps"
        return "dense"


@dataclass
class FactorizedConv:
    """``1x1`` projection, spatial convolution on the partially contracted core, ``1x1`` expansion."""

    u_in: np.ndarray
    partial_core: np.ndarray
    u_out: np.ndarray

    def __post_init__(self):
        r_in, r_out = self.partial_core.shape[:2]
        if self.partial_core.ndim != 4:
            raise ShapeError("partial core must be 4th order (R_in, R_out, h, w)")
        if self.u_in.shape[1] != r_in or self.u_out.shape[1] != r_out:
            raise ShapeError(
                f"factor shapes {self.u_in.shape}, {self.u_out.shape} do not match "
                f"partial core {self.partial_core.shape}")


def _check_layer(shape, index):
    index = tuple(int(i) for i in index)
    if len(index) != 4:
        raise IndexError("a layer is addressed by four indices")
    for k, (i, n) in enumerate(zip(index, shape[:4])):
        if not 0 <= i < n:
            raise IndexError(f"layer index {i} out of range for mode {k} of extent {n}")
    return index


def _layer_weights(tucker, index):
    """Kronecker product of the selected rows of the first four factors, ``(R0*R1*R2*R3,)``."""
    w = np.ones(1)
    for k, i in enumerate(index):
        w = np.multiply.outer(w, tucker.factors[k][i]).ravel()
    return w


def _contract_front(tucker, index):
    """Core contracted with the selected factor rows on modes 0..3 -> ``(R4, R5, R6, R7)``."""
    ranks = tucker.ranks
    w = _layer_weights(tucker, index)
    return (w @ tucker.core.reshape(w.size, -1)).reshape(ranks[4:])


def partial_core_contract(tucker, *index):
    """Split one layer's kernel into input factor, partially contracted core and output factor.

    The returned core has shape ``(R4, R5, h, w)``; the layer kernel is
    ``K[s, t, j, k] = sum C[r4, r5, j, k] U4[s, r4] U5[t, r5]``.
    """
    index = _check_layer(tucker.shape, index)
    front = _contract_front(tucker, index)
    # (h, j) @ (R4, R5, j, w) after contracting the width factor
    c = tucker.factors[6] @ (front @ tucker.factors[7].T)
    return FactorizedConv(tucker.factors[4], c, tucker.factors[5])


def factorized_kernel(fc):
    """Dense ``(f_in, f_out, h, w)`` kernel represented by a :class:`FactorizedConv`."""
    r_in, r_out, kh, kw = fc.partial_core.shape
    tmp = fc.u_in @ fc.partial_core.reshape(r_in, -1)                  # (I4, R5*h*w)
    out = fc.u_out @ tmp.reshape(-1, r_out, kh * kw)                   # (I4, I5, h*w)
    return out.reshape(fc.u_in.shape[0], fc.u_out.shape[0], kh, kw)


def slice_kernel(weights, *index):
    """Kernel of layer ``(i0, i1, i2, i3)`` as an ``(f_in, f_out, h, w)`` array.

    Compressed forms are contracted from the selected factor rows or core
    slices; the full weight tensor is never formed.
    """
    form = weights.form if isinstance(weights, TNetWeights) else weights
    if isinstance(form, TuckerFactors):
        index = _check_layer(form.shape, index)
        return factorized_kernel(partial_core_contract(form, *index))
    if isinstance(form, MPSCores):
        index = _check_layer(form.shape, index)
        left = np.ones((1, 1))
        for core, i in zip(form.cores[:4], index):
            left = _chain_step(left, core[:, i:i + 1, :]).reshape(1, -1)
        return _mps_tail(left, form.cores[4:])
    form = np.asarray(form)
    index = _check_layer(form.shape, index)
    return form[index].copy()


def _mps_tail(left, cores):
    for core in cores:
        left = _chain_step(left, core).reshape(-1, core.shape[2])
    return left.reshape(tuple(c.shape[1] for c in cores))


def conv_output_size(size, kernel, stride=1, pad=0):
    return (size + 2 * pad - kernel) // stride + 1


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"feature map must be (C, H, W) or (N, C, H, W), got {x.shape}")


def conv2d_reference(x, kernel, stride=1, pad=0):
    """Direct 2-D cross-correlation; one channel contraction per kernel tap."""
    xb, single = _as_batch(x)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 4 or kernel.shape[0] != xb.shape[1]:
        raise ShapeError(f"kernel {kernel.shape} does not accept {xb.shape[1]} input channels")
    n, c, h, w = xb.shape
    _, f, kh, kw = kernel.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError("kernel larger than padded input")
    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xb
    out = np.zeros((n, f, ho * wo))
    taps = np.ascontiguousarray(kernel.transpose(2, 3, 1, 0))   # (h, w, F, C), BLAS-friendly
    for a in range(kh):
        for b in range(kw):
            patch = xp[:, :, a:a + stride * (ho - 1) + 1:stride, b:b + stride * (wo - 1) + 1:stride]
            # (F, C) @ (N, C, Ho*Wo)
            out += taps[a, b] @ patch.reshape(n, c, ho * wo)
    out = out.reshape(n, f, ho, wo)
    return out[0] if single else out


def conv2d_backward(x, kernel, grad_out, stride=1, pad=0):
    """Gradients of :func:`conv2d_reference` with respect to input and kernel."""
    xb, single = _as_batch(x)
    gb, _ = _as_batch(grad_out)
    kernel = np.asarray(kernel, dtype=np.float64)
    n, c, h, w = xb.shape
    _, f, kh, kw = kernel.shape
    ho, wo = gb.shape[2:]
    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xb
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernel)
    g_cols = gb.transpose(1, 0, 2, 3).reshape(f, -1)    # (F, N*Ho*Wo)
    g_flat = gb.reshape(n, f, ho * wo)
    taps = np.ascontiguousarray(kernel.transpose(2, 3, 0, 1))   # (h, w, C, F)
    for a in range(kh):
        for b in range(kw):
            rows = slice(a, a + stride * (ho - 1) + 1, stride)
            cols = slice(b, b + stride * (wo - 1) + 1, stride)
            patch = xp[:, :, rows, cols].transpose(1, 0, 2, 3).reshape(c, -1)
            dk[:, :, a, b] = patch @ g_cols.T
            dxp[:, :, rows, cols] += (taps[a, b] @ g_flat).reshape(n, c, ho, wo)
    dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
    return (dx[0] if single else dx), dk


def _pointwise(x, matrix):
    """1x1 convolution: ``out[o] = sum_i matrix[o, i] * x[i]`` over the channel axis."""
    n, c, h, w = x.shape
    matrix = np.ascontiguousarray(matrix)
    return (matrix @ x.reshape(n, c, h * w)).reshape(n, matrix.shape[0], h, w)


def factorized_conv2d(x, fc, stride=1, pad=0):
    """Convolution with the kernel of `fc` computed as three smaller convolutions.

    ``f_in -> R_in`` by a 1x1 convolution with ``u_in^T``, the spatial
    ``R_in -> R_out`` convolution with the partial core (which carries stride
    and padding), then ``R_out -> f_out`` by a 1x1 convolution with ``u_out``.
    """
    xb, single = _as_batch(x)
    if xb.shape[1] != fc.u_in.shape[0]:
        raise ShapeError(f"input has {xb.shape[1]} channels, factor expects {fc.u_in.shape[0]}")
    y = _pointwise(xb, fc.u_in.T)
    y = conv2d_reference(y, fc.partial_core, stride=stride, pad=pad)
    y = _pointwise(y, fc.u_out)
    return y[0] if single else y


def conv_flops(f_in, f_out, kernel_h, kernel_w, height, width, rank_in=None, rank_out=None):
    """Multiply-accumulate counts of the dense and the three-step factorized convolution.

    Counts are per output map of size ``height x width``. Missing ranks default
    to full rank.
    """
    rank_in = f_in if rank_in is None else rank_in
    rank_out = f_out if rank_out is None else rank_out
    for v in (f_in, f_out, kernel_h, kernel_w, height, width, rank_in, rank_out):
        if v < 1:
            raise ValueError("all extents and ranks must be positive")
    pixels = height * width
    baseline = pixels * f_in * f_out * kernel_h * kernel_w
    factorized = pixels * (f_in * rank_in + rank_in * rank_out * kernel_h * kernel_w + rank_out * f_out)
    return baseline, factorized


def _time_median(fn, runs, warmup):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(runs):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def benchmark_conv(ranks, channels=128, height=64, width=64, batch=64, kernel=3,
                   runs=30, warmup=5, seed=0):
    """Time the dense convolution against the factorized one for each rank.

    Returns one dict per rank with the analytic MAC counts and median
    wall-clock seconds. BLAS is limited to one thread while timing.
    """
    from threadpoolctl import threadpool_limits

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((batch, channels, height, width))
    pad = kernel // 2
    rows = []
    with threadpool_limits(limits=1):
        dense_k = rng.standard_normal((channels, channels, kernel, kernel))
        base_t = _time_median(lambda: conv2d_reference(x, dense_k, pad=pad), runs, warmup)
        for r in ranks:
            if not 1 <= r <= channels:
                raise ValueError(f"rank {r} outside [1, {channels}]")
            fc = FactorizedConv(
                np.linalg.qr(rng.standard_normal((channels, r)))[0],
                rng.standard_normal((r, r, kernel, kernel)),
                np.linalg.qr(rng.standard_normal((channels, r)))[0])
            fact_t = _time_median(lambda: factorized_conv2d(x, fc, pad=pad), runs, warmup)
            base_macs, fact_macs = conv_flops(channels, channels, kernel, kernel, height, width, r, r)
            dense_params = channels * channels * kernel * kernel
            rows.append({
                "rank": r,
                "compression": dense_params / (r * r * kernel * kernel + 2 * channels * r),
                "baseline_macs": base_macs * batch,
                "factorized_macs": fact_macs * batch,
                "mac_ratio": base_macs / fact_macs,
                "baseline_s": base_t,
                "factorized_s": fact_t,
                "speedup": base_t / fact_t,
            })
    return rows
