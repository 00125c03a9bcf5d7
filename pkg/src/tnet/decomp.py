"""Tucker (HOSVD, HOOI) and tensor-train (MPS) decompositions.

CP decomposition is the Tucker form with a super-diagonal core and is not
provided separately.
"""
import json
import logging
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor_core import (
    ConvergenceError, RankError, ShapeError, as_tensor, frobenius_norm,
    load_tensor, multi_mode_dot, save_tensor, truncated_svd, unfold,
)

logger = logging.getLogger(__name__)

__all__ = [
    "TuckerFactors", "MPSCores", "tucker_reconstruct", "hosvd", "hooi",
    "tt_svd", "mps_reconstruct", "mps_element", "relative_error",
    "tt_rank_bounds", "save_bundle", "load_bundle",
]


@dataclass
class TuckerFactors:
    """Core tensor plus one ``(I_k, R_k)`` factor matrix per mode."""

    core: np.ndarray
    factors: list

    def __post_init__(self):
        self.core = as_tensor(self.core, "core")
        self.factors = [np.ascontiguousarray(f, dtype=np.float64) for f in self.factors]
        if len(self.factors) != self.core.ndim:
            raise RankError(
                f"{len(self.factors)} factors for a core of order {self.core.ndim}")
        for k, (f, r) in enumerate(zip(self.factors, self.core.shape)):
            if f.ndim != 2 or f.shape[1] != r:
                raise RankError(f"factor {k} has shape {f.shape}, core extent is {r}")
            if r > f.shape[0]:
                raise RankError(f"rank {r} exceeds dimension {f.shape[0]} on mode {k}")
            if not np.all(np.isfinite(f)):
                raise RankError(f"factor {k} contains NaN or Inf")

    @property
    def ranks(self):
        return tuple(self.core.shape)

    @property
    def shape(self):
        return tuple(f.shape[0] for f in self.factors)

    def copy(self):
        return TuckerFactors(self.core.copy(), [f.copy() for f in self.factors])


@dataclass
class MPSCores:
    """Third-order cores ``G_k`` of shape ``(R_k, I_k, R_{k+1})`` with ``R_0 = R_N = 1``."""

    cores: list

    def __post_init__(self):
        self.cores = [as_tensor(c, f"core {k}") for k, c in enumerate(self.cores)]
        if not self.cores:
            raise RankError("an MPS needs at least one core")
        for k, c in enumerate(self.cores):
            if c.ndim != 3:
                raise ShapeError(f"core {k} must be third order, got shape {c.shape}")
        if self.cores[0].shape[0] != 1 or self.cores[-1].shape[2] != 1:
            raise RankError("boundary ranks must be 1")
        for k in range(len(self.cores) - 1):
            if self.cores[k].shape[2] != self.cores[k + 1].shape[0]:
                raise RankError(f"cores {k} and {k + 1} disagree on the linking rank")
        bounds = tt_rank_bounds(self.shape)
        for k, (r, b) in enumerate(zip(self.ranks, bounds)):
            if r > b:
                raise RankError(f"rank R_{k}={r} exceeds the attainable bound {b}")

    @property
    def ranks(self):
        return tuple(c.shape[0] for c in self.cores) + (1,)

    @property
    def shape(self):
        return tuple(c.shape[1] for c in self.cores)


def tt_rank_bounds(shape):
    """Largest attainable TT-rank at each link ``k = 0..N``."""
    shape = [int(s) for s in shape]
    return tuple(
        min(math.prod(shape[:k]), math.prod(shape[k:]))
        for k in range(len(shape) + 1))


def _check_tucker_ranks(shape, ranks):
    ranks = tuple(int(r) for r in ranks)
    if len(ranks) != len(shape):
        raise RankError(f"{len(ranks)} ranks for a tensor of order {len(shape)}")
    for k, (r, i) in enumerate(zip(ranks, shape)):
        if not 1 <= r <= i:
            raise RankError(f"rank {r} on mode {k} outside [1, {i}]")
    return ranks


def tucker_reconstruct(tucker):
    return multi_mode_dot(tucker.core, tucker.factors)


def relative_error(reference, approx):
    """``||reference - approx|| / ||reference||``; 0/0 is taken as 0."""
    a = np.asarray(reference, dtype=np.float64)
    b = np.asarray(approx, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shapes differ: {a.shape} vs {b.shape}")
    norm_a = frobenius_norm(a)
    diff = frobenius_norm(a - b)
    if norm_a == 0.0:
        if diff == 0.0:
            return 0.0
        raise ShapeError("relative error undefined: reference is zero, approximation is not")
    return diff / norm_a


def hosvd(tensor, ranks):
    """Truncated higher-order SVD.

    Each factor holds the leading left singular vectors of the matching
    unfolding; the core is the projection of `tensor` onto them.
    """
    tensor = as_tensor(tensor)
    ranks = _check_tucker_ranks(tensor.shape, ranks)
    factors = [truncated_svd(unfold(tensor, k), r)[0] for k, r in enumerate(ranks)]
    core = multi_mode_dot(tensor, factors, transpose=True)
    return TuckerFactors(core, factors)


def _tucker_error(norm_t, tensor, tucker):
    if norm_t == 0.0:
        return 0.0
    return frobenius_norm(tensor - tucker_reconstruct(tucker)) / norm_t


def hooi(tensor, ranks, tol=1e-6, max_iter=100):
    """Higher-order orthogonal iteration, initialised with :func:`hosvd`.

    Modes are updated in order ``0..N-1`` each sweep. Iteration stops when the
    relative error changes by less than `tol`, after `max_iter` sweeps, or
    when a sweep fails to lower the error (that sweep is discarded, so the
    returned history is nonincreasing).

    Returns
    -------
    tucker : TuckerFactors
    history : list of float
        Relative reconstruction error of the initialisation and of every
        accepted sweep.
    """
    tensor = as_tensor(tensor)
    ranks = _check_tucker_ranks(tensor.shape, ranks)
    if tol <= 0:
        raise ValueError("tol must be positive")
    if max_iter < 0:
        raise ValueError("max_iter must be nonnegative")

    norm_t = frobenius_norm(tensor)
    current = hosvd(tensor, ranks)
    history = [_tucker_error(norm_t, tensor, current)]
    for sweep in range(max_iter):
        factors = list(current.factors)
        for k, r in enumerate(ranks):
            projected = multi_mode_dot(tensor, factors, transpose=True, skip=k)
            factors[k] = truncated_svd(unfold(projected, k), r)[0]
        core = multi_mode_dot(tensor, factors, transpose=True)
        candidate = TuckerFactors(core, factors)
        err = _tucker_error(norm_t, tensor, candidate)
        if not np.isfinite(err):
            raise ConvergenceError("HOOI produced a non-finite fit", sweep + 1)
        if err > history[-1]:
            logger.debug("HOOI sweep %d raised the error; keeping previous factors", sweep + 1)
            break
        current = candidate
        change = history[-1] - err
        history.append(err)
        if change < tol or err == 0.0:
            break
    return current, history


def _expand_tt_ranks(shape, ranks):
    n = len(shape)
    ranks = [int(r) for r in ranks]
    if len(ranks) == n + 1:
        if ranks[0] != 1 or ranks[-1] != 1:
            raise RankError("boundary ranks R_0 and R_N must be 1")
        ranks = ranks[1:-1]
    if len(ranks) != n - 1:
        raise RankError(f"expected {n - 1} interior ranks (or {n + 1} with boundaries), got {len(ranks)}")
    if any(r < 1 for r in ranks):
        raise RankError(f"TT-ranks must be >= 1, got {ranks}")
    chain = [1] + ranks + [1]
    bounds = tt_rank_bounds(shape)
    clamped = [min(r, b) for r, b in zip(chain, bounds)]
    if clamped != chain:
        warnings.warn(f"TT-ranks {chain} clamped to attainable bounds {clamped}", stacklevel=3)
    return clamped


def tt_svd(tensor, ranks):
    """Tensor-train decomposition by sequential truncated SVDs.

    `ranks` lists the interior ranks ``(R_1, ..., R_{N-1})`` or the whole chain
    including the boundary ones. Ranks above the attainable bound are clamped
    with a warning.
    """
    tensor = as_tensor(tensor)
    shape = tensor.shape
    chain = _expand_tt_ranks(shape, ranks)
    cores = []
    rest = tensor
    for k in range(len(shape) - 1):
        mat = rest.reshape(chain[k] * shape[k], -1)
        r = min(chain[k + 1], *mat.shape)
        u, _, _ = truncated_svd(mat, r)
        cores.append(u.reshape(chain[k], shape[k], r))
        chain[k + 1] = r
        # U^T M equals S V^T but avoids dividing by small singular values
        rest = u.T @ mat
    cores.append(rest.reshape(chain[-2], shape[-1], 1))
    return MPSCores(cores)


def _chain_step(left, core):
    """Contract the trailing rank axis of `left` (P, R) with core (R, I, R').

    Terms are accumulated one rank index at a time, in increasing order, with
    element-wise products only, so any slice of the output is bit-identical
    to the same computation on the matching slice of `left`.
    """
    out = left[:, 0, None, None] * core[None, 0]
    for r in range(1, core.shape[0]):
        out = out + left[:, r, None, None] * core[None, r]
    return out.reshape(left.shape[0], -1, core.shape[2])


def mps_reconstruct(mps):
    """Full tensor from an MPS, contracting cores strictly left to right."""
    left = np.ones((1, 1))
    for core in mps.cores:
        out = _chain_step(left, core)
        left = out.reshape(-1, core.shape[2])
    return left.reshape(mps.shape)


def mps_element(mps, index):
    """Single entry as the product of core slices ``G_0[i_0] G_1[i_1] ... G_{N-1}[i_{N-1}]``."""
    index = tuple(int(i) for i in index)
    if len(index) != len(mps.cores):
        raise ShapeError(f"index of length {len(index)} for an order-{len(mps.cores)} MPS")
    row = np.ones((1, 1))
    for core, i in zip(mps.cores, index):
        if not 0 <= i < core.shape[1]:
            raise IndexError(f"index {i} out of range for extent {core.shape[1]}")
        row = _chain_step(row, core[:, i:i + 1, :]).reshape(1, -1)
    return float(row[0, 0])


def save_bundle(directory, decomposition, relative_err=None, iterations=0):
    """Write a Tucker or MPS decomposition as a directory of TNT1 files plus ``meta.json``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(decomposition, TuckerFactors):
        save_tensor(out / "core.tnt", decomposition.core)
        for k, f in enumerate(decomposition.factors):
            save_tensor(out / f"factors{k}.tnt", f)
        method, ranks, shape = "tucker", list(decomposition.ranks), list(decomposition.shape)
    elif isinstance(decomposition, MPSCores):
        for k, c in enumerate(decomposition.cores):
            save_tensor(out / f"core{k}.tnt", c)
        method, ranks, shape = "mps", list(decomposition.ranks), list(decomposition.shape)
    else:
        raise TypeError(f"cannot save {type(decomposition).__name__}")
    meta = {
        "method": method,
        "shape": shape,
        "ranks": ranks,
        "relative_error": relative_err,
        "iterations": int(iterations),
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return meta


def load_bundle(directory):
    """Inverse of :func:`save_bundle`; returns ``(decomposition, meta)``."""
    src = Path(directory)
    meta = json.loads((src / "meta.json").read_text())
    n = len(meta["shape"])
    if meta["method"] == "tucker":
        core = load_tensor(src / "core.tnt")
        factors = [load_tensor(src / f"factors{k}.tnt") for k in range(n)]
        return TuckerFactors(core, factors), meta
    if meta["method"] == "mps":
        return MPSCores([load_tensor(src / f"core{k}.tnt") for k in range(n)]), meta
    raise ShapeError(f"unknown decomposition method {meta['method']!r}")
