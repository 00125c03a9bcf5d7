"""Dense tensor primitives: unfolding, mode-n products, norms and truncated SVD.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order. Matrices are 2-D arrays.
"""
import struct
from pathlib import Path

import numpy as np

__all__ = [
    "TensorError", "ModeError", "ShapeError", "RankError", "ConvergenceError",
    "as_tensor", "unfold", "fold", "mode_n_product", "multi_mode_dot",
    "frobenius_norm", "truncated_svd", "jacobi_eigh",
    "save_tensor", "load_tensor",
]

MAGIC = b"TNT1"


class TensorError(ValueError):
    pass


class ModeError(TensorError):
    pass


class ShapeError(TensorError):
    pass


class RankError(TensorError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message, iterations):
        super().__init__(f"{message} (after {iterations} iterations)")
        self.iterations = iterations


def as_tensor(x, name="tensor"):
    """Return `x` as a C-contiguous float64 array, rejecting empty or non-finite data."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim == 0:
        raise ShapeError(f"{name} must have order >= 1")
    if arr.size == 0:
        raise ShapeError(f"{name} has a zero extent: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise TensorError(f"{name} contains NaN or Inf")
    return arr


def _check_mode(ndim, n):
    if not 0 <= n < ndim:
        raise ModeError(f"mode {n} out of range for a tensor of order {ndim}")


def unfold(tensor, mode):
    """Mode-`mode` unfolding.

    Element ``(i_0, ..., i_N)`` lands at row ``i_mode`` and column
    ``sum_{k != mode} i_k * prod_{m > k, m != mode} I_m``, i.e. the remaining
    modes keep their order with the last index varying fastest.
    """
    tensor = np.asarray(tensor, dtype=np.float64)
    _check_mode(tensor.ndim, mode)
    return np.ascontiguousarray(
        np.moveaxis(tensor, mode, 0).reshape(tensor.shape[mode], -1))


def fold(matrix, mode, shape):
    """Inverse of :func:`unfold`."""
    matrix = np.asarray(matrix, dtype=np.float64)
    shape = tuple(int(s) for s in shape)
    _check_mode(len(shape), mode)
    rest = shape[:mode] + shape[mode + 1:]
    expected = (shape[mode], int(np.prod(rest, dtype=np.int64)))
    if matrix.shape != expected:
        raise ShapeError(
            f"cannot fold a {matrix.shape} matrix along mode {mode} into {shape}")
    full = matrix.reshape((shape[mode],) + rest)
    return np.ascontiguousarray(np.moveaxis(full, 0, mode))


def mode_n_product(tensor, matrix, mode):
    """Contract mode `mode` of `tensor` with the columns of `matrix`.

    The result satisfies ``unfold(result, mode) == matrix @ unfold(tensor, mode)``.
    """
    tensor = np.asarray(tensor, dtype=np.float64)
    matrix = np.asarray(matrix, dtype=np.float64)
    _check_mode(tensor.ndim, mode)
    if matrix.ndim != 2 or matrix.shape[1] != tensor.shape[mode]:
        raise ShapeError(
            f"matrix of shape {matrix.shape} cannot multiply mode {mode} "
            f"of extent {tensor.shape[mode]}")
    new_shape = list(tensor.shape)
    new_shape[mode] = matrix.shape[0]
    return fold(matrix @ unfold(tensor, mode), mode, new_shape)


def multi_mode_dot(tensor, matrices, modes=None, transpose=False, skip=None):
    """Apply :func:`mode_n_product` along several modes in increasing order.

    With ``transpose=True`` each matrix is transposed first, which projects
    onto the column space of orthonormal factors.
    """
    if modes is None:
        modes = range(len(matrices))
    out = tensor
    for mode, m in zip(modes, matrices):
        if skip is not None and mode == skip:
            continue
        out = mode_n_product(out, m.T if transpose else m, mode)
    return out


def frobenius_norm(tensor):
    return float(np.sqrt(np.sum(np.square(np.asarray(tensor, dtype=np.float64)))))


def _round_robin_pairs(n):
    """Disjoint (p, q) pair sets covering every pair of ``range(n)`` exactly once."""
    size = n + (n % 2)
    players = list(range(size))
    rounds = []
    for _ in range(size - 1):
        half = size // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        keep = (p < n) & (q < n)  # odd n: one player sits out each round
        rounds.append((p[keep], q[keep]))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def jacobi_eigh(a, max_sweeps=60):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, in round-robin order so
    the rotations of one round act on disjoint rows and are applied together.

    Returns
    -------
    w : (n,) eigenvalues, in decreasing order
    v : (n, n) orthonormal eigenvectors as columns
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"expected a square matrix, got {a.shape}")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return np.zeros(n), v
    rounds = _round_robin_pairs(n)

    eps = np.finfo(np.float64).eps
    # rounding in the two-sided update leaves residues near eps * ||A||
    floor = eps * scale
    sweeps = 0
    while True:
        rotated = False
        for p, q in rounds:
            apq = a[p, q]
            app = a[p, p]
            aqq = a[q, q]
            active = np.abs(apq) > np.maximum(eps * np.sqrt(np.abs(app * aqq)), floor)
            if not active.any():
                continue
            rotated = True
            tau = (aqq - app) / (2.0 * np.where(active, apq, 1.0))
            t = np.where(tau >= 0, 1.0, -1.0) / (np.abs(tau) + np.hypot(1.0, tau))
            t = np.where(active, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            # A <- J^T A J, V <- V J
            row_p = a[p, :].copy()
            row_q = a[q, :].copy()
            a[p, :] = c[:, None] * row_p - s[:, None] * row_q
            a[q, :] = s[:, None] * row_p + c[:, None] * row_q
            col_p = a[:, p].copy()
            col_q = a[:, q].copy()
            a[:, p] = col_p * c - col_q * s
            a[:, q] = col_p * s + col_q * c
            vp = v[:, p].copy()
            vq = v[:, q].copy()
            v[:, p] = vp * c - vq * s
            v[:, q] = vp * s + vq * c
        if not rotated:
            break
        sweeps += 1
        if sweeps >= max_sweeps:
            raise ConvergenceError("Jacobi eigensolver did not converge", sweeps)

    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return w[order], v[:, order]


def _fix_signs(u):
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return signs


def _complete_basis(q, r):
    """Extend orthonormal columns `q` (n x k) to `r` columns via Gram-Schmidt."""
    n, k = q.shape
    cols = [q[:, j] for j in range(k)]
    for e in range(n):
        if len(cols) >= r:
            break
        cand = np.zeros(n)
        cand[e] = 1.0
        for _ in range(2):
            for c in cols:
                cand -= (c @ cand) * c
        norm = np.linalg.norm(cand)
        if norm > 1e-8:
            cols.append(cand / norm)
    return np.stack(cols, axis=1) if cols else np.zeros((n, 0))


def truncated_svd(matrix, rank, max_sweeps=60):
    """Rank-`rank` SVD through the Gram matrix of the shorter side.

    Singular vectors are signed so their largest-magnitude entry is positive.
    When `rank` exceeds the numerical rank the missing vectors are completed
    to an orthonormal set and paired with zero singular values.

    Returns
    -------
    U : (rows, rank) orthonormal columns
    S : (rank,) nonincreasing singular values
    V : (cols, rank) right singular vectors
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    rows, cols = m.shape
    if not 1 <= rank <= min(rows, cols):
        raise RankError(f"rank {rank} outside [1, {min(rows, cols)}] for a {m.shape} matrix")

    wide = rows <= cols
    a = m if wide else m.T
    w, vecs = jacobi_eigh(a @ a.T, max_sweeps=max_sweeps)
    s = np.sqrt(np.clip(w[:rank], 0.0, None))
    left = vecs[:, :rank]
    # Gram eigenvalues carry absolute error ~eps * s_max**2
    cutoff = np.sqrt(max(a.shape) * np.finfo(np.float64).eps) * s[0]
    good = s > cutoff
    right = np.zeros((a.shape[1], rank))
    right[:, good] = (a.T @ left[:, good]) / s[good]
    s = np.where(good, s, 0.0)
    if not np.all(good):
        n_good = int(np.count_nonzero(good))
        right = _complete_basis(right[:, :n_good], rank)

    if wide:
        u, v = left, right
    else:
        u, v = right, left
    signs = _fix_signs(u)
    return u * signs, s, v * signs


def save_tensor(path, tensor):
    """Write `tensor` in the TNT1 binary format."""
    arr = as_tensor(tensor)
    if arr.ndim > 255:
        raise ShapeError("order exceeds 255")
    header = MAGIC + struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + arr.astype("<f8", copy=False).tobytes(order="C"))


def load_tensor(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ShapeError(f"{path}: not a TNT1 tensor file")
    order = raw[4]
    shape = struct.unpack_from(f"<{order}Q", raw, 5)
    offset = 5 + 8 * order
    count = int(np.prod(shape, dtype=np.int64))
    if len(raw) - offset != 8 * count:
        raise ShapeError(f"{path}: payload size does not match shape {shape}")
    data = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    return as_tensor(data.astype(np.float64).reshape(shape))
