"""Gradients through the Tucker parametrization and a small deterministic trainer.

The trainer builds a stacked-hourglass network whose convolution kernels are
all slices of one Tucker-form weight tensor, runs it with the factorized
three-step convolution and backpropagates by hand. Gradients with respect to
the full weight tensor are accumulated layer by layer and then projected onto
the core and factor matrices.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .decomp import TuckerFactors, hosvd, tucker_reconstruct
from .net import (
    ArchConfig, Pathway, _pointwise, conv2d_backward, conv2d_reference, factorized_conv2d,
    factorized_kernel, partial_core_contract, weight_tensor_shape,
)
from .tensor_core import ShapeError, multi_mode_dot, unfold

logger = logging.getLogger(__name__)

__all__ = [
    "TuckerGradients", "DivergenceError", "OptimizerState", "ToyTask", "TrainResult",
    "project_gradients", "finite_difference_check", "rmsprop_step",
    "make_toy_task", "init_params", "network_loss", "train_toy", "tucker_from_params",
]

BN_EPS = 1e-5


class DivergenceError(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step


@dataclass
class TuckerGradients:
    d_core: np.ndarray
    d_factors: list


def project_gradients(tucker, d_weights):
    """Chain rule from ``dL/dW`` to the core and factors of ``W = G x_0 U0 ... x_N UN``.

    ``dG = dW x_0 U0^T ... x_N UN^T`` and
    ``dU_k = unfold(dW, k) @ unfold(G x_{j != k} U_j, k)^T``.
    """
    d_weights = np.asarray(d_weights, dtype=np.float64)
    if d_weights.shape != tucker.shape:
        raise ShapeError(f"gradient of shape {d_weights.shape} for weights of shape {tucker.shape}")
    d_core = multi_mode_dot(d_weights, tucker.factors, transpose=True)
    d_factors = []
    for k in range(len(tucker.factors)):
        partial = multi_mode_dot(tucker.core, tucker.factors, skip=k)
        d_factors.append(unfold(d_weights, k) @ unfold(partial, k).T)
    return TuckerGradients(d_core, d_factors)


def _param_arrays(tucker):
    return [tucker.core] + list(tucker.factors)


def _grad_arrays(grads):
    return [grads.d_core] + list(grads.d_factors)


def finite_difference_check(loss, grad, tucker, step=1e-5, max_full=10_000, n_samples=200, seed=0):
    """Largest gap between analytic and central-difference gradients.

    Every core and factor entry is probed when there are at most `max_full`
    of them, otherwise a seeded random subset of `n_samples` entries. The
    gap is scaled by the largest gradient magnitude seen on either side and is
    0 when both gradients vanish.

    Parameters
    ----------
    loss : callable
        ``loss(tucker) -> float``.
    grad : callable
        ``grad(tucker) -> TuckerGradients``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    analytic = _grad_arrays(grad(tucker))
    probe = tucker.copy()
    arrays = _param_arrays(probe)
    sizes = [a.size for a in arrays]
    total = sum(sizes)
    if total <= max_full:
        flat = np.arange(total)
    else:
        flat = np.sort(np.random.default_rng(seed).choice(total, size=n_samples, replace=False))
    offsets = np.cumsum([0] + sizes)

    num, ana = [], []
    for idx in flat:
        which = int(np.searchsorted(offsets, idx, side="right") - 1)
        local = int(idx - offsets[which])
        target = arrays[which].reshape(-1)
        original = target[local]
        target[local] = original + step
        plus = loss(probe)
        target[local] = original - step
        minus = loss(probe)
        target[local] = original
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise FloatingPointError(f"non-finite loss while probing parameter {idx}")
        num.append((plus - minus) / (2.0 * step))
        ana.append(analytic[which].reshape(-1)[local])
    num = np.array(num)
    ana = np.array(ana)
    scale = max(np.max(np.abs(num)), np.max(np.abs(ana)))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(num - ana)) / scale)


@dataclass
class OptimizerState:
    lr: float = 2.5e-4
    decay: float = 0.99
    eps: float = 1e-8
    accumulators: dict = field(default_factory=dict)


def rmsprop_step(state, params, grads):
    """One RMSprop update; accumulators in `state` are updated in place.

    ``acc <- decay * acc + (1 - decay) * g**2`` then
    ``p <- p - lr * g / (sqrt(acc) + eps)``.
    """
    updated = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = p
            continue
        if np.shape(g) != np.shape(p):
            raise ShapeError(f"gradient for {name!r} has shape {np.shape(g)}, parameter {np.shape(p)}")
        acc = state.accumulators.get(name)
        if acc is None:
            acc = np.zeros_like(p, dtype=np.float64)
        acc = state.decay * acc + (1.0 - state.decay) * np.square(g)
        state.accumulators[name] = acc
        updated[name] = p - state.lr * g / (np.sqrt(acc) + state.eps)
    return updated


@dataclass
class ToyTask:
    """Synthetic heatmap regression: each keypoint appears as a sharp blob in its own input channel."""

    seed: int
    inputs: np.ndarray
    targets: np.ndarray
    sigma: float = 1.5

    @property
    def n_keypoints(self):
        return self.targets.shape[1]

    @property
    def in_channels(self):
        return self.inputs.shape[1]


def _gaussian(size, cy, cx, sigma):
    yy, xx = np.mgrid[0:size, 0:size]
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))


def make_toy_task(seed, n_samples=8, size=16, n_keypoints=2, sigma=1.5,
                  input_sigma=1.0, noise=0.05):
    rng = np.random.default_rng(seed)
    in_channels = n_keypoints + 1
    inputs = np.zeros((n_samples, in_channels, size, size))
    targets = np.zeros((n_samples, n_keypoints, size, size))
    for n in range(n_samples):
        for k in range(n_keypoints):
            cy, cx = rng.uniform(2.0, size - 3.0, size=2)
            inputs[n, k] = _gaussian(size, cy, cx, input_sigma)
            targets[n, k] = _gaussian(size, cy, cx, sigma)
    inputs += noise * rng.standard_normal(inputs.shape)
    return ToyTask(seed=seed, inputs=inputs, targets=targets, sigma=sigma)


def tucker_from_params(params):
    n = sum(1 for name in params if name.startswith("factor"))
    return TuckerFactors(params["core"], [params[f"factor{k}"] for k in range(n)])


def _check_toy_arch(arch):
    if arch.hg_subnet != len(Pathway):
        raise ValueError(f"the toy hourglass needs hg_subnet={len(Pathway)}, got {arch.hg_subnet}")
    if arch.f_in != arch.f_out:
        raise ValueError("residual blocks need f_in == f_out")
    if arch.kernel_h != arch.kernel_w or arch.kernel_h % 2 == 0:
        raise ValueError("the toy hourglass needs square, odd-sized kernels")


def init_params(arch, ranks, in_channels, n_keypoints, seed):
    """He-initialised dense weights, compressed with HOSVD at `ranks`, plus untensorized layers."""
    _check_toy_arch(arch)
    rng = np.random.default_rng(seed)
    shape = weight_tensor_shape(arch)
    fan_in = arch.f_in * arch.kernel_h * arch.kernel_w
    dense = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    tucker = hosvd(dense, ranks)
    f = arch.f_out
    params = {"core": tucker.core}
    for k, u in enumerate(tucker.factors):
        params[f"factor{k}"] = u
    layers = shape[:4]
    params.update(
        stem_w=rng.standard_normal((f, in_channels)) * np.sqrt(1.0 / in_channels),
        stem_b=np.zeros(f),
        bn_gamma=np.ones(layers + (f,)),
        bn_beta=np.zeros(layers + (f,)),
        head_w=np.zeros((arch.n_hg, n_keypoints, f)),
        head_b=np.zeros((arch.n_hg, n_keypoints)),
    )
    return params


class _Network:
    """One forward/backward pass of the toy stacked hourglass.

    With ``dense=None`` kernels come from the Tucker factors in `params` and
    the forward pass uses the factorized convolution; otherwise every kernel is
    sliced from the dense tensor `dense` and convolved directly.
    """

    def __init__(self, arch, params, dense=None):
        self.arch = arch
        self.params = params
        self.pad = arch.kernel_h // 2
        self.grads = {name: np.zeros_like(np.asarray(v, dtype=np.float64))
                      for name, v in params.items()}
        self.d_weights = np.zeros(weight_tensor_shape(arch))
        self.layers = {}
        if dense is None:
            tucker = tucker_from_params(params)
            for idx in np.ndindex(*weight_tensor_shape(arch)[:4]):
                fc = partial_core_contract(tucker, *idx)
                self.layers[idx] = (fc, factorized_kernel(fc))
        else:
            for idx in np.ndindex(*weight_tensor_shape(arch)[:4]):
                self.layers[idx] = (None, dense[idx])

    def conv(self, x, idx):
        fc, kernel = self.layers[idx]
        if fc is not None:
            y = factorized_conv2d(x, fc, pad=self.pad)
        else:
            y = conv2d_reference(x, kernel, pad=self.pad)

        def back(dy):
            dx, dk = conv2d_backward(x, kernel, dy, pad=self.pad)
            self.d_weights[idx] += dk
            return dx
        return y, back

    def batchnorm(self, x, idx):
        gamma = self.params["bn_gamma"][idx][None, :, None, None]
        beta = self.params["bn_beta"][idx][None, :, None, None]
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        centered = x - mean
        var = np.mean(centered ** 2, axis=(0, 2, 3), keepdims=True)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        xhat = centered * inv_std
        m = x.shape[0] * x.shape[2] * x.shape[3]

        def back(dy):
            self.grads["bn_gamma"][idx] += np.sum(dy * xhat, axis=(0, 2, 3))
            self.grads["bn_beta"][idx] += np.sum(dy, axis=(0, 2, 3))
            dxhat = dy * gamma
            return inv_std / m * (
                m * dxhat
                - np.sum(dxhat, axis=(0, 2, 3), keepdims=True)
                - xhat * np.sum(dxhat * xhat, axis=(0, 2, 3), keepdims=True))
        return gamma * xhat + beta, back

    def block(self, x, stack, level, pathway):
        backs = []
        h = x
        for j in range(self.arch.b_depth):
            idx = (stack, level, int(pathway), j)
            h, b_conv = self.conv(h, idx)
            h, b_bn = self.batchnorm(h, idx)
            mask = h > 0
            h = h * mask
            backs.append((b_conv, b_bn, mask))

        def back(dy):
            dh = dy
            for b_conv, b_bn, mask in reversed(backs):
                dh = b_conv(b_bn(dh * mask))
            return dy + dh
        return x + h, back

    def hourglass(self, x, stack, level):
        up, b_skip = self.block(x, stack, level, Pathway.SKIP)
        n, c, hh, ww = x.shape
        low = x.reshape(n, c, hh // 2, 2, ww // 2, 2).mean(axis=(3, 5))
        low, b_enc = self.block(low, stack, level, Pathway.ENCODER)
        b_inner = None
        if level + 1 < self.arch.hg_depth:
            low, b_inner = self.hourglass(low, stack, level + 1)
        low, b_dec = self.block(low, stack, level, Pathway.DECODER)
        out = up + low.repeat(2, axis=2).repeat(2, axis=3)

        def back(dy):
            d_low = dy.reshape(n, c, hh // 2, 2, ww // 2, 2).sum(axis=(3, 5))
            d_low = b_dec(d_low)
            if b_inner is not None:
                d_low = b_inner(d_low)
            d_low = b_enc(d_low)
            dx = d_low[:, :, :, None, :, None].repeat(2, axis=3).repeat(2, axis=5) / 4.0
            return dx.reshape(n, c, hh, ww) + b_skip(dy)
        return out, back

    def loss(self, inputs, targets, need_grad=True):
        p = self.params
        x = _pointwise(inputs, p["stem_w"]) + p["stem_b"][None, :, None, None]
        stacks = []
        total = 0.0
        for s in range(self.arch.n_hg):
            h, b_hg = self.hourglass(x, s, 0)
            pred = _pointwise(h, p["head_w"][s]) + p["head_b"][s][None, :, None, None]
            diff = pred - targets
            total += np.mean(diff ** 2)
            stacks.append((x, h, b_hg, diff))
            x = x + h
        value = float(total / self.arch.n_hg)
        if not need_grad:
            return value

        scale = 2.0 / (self.arch.n_hg * targets.size)
        dx = np.zeros_like(x)
        for s in reversed(range(self.arch.n_hg)):
            x_in, h, b_hg, diff = stacks[s]
            d_pred = scale * diff
            self.grads["head_w"][s] += np.einsum("nkhw,nfhw->kf", d_pred, h)
            self.grads["head_b"][s] += d_pred.sum(axis=(0, 2, 3))
            dh = dx + _pointwise(d_pred, p["head_w"][s].T)
            dx = dx + b_hg(dh)
        self.grads["stem_w"] += np.einsum("nfhw,nchw->fc", dx, inputs)
        self.grads["stem_b"] += dx.sum(axis=(0, 2, 3))
        return value


def network_loss(arch, params, task, dense=None, need_grad=True):
    """Mean heatmap MSE over the stacks, and optionally its gradients.

    Returns ``loss`` or ``(loss, grads, d_weights)`` where `grads` maps every
    entry of `params` to its gradient (Tucker entries via
    :func:`project_gradients`) and `d_weights` is ``dL/dW`` for the full
    weight tensor.
    """
    net = _Network(arch, params, dense=dense)
    value = net.loss(task.inputs, task.targets, need_grad=need_grad)
    if not need_grad:
        return value
    grads = net.grads
    if dense is None:
        projected = project_gradients(tucker_from_params(params), net.d_weights)
        grads["core"] = projected.d_core
        for k, g in enumerate(projected.d_factors):
            grads[f"factor{k}"] = g
    return value, grads, net.d_weights


@dataclass
class TrainResult:
    losses: list
    params: dict

    @property
    def tucker(self):
        return tucker_from_params(self.params)


def train_toy(arch, ranks, task, steps, opt=None, seed=None, callback=None):
    """Full-batch RMSprop on the toy hourglass.

    Returns a :class:`TrainResult` whose ``losses`` has ``steps + 1`` entries:
    the loss before each update and after the last one. `seed` controls the
    weight initialisation and defaults to the task seed. `callback`, if
    given, is called as ``callback(step, params, loss)`` before each update.
    """
    if not isinstance(arch, ArchConfig):
        arch = ArchConfig.from_shape(arch)
    _check_toy_arch(arch)
    size = task.inputs.shape[-1]
    if size % (2 ** arch.hg_depth):
        raise ValueError(f"input size {size} must be divisible by 2**hg_depth")
    opt = OptimizerState() if opt is None else opt
    seed = task.seed if seed is None else seed
    params = init_params(arch, ranks, task.in_channels, task.n_keypoints, seed)
    losses = []
    for step in range(steps + 1):
        # overflow shows up as a non-finite loss, reported below
        with np.errstate(over="ignore", invalid="ignore"):
            if step == steps:
                value = network_loss(arch, params, task, need_grad=False)
            else:
                value, grads, _ = network_loss(arch, params, task)
        if not np.isfinite(value):
            raise DivergenceError(step, value)
        losses.append(value)
        if step == steps:
            break
        if callback is not None:
            callback(step, params, value)
        params = rmsprop_step(opt, params, grads)
        logger.debug("step %d loss %.6g", step, value)
    return TrainResult(losses, params)


def dense_equivalent(params):
    """Dense weight tensor equal to the Tucker weights in `params`."""
    return tucker_reconstruct(tucker_from_params(params))
