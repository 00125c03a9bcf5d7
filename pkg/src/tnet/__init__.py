"""Whole-network Tucker and tensor-train parametrization of a stacked hourglass network."""
from .analysis import (
    DEFAULT_OVERHEAD, compression_ratio, count_dense, count_layerwise, count_mps,
    count_trimmed, count_tucker, reproduce_tables,
)
from .decomp import (
    MPSCores, TuckerFactors, hooi, hosvd, mps_element, mps_reconstruct, relative_error,
    tt_svd, tucker_reconstruct,
)
from .grad import (
    OptimizerState, TuckerGradients, finite_difference_check, make_toy_task,
    project_gradients, rmsprop_step, train_toy,
)
from .net import (
    ArchConfig, FactorizedConv, TNetWeights, conv2d_reference, conv_flops,
    factorized_conv2d, partial_core_contract, slice_kernel, weight_tensor_shape,
)
from .tensor_core import (
    ConvergenceError, ModeError, RankError, ShapeError, fold, frobenius_norm, load_tensor,
    mode_n_product, save_tensor, truncated_svd, unfold,
)

__version__ = "0.1.0"
