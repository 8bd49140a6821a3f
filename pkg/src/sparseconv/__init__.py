"""CPU sparse-convolution inference engine for voxelized 3D point clouds."""

from .core import (
    PrecisionMode,
    SparseTensor,
    WeightTensor,
    quantize_features,
    sparsify,
    to_dense,
    voxelize,
)
from .execution import (
    ExecOptions,
    LayerSpec,
    LayerStrategy,
    gather,
    inverse_conv_forward,
    partition_groups,
    pointwise_apply,
    scatter_accumulate,
    sparse_conv_forward,
)
from .mapping import (
    KernelMap,
    KernelOffsets,
    build_gather_scatter_plan,
    build_index,
    compute_output_coords,
    derive_symmetric_maps,
    enumerate_offsets,
    map_search,
)
from .network import Network, NetworkConfig, load_builtin_config
from .version import __version__

__all__ = [
    "ExecOptions",
    "KernelMap",
    "KernelOffsets",
    "LayerSpec",
    "LayerStrategy",
    "Network",
    "NetworkConfig",
    "PrecisionMode",
    "SparseTensor",
    "WeightTensor",
    "__version__",
    "build_gather_scatter_plan",
    "build_index",
    "compute_output_coords",
    "derive_symmetric_maps",
    "enumerate_offsets",
    "gather",
    "inverse_conv_forward",
    "load_builtin_config",
    "map_search",
    "partition_groups",
    "pointwise_apply",
    "quantize_features",
    "scatter_accumulate",
    "sparse_conv_forward",
    "sparsify",
    "to_dense",
    "voxelize",
]
