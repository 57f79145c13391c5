"""Sparse convolution engine with hierarchical encoder-decoder blocks."""

from .blocks import (ConvNorm, DedBlockSpec, EncDecWeights, ResidualWeights,
                     SedBlockSpec, ded_block_forward, dr_block_forward,
                     rsr_block_forward, sed_block_forward, ssr_block_forward)
from .core import (CoordIndex, KernelSpec, Rulebook, SparseTensor,
                   build_coord_index, build_downsample_rulebook,
                   build_submanifold_rulebook, dense_to_sparse,
                   sparse_to_dense, sparsity, transpose_rulebook)
from .errors import (ConfigError, CoordinateOverflow, DuplicateCoordinate,
                     FormatError, HednetError, InvalidKernel, ProbeError,
                     ShapeError, TopologyError)
from .network import (NetworkConfig, StagePlan, VoxelGridSpec, bev_compress,
                      hednet2d_forward, hednet_forward, init_weights,
                      voxelize_dynamic)
from .ops import (ConvSavedContext, ConvWeights, NormParams, apply_rulebook,
                  conv_backward, inv_conv_forward, norm_relu_backward,
                  norm_relu_forward, rs_conv_forward, ss_conv_forward)

__version__ = "0.1.0"
