"""
Model core: weight tensors, structured views, the CONV/FC network and checkpoints.
"""

from .errors import CompressionError
from .network import ARCHITECTURES, ConvNet, LayerSpec, build_model, compact, propagate_filter_pruning, pruning_rate
from .weights import WeightTensor, count_nonzero, count_nonzero_groups, structured_view, to_gemm, from_gemm

__all__ = [
    'ARCHITECTURES', 'CompressionError', 'ConvNet', 'LayerSpec', 'WeightTensor',
    'build_model', 'compact', 'count_nonzero', 'count_nonzero_groups', 'from_gemm',
    'propagate_filter_pruning', 'pruning_rate', 'structured_view', 'to_gemm',
]
