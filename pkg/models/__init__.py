"""Numeric core and the place-recognition network."""
from models.tensor import (DenseTensor, Function, Parameter, backward, get_dtype, get_precision,
                           no_grad, precision, set_precision)
from models.sparse import SparseVoxelTensor, quantize, quantize_batch
from models.layers import Module
from models.network import Descriptors, ModelInput, PlaceRecognitionNet

__all__ = [
    'DenseTensor', 'Function', 'Parameter', 'backward', 'get_dtype', 'get_precision', 'no_grad',
    'precision', 'set_precision', 'SparseVoxelTensor', 'quantize', 'quantize_batch', 'Module',
    'Descriptors', 'ModelInput', 'PlaceRecognitionNet',
]
