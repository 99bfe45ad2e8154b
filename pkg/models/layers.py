"""
Parameter containers: a small Module base and the layers the branches are built from.
"""
from collections import OrderedDict
from typing import Dict, Iterator, List, Tuple

import numpy as np

from errors import ArtifactMismatchError
from models import functional
from models.sparse import SparseVoxelTensor, sparse_conv, sparse_transposed_conv
from models.tensor import DenseTensor, Parameter, add, get_dtype, matmul, relu, reshape


def he_normal(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(get_dtype())


class Module:
    """Registers Parameters, child Modules and numpy buffers by attribute name."""

    def __init__(self):
        object.__setattr__(self, '_parameters', OrderedDict())
        object.__setattr__(self, '_modules', OrderedDict())
        object.__setattr__(self, '_buffers', OrderedDict())
        object.__setattr__(self, 'training', True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._parameters[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    # -- traversal ----------------------------------------------------------
    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Parameter]]:
        for name, param in self._parameters.items():
            yield prefix + name, param
        for name, module in self._modules.items():
            yield from module.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = '') -> Iterator[Tuple[str, np.ndarray]]:
        for name, buf in self._buffers.items():
            yield prefix + name, buf
        for name, module in self._modules.items():
            yield from module.named_buffers(f"{prefix}{name}.")

    def modules(self) -> Iterator['Module']:
        yield self
        for module in self._modules.values():
            yield from module.modules()

    def train(self, mode: bool = True) -> 'Module':
        for module in self.modules():
            object.__setattr__(module, 'training', mode)
        return self

    def eval(self) -> 'Module':
        return self.train(False)

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.grad = None

    # -- state ----------------------------------------------------------------
    def state_dict(self) -> Dict[str, np.ndarray]:
        state = OrderedDict((name, p.values) for name, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ArtifactMismatchError(
                f"checkpoint does not match the model: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, target in own.items():
            value = np.asarray(state[name])
            if value.shape != target.shape:
                raise ArtifactMismatchError(
                    f"checkpoint tensor {name} has shape {value.shape}, model expects {target.shape}")
            target[...] = value.astype(target.dtype)


class BatchNorm(Module):
    """Batch norm over dense tensors or the feature rows of a sparse tensor."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = Parameter(np.ones(channels, dtype=get_dtype()))
        self.beta = Parameter(np.zeros(channels, dtype=get_dtype()))
        self.register_buffer('running_mean', np.zeros(channels, dtype=get_dtype()))
        self.register_buffer('running_var', np.ones(channels, dtype=get_dtype()))
        self.momentum, self.eps = momentum, eps

    def forward(self, x):
        if isinstance(x, SparseVoxelTensor):
            return x.replace_features(self.forward(x.features))
        return functional.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                                     training=self.training, momentum=self.momentum, eps=self.eps)


class SparseConv(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int,
                 rng: np.random.Generator, bias: bool = False):
        super().__init__()
        volume = kernel_size ** 3
        self.kernel_size, self.stride = kernel_size, stride
        self.weight = Parameter(he_normal(rng, (volume, in_channels, out_channels), volume * in_channels))
        self.bias = Parameter(np.zeros(out_channels, dtype=get_dtype())) if bias else None

    def forward(self, x: SparseVoxelTensor) -> SparseVoxelTensor:
        return sparse_conv(x, self.weight, self.kernel_size, self.stride, bias=self.bias)


class SparseTransposedConv(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int,
                 rng: np.random.Generator, bias: bool = True):
        super().__init__()
        volume = kernel_size ** 3
        self.kernel_size, self.stride = kernel_size, stride
        self.weight = Parameter(he_normal(rng, (volume, in_channels, out_channels), in_channels))
        self.bias = Parameter(np.zeros(out_channels, dtype=get_dtype())) if bias else None

    def forward(self, x: SparseVoxelTensor, target: SparseVoxelTensor) -> SparseVoxelTensor:
        return sparse_transposed_conv(x, self.weight, self.kernel_size, self.stride, target, bias=self.bias)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int,
                 padding: int, rng: np.random.Generator, bias: bool = False):
        super().__init__()
        self.stride, self.padding = stride, padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(he_normal(rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in))
        self.bias = Parameter(np.zeros(out_channels, dtype=get_dtype())) if bias else None

    def forward(self, x: DenseTensor) -> DenseTensor:
        out = functional.conv2d(x, self.weight, self.stride, self.padding)
        if self.bias is not None:
            out = add(out, reshape(self.bias, (-1, 1, 1)))
        return out


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.weight = Parameter(he_normal(rng, (in_features, out_features), in_features))
        self.bias = Parameter(np.zeros(out_features, dtype=get_dtype())) if bias else None

    def forward(self, x: DenseTensor) -> DenseTensor:
        out = matmul(x, self.weight)
        return add(out, self.bias) if self.bias is not None else out


class ConvBlock(Module):
    """Sparse conv followed by batch norm, optionally ReLU."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, stride: int,
                 rng: np.random.Generator, activation: bool = True):
        super().__init__()
        self.conv = SparseConv(in_channels, out_channels, kernel_size, stride, rng)
        self.norm = BatchNorm(out_channels)
        self.activation = activation

    def forward(self, x: SparseVoxelTensor) -> SparseVoxelTensor:
        x = self.norm(self.conv(x))
        return x.replace_features(relu(x.features)) if self.activation else x
