"""Parameterised layers built on :mod:`resfri.ops`."""

import numpy as np

from . import ops
from .errors import ConfigError, ShapeError
from .tensor import DEFAULT_DTYPE, Tensor


class Module:
    """Minimal container: parameters, buffers, child modules, train/eval mode.

    Subclasses list their parameter and buffer attribute names in
    ``_params`` / ``_buffers``; children are discovered from instance
    attributes (modules or lists of modules) in assignment order, which fixes
    the parameter naming and ordering used by checkpoints and the optimizer.
    """

    _params = ()
    _buffers = ()
    training = True

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for attr in self._params:
            p = getattr(self, attr)
            if p is not None:
                yield prefix + attr, p
        for name, child in self.children():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for attr in self._buffers:
            yield prefix + attr, getattr(self, attr)
        for name, child in self.children():
            yield from child.named_buffers(f"{prefix}{name}.")

    def modules(self):
        yield self
        for _, child in self.children():
            yield from child.modules()

    def train(self, mode=True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, x):
        raise NotImplementedError


def kaiming_normal(rng, shape, fan_in, dtype):
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d(Module):
    _params = ("weight", "bias")

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=None,
                 bias=True, rng=None, dtype=DEFAULT_DTYPE):
        if min(in_channels, out_channels, kernel_size, stride) < 1:
            raise ConfigError(
                f"conv needs positive extents, got in={in_channels}, out={out_channels}, "
                f"k={kernel_size}, stride={stride}"
            )
        rng = np.random.default_rng() if rng is None else rng
        self.stride = stride
        # default "same" padding for odd kernels
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        self.weight = Tensor(kaiming_normal(rng, shape, fan_in, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None
        self.mask = None

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def kernel_size(self):
        return self.weight.shape[2]

    def output_hw(self, h, w):
        k = self.kernel_size
        return (ops.out_extent(h, k, self.stride, self.padding),
                ops.out_extent(w, k, self.stride, self.padding))

    def forward(self, x):
        mask = None if self.mask is None else self.mask.mask
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, mask=mask)

    def flops(self, h, w):
        ho, wo = self.output_hw(h, w)
        o, i, kh, kw = self.weight.shape
        return 2 * o * i * kh * kw * ho * wo


class BatchNorm2d(Module):
    _params = ("gamma", "beta")
    _buffers = ("running_mean", "running_var")

    def __init__(self, channels, eps=1e-5, momentum=0.1, dtype=DEFAULT_DTYPE):
        if channels < 1:
            raise ConfigError(f"batchnorm needs at least one channel, got {channels}")
        if not 0.0 < momentum < 1.0:
            raise ConfigError(f"batchnorm momentum must lie in (0, 1), got {momentum}")
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    @property
    def channels(self):
        return self.gamma.shape[0]

    def forward(self, x):
        return ops.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                               self.training, self.momentum, self.eps)


class Linear(Module):
    _params = ("weight", "bias")

    def __init__(self, in_features, out_features, bias=True, rng=None, dtype=DEFAULT_DTYPE):
        rng = np.random.default_rng() if rng is None else rng
        self.weight = Tensor(kaiming_normal(rng, (out_features, in_features), in_features, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)

    def flops(self):
        out_f, in_f = self.weight.shape
        return 2 * in_f * out_f


class ConvBNReLU(Module):
    """conv (no bias) -> batchnorm -> relu."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, rng=None,
                 dtype=DEFAULT_DTYPE):
        self.conv = Conv2d(in_channels, out_channels, kernel_size, stride=stride, bias=False,
                           rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_channels, dtype=dtype)

    @property
    def in_channels(self):
        return self.conv.in_channels

    @property
    def out_channels(self):
        return self.conv.out_channels

    def forward(self, x):
        if x.shape[1] != self.conv.in_channels:
            raise ShapeError(
                f"expected {self.conv.in_channels} input channels, got {x.shape[1]}"
            )
        return ops.relu(self.bn(self.conv(x)))

    def flops(self, h, w):
        ho, wo = self.conv.output_hw(h, w)
        # conv + one op per output element for BN and for ReLU
        return self.conv.flops(h, w) + 2 * self.out_channels * ho * wo, (ho, wo)
