"""Layer building blocks: parameter store, conv, batchnorm, linear, losses."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .convolution import ConvSpec, conv2d
from .errors import DimensionError, NumericsError

# When enabled, every Module.__call__ verifies its output is finite; used to
# name the first offending layer after a non-finite loss is detected.
check_finite = False


class Parameter(Tensor):
    """Trainable tensor with a lazily allocated momentum buffer."""

    __slots__ = ("_momentum",)

    def __init__(self, data):
        super().__init__(np.asarray(data), requires_grad=True)
        self._momentum: np.ndarray | None = None

    @property
    def momentum(self) -> np.ndarray:
        if self._momentum is None:
            self._momentum = np.zeros_like(self.data)
        return self._momentum

    @momentum.setter
    def momentum(self, value: np.ndarray) -> None:
        self._momentum = value

    def ensure_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)


class ParamStore:
    """Ordered map of parameter name -> Parameter (value, grad, momentum)."""

    def __init__(self, named_params):
        self._params: dict[str, Parameter] = dict(named_params)

    def __len__(self):
        return len(self._params)

    def __iter__(self):
        return iter(self._params.values())

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self):
        return self._params.keys()

    def items(self):
        return self._params.items()

    def zero_grad(self) -> None:
        """Reset every gradient to zeros (unreached parameters stay zero)."""
        for p in self:
            p.grad = np.zeros_like(p.data)


class Module:
    """Minimal layer container with naming, modes, and parameter walking."""

    def __init__(self):
        self._modules: dict[str, Module] = {}
        self._params: dict[str, Parameter] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self.training = True
        self.path = ""

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self.__dict__.setdefault("_params", {})[name] = value
        elif isinstance(value, Module):
            self.__dict__.setdefault("_modules", {})[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        self._modules[name] = module
        object.__setattr__(self, name, module)

    def children(self):
        return self._modules.values()

    def modules(self):
        yield self
        for child in self._modules.values():
            yield from child.modules()

    def named_parameters(self, prefix: str = ""):
        for name, p in self._params.items():
            yield (f"{prefix}{name}", p)
        for mod_name, mod in self._modules.items():
            yield from mod.named_parameters(prefix=f"{prefix}{mod_name}.")

    def named_buffers(self, prefix: str = ""):
        for name in self._buffers:
            yield (f"{prefix}{name}", self._buffers[name])
        for mod_name, mod in self._modules.items():
            yield from mod.named_buffers(prefix=f"{prefix}{mod_name}.")

    def param_store(self) -> ParamStore:
        return ParamStore(self.named_parameters())

    def assign_paths(self, prefix: str = "") -> None:
        self.path = prefix
        for name, mod in self._modules.items():
            mod.assign_paths(f"{prefix}.{name}" if prefix else name)

    def train(self) -> None:
        for m in self.modules():
            m.training = True

    def eval(self) -> None:
        for m in self.modules():
            m.training = False

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        out = self.forward(*args, **kwargs)
        if check_finite and isinstance(out, Tensor) and not np.isfinite(out.data).all():
            raise NumericsError(f"non-finite output in {self.path or type(self).__name__}")
        return out


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Conv2d(Module):
    """Bias-free convolution layer owning one ConvSpec (weight is aliased)."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1,
                 padding=0, dilation=1, groups=1, *,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        fan_in = (in_channels // groups) * kernel_size * kernel_size
        self.weight = Parameter(kaiming_normal(
            rng, (out_channels, in_channels // groups, kernel_size, kernel_size),
            fan_in, dtype))
        self.spec = ConvSpec(
            out_channels=out_channels,
            in_channels=in_channels,
            kernel_h=kernel_size,
            kernel_w=kernel_size,
            stride=stride,
            padding=padding,
            dilation=dilation,
            groups=groups,
            weight=self.weight.data,
        )
        # Actual input extents this layer sees in the network; set by builders
        # so spectral handles know the matrix view to measure.
        self.in_hw: tuple[int, int] | None = None

    def forward(self, x: Tensor) -> Tensor:
        s = self.spec
        return conv2d(x, self.weight, stride=s.stride, padding=s.padding,
                      dilation=s.dilation, groups=s.groups)


class BatchNorm2d(Module):
    """Per-channel batch normalization with running statistics."""

    def __init__(self, channels, eps=1e-5, momentum=0.1, affine=True, *,
                 dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.affine = affine
        if affine:
            self.gamma = Parameter(np.ones(channels, dtype=dtype))
            self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        if x.data.ndim != 4 or x.data.shape[1] != self.channels:
            raise DimensionError(
                f"batchnorm over {self.channels} channels got shape {x.data.shape}"
            )
        if self.training:
            mu = ad.mean(x, axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = ad.mean(centered * centered, axis=(0, 2, 3), keepdims=True)
            # Track stats outside the graph.
            m = self.momentum
            self.running_mean *= 1.0 - m
            self.running_mean += m * mu.data.reshape(-1)
            self.running_var *= 1.0 - m
            self.running_var += m * var.data.reshape(-1)
        else:
            shape = (1, self.channels, 1, 1)
            mu = Tensor(self.running_mean.reshape(shape))
            var = Tensor(self.running_var.reshape(shape))
            centered = x - mu
        inv_std = (var + self.eps) ** -0.5
        xhat = centered * inv_std
        if not self.affine:
            return xhat
        shape = (1, self.channels, 1, 1)
        return xhat * ad.reshape(self.gamma, shape) + ad.reshape(self.beta, shape)


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return ad.relu(x)


class Linear(Module):
    """Fully connected layer; weight stored (in, out) to avoid a transpose."""

    def __init__(self, in_features, out_features, *, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        scale = 1.0 / np.sqrt(in_features)
        self.weight = Parameter(
            (rng.standard_normal((in_features, out_features)) * scale).astype(dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight) + self.bias


def global_avg_pool(x: Tensor) -> Tensor:
    """NCHW -> (N, C) spatial mean."""
    return ad.mean(x, axis=(2, 3))


def log_softmax(logits: Tensor) -> Tensor:
    # Subtracting the detached row max is exact for the gradient and keeps
    # exp() in range.
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits - Tensor(m)
    lse = ad.log(ad.sum_(ad.exp(shifted), axis=1, keepdims=True))
    return shifted - lse


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax logits."""
    logp = log_softmax(logits)
    picked = ad.take_per_row(logp, labels)
    return ad.mean(picked) * -1.0
