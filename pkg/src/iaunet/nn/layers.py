import numpy as np

from . import functional as F
from .tensor import Parameter


class Module:
    """Minimal container: tracks parameters, buffers and child modules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = name
        object.__setattr__(self, name, array)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_children(self):
        return self._children.items()

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def assign_names(self):
        for name, p in self.named_parameters():
            p.name = name

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        """Cast parameters and buffers in place (gradients are reset)."""
        dtype = np.dtype(dtype)
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.zero_grad()
        self._cast_buffers(dtype)
        return self

    def _cast_buffers(self, dtype):
        for name in self._buffers:
            object.__setattr__(self, name, getattr(self, name).astype(dtype))
        for child in self._children.values():
            child._cast_buffers(dtype)

    @property
    def dtype(self):
        return self.parameters()[0].dtype

    def state_dict(self):
        """Flat name -> array mapping of parameters and buffers (live references)."""
        out = {name: p.data for name, p in self.named_parameters()}
        out.update(dict(self.named_buffers()))
        return out

    def load_arrays(self, arrays):
        """Overwrite parameters/buffers from ``arrays`` (name -> ndarray), copying."""
        for name, p in self.named_parameters():
            p.data = np.array(arrays[name], dtype=arrays[name].dtype, copy=True)
            p.zero_grad()
        self._load_buffers("", arrays)

    def _load_buffers(self, prefix, arrays):
        for name in self._buffers:
            object.__setattr__(self, name, np.array(arrays[prefix + name], copy=True))
        for cname, child in self._children.items():
            child._load_buffers(prefix + cname + ".", arrays)


def kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, bias=True, dtype=np.float32):
        super().__init__()
        self.padding = k // 2
        self.weight = Parameter(kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class ConvTranspose2x(Module):
    def __init__(self, cin, cout, rng, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(kaiming_uniform(rng, (cin, cout, 2, 2), cin * 4, dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype))

    def forward(self, x):
        return F.conv_transpose2d_2x(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, c, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(np.ones(c, dtype=dtype))
        self.bias = Parameter(np.zeros(c, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(c, dtype=dtype))
        self.register_buffer("running_var", np.ones(c, dtype=dtype))

    def forward(self, x):
        return F.batch_norm2d(x, self.weight, self.bias, self.running_mean,
                              self.running_var, self.training)


class Linear(Module):
    def __init__(self, din, dout, rng, dtype=np.float32):
        super().__init__()
        self.weight = Parameter(kaiming_uniform(rng, (dout, din), din, dtype))
        self.bias = Parameter(np.zeros(dout, dtype=dtype))

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class ConvBNReLU(Module):
    """3x3 conv (no bias, BN follows) -> batch norm -> ReLU."""

    def __init__(self, cin, cout, rng, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, rng, bias=False, dtype=dtype)
        self.bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class DoubleConv(Module):
    def __init__(self, cin, cout, rng, dtype=np.float32):
        super().__init__()
        self.conv1 = ConvBNReLU(cin, cout, rng, dtype)
        self.conv2 = ConvBNReLU(cout, cout, rng, dtype)

    def forward(self, x):
        return self.conv2(self.conv1(x))
