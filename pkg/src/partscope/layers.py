"""Parameterized layers and the small module protocol the model zoo builds on."""

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor

PADDING_MODES = ("valid", "same")


def init_weight(shape, fan_in, fan_out, activation, rng, dtype=np.float32):
    """He-uniform for rectifier layers, Glorot-uniform for everything else."""
    if activation in ("relu", "leaky_relu"):
        limit = np.sqrt(6.0 / fan_in)
    else:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Module:
    training = True

    def children(self):
        return []

    def own_parameters(self):
        return []

    def named_parameters(self, prefix=""):
        out = []
        for name, p in self.own_parameters():
            out.append((prefix + name, p))
        for cname, child in self.named_children():
            out.extend(child.named_parameters(f"{prefix}{cname}."))
        return out

    def named_children(self):
        return [(str(i), c) for i, c in enumerate(self.children())]

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_layers(self):
        """Leaf layers that own parameters, in forward order."""
        if self.own_parameters():
            return [self]
        out = []
        for c in self.children():
            out.extend(c.param_layers())
        return out

    def train(self, mode=True):
        self.training = mode
        for c in self.children():
            c.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self

    def __call__(self, x):
        return self.forward(x)


class ConvSpec(Module):
    """One convolutional layer: odd square filter, stride, valid/same padding, bias, activation."""

    def __init__(self, f, s, padding_mode, in_channels, out_channels, weights=None, bias=None,
                 activation="identity", rng=None, dtype=np.float32):
        if f < 1 or f % 2 == 0:
            raise ConfigError(f"filter size must be odd and positive, got {f}")
        if s < 1:
            raise ConfigError(f"stride must be positive, got {s}")
        if padding_mode not in PADDING_MODES:
            raise ConfigError(f"padding must be one of {PADDING_MODES}, got {padding_mode!r}")
        if activation not in T.ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        self.f, self.s, self.padding_mode = f, s, padding_mode
        self.in_channels, self.out_channels = in_channels, out_channels
        self.activation = activation
        shape = (f, f, in_channels, out_channels)
        if weights is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            weights = init_weight(shape, f * f * in_channels, f * f * out_channels, activation, rng, dtype)
        weights = np.asarray(weights, dtype=dtype)
        if weights.shape != shape:
            raise DimensionError(f"kernel shape {weights.shape} != {shape}")
        if bias is None:
            bias = np.zeros(out_channels, dtype=dtype)
        self.weight = Tensor(weights, requires_grad=True)
        self.bias = Tensor(np.asarray(bias, dtype=dtype).reshape(out_channels), requires_grad=True)

    @property
    def padding(self):
        return 0 if self.padding_mode == "valid" else T.same_padding(self.f)

    def own_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def output_hw(self, h, w):
        p = self.padding
        return (h + 2 * p - self.f) // self.s + 1, (w + 2 * p - self.f) // self.s + 1

    def forward(self, x):
        return conv2d(x, self)

    def __repr__(self):
        return (f"ConvSpec(f={self.f}, s={self.s}, {self.padding_mode}, "
                f"{self.in_channels}->{self.out_channels}, {self.activation})")


def conv2d(x, spec):
    """Convolutional layer: cross-correlation, broadcast bias, then activation."""
    z = T.conv2d_raw(x, spec.weight, spec.bias, spec.s, spec.padding)
    return T.activate(z, spec.activation)


class Dense(Module):
    def __init__(self, n_in, n_out, activation="identity", rng=None, dtype=np.float32):
        if activation not in T.ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out, self.activation = n_in, n_out, activation
        self.weight = Tensor(init_weight((n_out, n_in), n_in, n_out, activation, rng, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def own_parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x):
        return T.dense(x, self.weight, self.bias, self.activation)

    def __repr__(self):
        return f"Dense({self.n_in}->{self.n_out}, {self.activation})"


class Pool(Module):
    """Pooling layer; ``same`` padding (stride 1 only) replicates edge pixels."""

    def __init__(self, f, s, kind="max", padding_mode="valid"):
        if kind not in ("max", "avg"):
            raise ConfigError(f"unknown pooling kind {kind!r}")
        if padding_mode == "same" and (s != 1 or f % 2 == 0):
            raise ConfigError("same pooling needs stride 1 and an odd window")
        self.f, self.s, self.kind, self.padding_mode = f, s, kind, padding_mode

    def output_hw(self, h, w):
        if self.padding_mode == "same":
            return h, w
        return (h - self.f) // self.s + 1, (w - self.f) // self.s + 1

    def forward(self, x):
        if self.padding_mode == "same":
            x = pad_edge(x, (self.f - 1) // 2)
        return T.pool2d(x, self.f, self.s, self.kind)

    def __repr__(self):
        return f"Pool({self.kind}, f={self.f}, s={self.s}, {self.padding_mode})"


def pad_edge(x, p):
    if p == 0:
        return x
    h, w = x.shape[-3], x.shape[-2]
    ih = np.clip(np.arange(-p, h + p), 0, h - 1)
    iw = np.clip(np.arange(-p, w + p), 0, w - 1)
    lead = (slice(None),) * (x.ndim - 3)
    x = T.getitem(x, lead + (ih,))
    return T.getitem(x, lead + (slice(None), iw))


class GlobalPool(Module):
    def __init__(self, kind="max"):
        self.kind = kind

    def forward(self, x):
        return T.global_pool(x, self.kind)

    def __repr__(self):
        return f"GlobalPool({self.kind})"


class Flatten(Module):
    def forward(self, x):
        return T.reshape(x, (x.shape[0], -1))

    def __repr__(self):
        return "Flatten()"


class Dropout(Module):
    def __init__(self, rate, seed=0):
        self.rate = rate
        self.rng = np.random.default_rng(seed)

    def forward(self, x):
        return T.dropout(x, self.rate, self.rng, self.training)

    def __repr__(self):
        return f"Dropout({self.rate})"


class Sequential(Module):
    def __init__(self, layers):
        self.layers = list(layers)

    def children(self):
        return self.layers

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]
