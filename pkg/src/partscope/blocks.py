"""Composite blocks: residual, inception and fire modules."""

import numpy as np

from . import tensor as T
from .errors import ConfigError, GeometryError
from .layers import ConvSpec, Module, Pool


class ResidualSpec(Module):
    """psi(inner(x) + W_s x); the last inner layer should be linear, psi comes after the sum."""

    def __init__(self, inner_layers, projection=None, activation="relu"):
        if not inner_layers:
            raise ConfigError("residual block needs at least one inner layer")
        self.inner_layers = list(inner_layers)
        self.projection = projection
        self.activation = activation

    def children(self):
        return self.inner_layers + ([self.projection] if self.projection is not None else [])

    def named_children(self):
        out = [(f"inner.{i}", c) for i, c in enumerate(self.inner_layers)]
        if self.projection is not None:
            out.append(("projection", self.projection))
        return out

    def forward(self, x):
        z = x
        for layer in self.inner_layers:
            z = layer(z)
        skip = x if self.projection is None else self.projection(x)
        if skip.shape != z.shape:
            raise GeometryError(
                f"residual shapes differ ({z.shape} vs skip {skip.shape}); a projection is required")
        return T.activate(z + skip, self.activation)


def residual_block(x, spec):
    return spec(x)


class InceptionSpec(Module):
    """Parallel branches, concatenated along channels."""

    def __init__(self, branches):
        if len(branches) < 2:
            raise ConfigError("inception block needs at least two branches")
        self.branches = [list(b) for b in branches]

    def children(self):
        return [layer for b in self.branches for layer in b]

    def named_children(self):
        return [(f"branch{i}.{j}", layer) for i, b in enumerate(self.branches) for j, layer in enumerate(b)]

    def param_layers(self):
        return [p for b in self.branches for layer in b for p in layer.param_layers()]

    @property
    def out_channels(self):
        total = 0
        for b in self.branches:
            convs = [layer for layer in b if isinstance(layer, ConvSpec)]
            if not convs:
                raise ConfigError("cannot infer channels of a pool-only branch")
            total += convs[-1].out_channels
        return total

    def forward(self, x):
        outs = []
        for b in self.branches:
            h = x
            for layer in b:
                h = layer(h)
            outs.append(h)
        spatial = {o.shape[:-1] for o in outs}
        if len(spatial) != 1:
            raise GeometryError(f"inception branch outputs disagree spatially: {[o.shape for o in outs]}")
        return T.concat(outs, axis=-1)


def inception_block(x, spec):
    return spec(x)


class FireSpec(Module):
    """1x1 squeeze, then parallel 1x1 and 3x3 expansions concatenated."""

    def __init__(self, in_channels, squeeze_channels, expand1x1_channels, expand3x3_channels,
                 activation="relu", rng=None, dtype=np.float32):
        if min(in_channels, squeeze_channels, expand1x1_channels, expand3x3_channels) < 1:
            raise ConfigError("fire module channel counts must be positive")
        if squeeze_channels >= expand1x1_channels + expand3x3_channels:
            raise ConfigError("squeeze width must be below the total expansion width")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.squeeze = ConvSpec(1, 1, "valid", in_channels, squeeze_channels, activation=activation, rng=rng, dtype=dtype)
        self.expand1x1 = ConvSpec(1, 1, "valid", squeeze_channels, expand1x1_channels, activation=activation, rng=rng, dtype=dtype)
        self.expand3x3 = ConvSpec(3, 1, "same", squeeze_channels, expand3x3_channels, activation=activation, rng=rng, dtype=dtype)

    @property
    def out_channels(self):
        return self.expand1x1.out_channels + self.expand3x3.out_channels

    def children(self):
        return [self.squeeze, self.expand1x1, self.expand3x3]

    def named_children(self):
        return [("squeeze", self.squeeze), ("expand1x1", self.expand1x1), ("expand3x3", self.expand3x3)]

    def forward(self, x):
        s = self.squeeze(x)
        return T.concat([self.expand1x1(s), self.expand3x3(s)], axis=-1)


def fire_module(x, spec):
    return spec(x)


def inception_mini(in_channels, out_channels, rng=None, dtype=np.float32):
    """Four-branch block (1x1 | 1x1-3x3 | 1x1-5x5 | pool-1x1) splitting ``out_channels``."""
    rng = rng if rng is not None else np.random.default_rng(0)
    q = max(out_channels // 4, 1)
    widths = [out_channels - 3 * q, q, q, q]
    mid = max(in_channels // 2, 1)

    def conv(f, cin, cout):
        return ConvSpec(f, 1, "same", cin, cout, activation="relu", rng=rng, dtype=dtype)

    return InceptionSpec([
        [conv(1, in_channels, widths[0])],
        [conv(1, in_channels, mid), conv(3, mid, widths[1])],
        [conv(1, in_channels, mid), conv(5, mid, widths[2])],
        [Pool(3, 1, "max", "same"), conv(1, in_channels, widths[3])],
    ])
