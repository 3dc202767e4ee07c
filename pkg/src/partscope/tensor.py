"""Dense tensors with reverse-mode automatic differentiation.

Spatial tensors are NHWC (a single image may be passed as HWC). Graph
recording is eager: every op that touches a ``requires_grad`` input stores a
closure mapping the output gradient to its input gradients, and
``Tensor.backward`` replays them in reverse topological order.
"""

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .errors import ConfigError, ContractError, DimensionError, GeometryError, StateError

_GRAD_ENABLED = True

ACTIVATIONS = ("relu", "leaky_relu", "sigmoid", "softmax", "identity")
LEAKY_SLOPE = 0.1


@contextmanager
def no_grad():
    """Disable graph recording (inference, evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    # -- metadata ---------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return len(self.data)

    # -- autodiff ---------------------------------------------------------
    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf needing it."""
        if not self.requires_grad:
            raise StateError("backward() on a tensor with no recorded forward pass")
        if grad is None:
            if self.data.size != 1:
                raise ContractError("backward() without an explicit gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topo(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- operators --------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self)))

    def __rsub__(self, other):
        return add(_wrap(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, power(other, -1.0))
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    order.reverse()
    return order


def _wrap(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def add(a, b):
    a = _wrap(a)
    b = _wrap(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a = _wrap(a)
    if not isinstance(b, Tensor):
        c = b
        return _make(a.data * c, (a,), lambda g: (g * c,))
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def power(a, p):
    ad = a.data
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def matmul(a, b):
    ad, bd = a.data, b.data
    if ad.ndim != 2 or bd.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {ad.shape} @ {bd.shape}")
    if ad.shape[1] != bd.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def tsum(a, axis=None, keepdims=False):
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(tsum(a, axis, keepdims), 1.0 / n)


def reshape(a, shape):
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, idx):
    shape, dtype = a.shape, a.dtype

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), back)


def concat(tensors, axis=-1):
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, tensors, lambda g: tuple(np.split(g, cuts, axis=axis)))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(a):
    # comparisons written so NaN passes through instead of being zeroed
    neg = a.data <= 0
    return _make(np.where(neg, 0, a.data).astype(a.dtype, copy=False), (a,), lambda g: (np.where(neg, 0, g).astype(g.dtype, copy=False),))


def leaky_relu(a, slope=LEAKY_SLOPE):
    neg = a.data <= 0
    out = np.where(neg, a.data * a.dtype.type(slope), a.data)
    return _make(out, (a,), lambda g: (np.where(neg, g * g.dtype.type(slope), g),))


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _sigmoid_np(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), back)


def log_softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def back(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), back)


def activate(x, kind):
    if kind == "identity" or kind is None:
        return x
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x, axis=-1)
    raise ConfigError(f"unknown activation {kind!r}")


def dropout(a, rate, rng, training=True):
    if not training or rate <= 0:
        return a
    keep = (rng.random(a.shape) >= rate).astype(a.dtype) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# convolution, pooling, dense
# ---------------------------------------------------------------------------


def same_padding(f):
    return (f - 1) // 2


def _batched(x):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise DimensionError(f"expected (H, W, C) or (N, H, W, C), got shape {x.shape}")
    return x, False


def conv2d_raw(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of NHWC ``x`` with an (f, f, Cin, Cout) kernel, plus bias."""
    x, squeeze = _batched(x)
    f, f2, cin, cout = weight.shape
    if f != f2:
        raise DimensionError(f"kernel must be square, got {weight.shape}")
    n, h, w, c = x.shape
    if c != cin:
        raise DimensionError(f"input has {c} channels, kernel expects {cin}")
    if h + 2 * padding < f or w + 2 * padding < f:
        raise GeometryError(f"filter {f} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")
    s, p = stride, padding
    ho, wo = K.out_size(h, f, s, p), K.out_size(w, f, s, p)
    xd = x.data
    if p:
        xd = np.pad(xd, ((0, 0), (p, p), (p, p), (0, 0)))
    padded_shape = xd.shape
    wmat = weight.data.reshape(f * f * cin, cout)
    if f == 1 and s == 1:
        cols = xd.reshape(-1, cin)
    elif f == 1:
        cols = np.ascontiguousarray(xd[:, ::s, ::s, :][:, :ho, :wo]).reshape(-1, cin)
    else:
        cols = K.im2col(xd, f, s)
    out = cols @ wmat
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = g2 @ wmat.T
            if f == 1 and s == 1:
                gx = gcols.reshape(padded_shape)
            elif f == 1:
                gx = np.zeros(padded_shape, dtype=g.dtype)
                gx[:, : s * ho : s, : s * wo : s, :] = gcols.reshape(n, ho, wo, cin)
            else:
                gx = K.col2im(gcols, padded_shape, f, s)
            if p:
                gx = gx[:, p:-p, p:-p, :]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    y = _make(out, parents, back)
    if squeeze:
        y = reshape(y, y.shape[1:])
    return y


def pool2d(x, f, s, kind="max"):
    """Max or average pooling over f x f windows, no padding."""
    x, squeeze = _batched(x)
    n, h, w, c = x.shape
    if f > h or f > w:
        raise GeometryError(f"pool window {f} exceeds input {h}x{w}")
    if s < 1:
        raise GeometryError("stride must be positive")
    shape = x.shape
    if kind == "max":
        out, arg = K.maxpool(x.data, f, s)
        y = _make(out, (x,), lambda g: (K.maxpool_backward(g, arg, shape, f, s),))
    elif kind == "avg":
        out = K.avgpool(x.data, f, s)
        y = _make(out, (x,), lambda g: (K.avgpool_backward(g, shape, f, s),))
    else:
        raise ConfigError(f"unknown pooling kind {kind!r}")
    if squeeze:
        y = reshape(y, y.shape[1:])
    return y


def global_pool(x, kind="max"):
    """Collapse the spatial axes of an NHWC tensor to (N, C)."""
    n, h, w, c = x.shape
    flat = x.data.reshape(n, h * w, c)
    if kind == "avg":
        return mean(reshape(x, (n, h * w, c)), axis=1)
    arg = flat.argmax(axis=1)
    out = np.take_along_axis(flat, arg[:, None, :], axis=1)[:, 0, :]

    def back(g):
        full = np.zeros_like(flat)
        np.put_along_axis(full, arg[:, None, :], g[:, None, :], axis=1)
        return (full.reshape(x.shape),)

    return _make(out, (x,), back)


def dense(x, weight, bias=None, activation="identity"):
    """z = W a + b with W stored (n_out, n_in); accepts a vector or a (N, n_in) batch."""
    vec = x.ndim == 1
    if vec:
        x = reshape(x, (1, x.shape[0]))
    if weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"dense: input length {x.shape[-1]} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        gx = g @ wd if x.requires_grad else None
        gw = g.T @ xd if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    z = _make(out, parents, back)
    if vec:
        z = reshape(z, (z.shape[1],))
    return activate(z, activation)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


@dataclass
class LossConfig:
    kind: str = "weighted_cross_entropy"
    class_weights: object = None
    batch_size: int = 1
    coord_weight: float = 5.0
    obj_weight: float = 1.0
    cls_weight: float = 1.0
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("weighted_cross_entropy", "yolo_composite"):
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights, dtype=np.float64)
            if np.any(~np.isfinite(w)) or np.any(w <= 0):
                raise ConfigError("class weights must be positive")
            self.class_weights = w
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")


_PROB_FLOOR = 1e-12


def cross_entropy(probs, target, class_weights=None):
    """Mean over the batch of -sum_c w_c y_c log p_c for probability inputs."""
    p = probs.data
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=p.dtype)
    if p.shape != y.shape:
        raise DimensionError(f"pred {p.shape} vs target {y.shape}")
    squeeze = p.ndim == 1
    if squeeze:
        p, y = p[None], y[None]
    wy = y if class_weights is None else y * np.asarray(class_weights, dtype=p.dtype)
    m = p.shape[0]
    pc = np.maximum(p, _PROB_FLOOR)
    val = -(wy * np.log(pc)).sum() / m

    def back(g):
        gp = -g * wy / pc * (p > _PROB_FLOOR) / m
        return (gp[0] if squeeze else gp,)

    return _make(np.asarray(val, dtype=p.dtype), (probs,), back)


def softmax_cross_entropy(logits, target, class_weights=None):
    """Fused, numerically stable cross_entropy(softmax(logits), target)."""
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=logits.dtype)
    if class_weights is not None:
        y = y * np.asarray(class_weights, dtype=logits.dtype)
    ls = log_softmax(logits, axis=-1)
    m = 1 if logits.ndim == 1 else logits.shape[0]
    return mul(tsum(mul(ls, Tensor(y))), -1.0 / m)


def bce_with_logits(logits, target):
    """Elementwise binary cross-entropy on raw scores."""
    x = logits.data
    t = np.asarray(target, dtype=x.dtype)
    val = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    sig = _sigmoid_np(x)
    return _make(val, (logits,), lambda g: (g * (sig - t),))


def yolo_loss(raw, target, num_anchors, class_weights=None, coord_weight=5.0, obj_weight=1.0, cls_weight=1.0):
    """Composite detection loss averaged over the batch.

    ``raw`` is the (N, S, S, A*(5+C)) network output laid out per anchor as
    [t_x, t_y, t_w, t_h, t_o, class logits]. ``target`` is (N, S, S, A, 5+C)
    laid out as [cell_x, cell_y, log_w, log_h, obj, one-hot].
    """
    n, s1, s2, depth = raw.shape
    a = num_anchors
    d = depth // a
    if depth != a * d or target.shape != (n, s1, s2, a, d):
        raise DimensionError(f"raw {raw.shape} incompatible with target {target.shape} for A={a}")
    tgt = np.asarray(target, dtype=raw.dtype)
    r = reshape(raw, (n, s1, s2, a, d))
    obj = tgt[..., 4:5]
    xy = sigmoid(r[..., 0:2])
    wh = r[..., 2:4]
    coord = tsum(mul(power(xy - Tensor(tgt[..., 0:2]), 2.0), Tensor(obj)))
    coord = coord + tsum(mul(power(wh - Tensor(tgt[..., 2:4]), 2.0), Tensor(obj)))
    objl = tsum(bce_with_logits(r[..., 4], tgt[..., 4]))
    onehot = tgt[..., 5:] * obj
    if class_weights is not None:
        onehot = onehot * np.asarray(class_weights, dtype=raw.dtype)
    cls = -tsum(mul(log_softmax(r[..., 5:], axis=-1), Tensor(onehot)))
    total = coord * coord_weight + objl * obj_weight + cls * cls_weight
    return mul(total, 1.0 / n)


def loss(pred, target, cfg):
    """Dispatch on ``cfg.kind``; probability inputs for cross-entropy, raw grid outputs for yolo."""
    if cfg.kind == "weighted_cross_entropy":
        return cross_entropy(pred, target, cfg.class_weights)
    na = cfg.extra.get("num_anchors")
    if na is None:
        raise ConfigError("yolo_composite loss needs extra['num_anchors']")
    return yolo_loss(pred, target, na, cfg.class_weights, cfg.coord_weight, cfg.obj_weight, cfg.cls_weight)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` with respect to every entry of ``x``."""
    out = np.zeros_like(x.data, dtype=np.float64)
    flat = x.data.reshape(-1)
    gflat = out.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(f(x).data)
            flat[i] = old - h
            fm = float(f(x).data)
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
    return out


def grad_check(f, x, h=1e-5):
    """Max elementwise relative gap between backprop and central differences."""
    if h <= 0:
        raise ContractError("step h must be positive")
    x.grad = None
    x.requires_grad = True
    y = f(x)
    if y.data.size != 1:
        raise ContractError(f"grad_check needs a scalar function, got shape {y.shape}")
    if y.requires_grad:
        y.backward()
    analytic = np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64)
    numeric = numeric_grad(f, x, h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.data.size else 0.0
