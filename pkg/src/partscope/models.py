"""Recognition and detection networks, freeze policies and the weight container."""

import struct
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import FireSpec, ResidualSpec, inception_mini
from .errors import ConfigError, DataError, GeometryError
from .layers import ConvSpec, Dense, Dropout, Flatten, GlobalPool, Module, Pool, Sequential

HEAD_KINDS = ("LIGHT", "INT", "FULL")
BACKBONES = ("darknet_mini", "tinydarknet_mini", "squeezenet_mini")

# Published head widths; the desk default scales them by 1/8.
HEAD_WIDTHS = {
    "LIGHT": {"dense": (512, 256)},
    "INT": {"conv": 2048, "dense": (1024, 256)},
    "FULL": {"conv": 1024, "dense": (1024, 256)},
}
DEFAULT_WIDTH_FACTOR = 1 / 8
# FULL's first dense layer keeps 1024/8 = 128 at the desk default, like INT's.
DEFAULT_ANCHORS_PER_BACKBONE = {"darknet_mini": 9, "squeezenet_mini": 9, "tinydarknet_mini": 6}


class Network(Module):
    """Base + head pair; ``layers`` is the flat forward order used by freeze policies."""

    def __init__(self, base, head):
        self.base = base
        self.head = head

    def named_children(self):
        return [("base", self.base), ("head", self.head)]

    def children(self):
        return [self.base, self.head]

    def forward(self, x):
        return self.head(self.base(x))

    def num_parameters(self, trainable_only=False):
        return int(sum(p.size for p in self.parameters() if p.requires_grad or not trainable_only))

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


class RecognitionModel(Network):
    def __init__(self, base, head, head_kind, num_classes, input_size):
        super().__init__(base, head)
        self.head_kind = head_kind
        self.num_classes = num_classes
        self.input_size = input_size

    def logits(self, x):
        return super().forward(x)

    def forward(self, x):
        return T.softmax(self.logits(x), axis=-1)

    @property
    def base_frozen(self):
        return not any(p.requires_grad for p in self.base.parameters())


class DetectionModel(Network):
    def __init__(self, base, head, backbone_kind, grid_size, anchors, num_classes, input_size):
        super().__init__(base, head)
        self.backbone_kind = backbone_kind
        self.grid_size = grid_size
        self.anchors = np.asarray(anchors, dtype=np.float64)
        self.num_classes = num_classes
        self.input_size = input_size

    @property
    def anchors_per_cell(self):
        return len(self.anchors)

    @property
    def output_shape(self):
        s = self.grid_size
        return (s, s, self.anchors_per_cell * (5 + self.num_classes))


# ---------------------------------------------------------------------------
# recognition
# ---------------------------------------------------------------------------


def _scaled(n, factor):
    return max(int(round(n * factor)), 1)


def build_recognition_base(input_size=64, widths=(16, 32, 48), rng=None, dtype=np.float32):
    """Mini feature extractor: conv stem, residual, inception and fire stages, /8 spatially."""
    rng = rng if rng is not None else np.random.default_rng(0)
    if input_size % 8:
        raise GeometryError(f"recognition input size must be a multiple of 8, got {input_size}")
    w1, w2, w3 = widths

    def conv(f, s, cin, cout, act="relu", pad="same"):
        return ConvSpec(f, s, pad, cin, cout, activation=act, rng=rng, dtype=dtype)

    layers = [
        conv(3, 1, 3, w1),
        Pool(2, 2, "max"),
        ResidualSpec([conv(3, 1, w1, w1), conv(3, 1, w1, w1, act="identity")], activation="relu"),
        conv(3, 1, w1, w2),
        Pool(2, 2, "max"),
        inception_mini(w2, w2, rng=rng, dtype=dtype),
        Pool(2, 2, "max"),
        FireSpec(w2, max(w3 // 4, 1), w3 // 2, w3 - w3 // 2, rng=rng, dtype=dtype),
    ]
    return Sequential(layers), w3


def build_recognition(head_kind, num_classes, base_config=None, width_factor=DEFAULT_WIDTH_FACTOR,
                      input_size=64, seed=0, dtype=np.float32):
    """Mini base topped with a LIGHT, INT or FULL head; LIGHT/INT freeze the base."""
    if head_kind not in HEAD_KINDS:
        raise ConfigError(f"unknown head kind {head_kind!r}; expected one of {HEAD_KINDS}")
    if num_classes < 2:
        raise ConfigError("recognition needs at least two classes")
    rng = np.random.default_rng(seed)
    base_config = dict(base_config or {})
    base, feat_c = build_recognition_base(input_size, tuple(base_config.get("widths", (16, 32, 48))), rng, dtype)
    feat_hw = input_size // 8
    spec = HEAD_WIDTHS[head_kind]
    d1, d2 = (_scaled(n, width_factor) for n in spec["dense"])
    if head_kind == "LIGHT":
        head = [GlobalPool("max"),
                Dense(feat_c, d1, "relu", rng, dtype), Dropout(0.5, seed + 1),
                Dense(d1, d2, "relu", rng, dtype), Dropout(0.5, seed + 2)]
    else:
        cw = _scaled(spec["conv"], width_factor)
        if feat_hw < 3:
            raise GeometryError("feature map too small for the 3x3 valid head convolution")
        flat = (feat_hw - 2) ** 2 * cw
        act1, act2 = ("sigmoid", "relu") if head_kind == "INT" else ("sigmoid", "sigmoid")
        head = [ConvSpec(3, 1, "valid", feat_c, cw, activation="relu", rng=rng, dtype=dtype), Flatten(),
                Dense(flat, d1, act1, rng, dtype), Dense(d1, d2, act2, rng, dtype)]
    head.append(Dense(d2, num_classes, "identity", rng, dtype))
    model = RecognitionModel(base, Sequential(head), head_kind, num_classes, input_size)
    model.width_factor = width_factor
    apply_freeze(model, FreezePolicy("none" if head_kind == "FULL" else "base_frozen"))
    return model


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------


def _stride_depth(input_size, grid_size):
    if grid_size < 1 or input_size % grid_size:
        raise GeometryError(f"input size {input_size} is not divisible by grid size {grid_size}")
    stride = input_size // grid_size
    depth = int(np.log2(stride)) if stride > 0 else -1
    if stride < 2 or 2**depth != stride:
        raise GeometryError(f"stride {stride} (= {input_size}/{grid_size}) must be a power of two >= 2")
    return depth


def _channels(width, depth, cap):
    return [min(width * 2 ** (k + 1), cap) for k in range(depth)]


def build_detection(backbone_kind, grid_size, anchors, num_classes, input_size=None, width=8,
                    max_channels=64, seed=0, dtype=np.float32):
    """Mini backbone with a single-scale grid head emitting (S, S, A*(5+C))."""
    if backbone_kind not in BACKBONES:
        raise ConfigError(f"unknown backbone {backbone_kind!r}; expected one of {BACKBONES}")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    if len(anchors) == 0:
        raise ConfigError("at least one anchor is required")
    if num_classes < 1:
        raise ConfigError("num_classes must be positive")
    if input_size is None:
        input_size = 32 * grid_size
    depth = _stride_depth(input_size, grid_size)
    rng = np.random.default_rng(seed)
    out_depth = len(anchors) * (5 + num_classes)

    def conv(f, s, cin, cout, act="leaky_relu"):
        return ConvSpec(f, s, "same", cin, cout, activation=act, rng=rng, dtype=dtype)

    chans = _channels(width, depth, max_channels)
    layers = []
    if backbone_kind == "darknet_mini":
        layers.append(conv(3, 1, 3, width))
        cin = width
        for c in chans:
            layers.append(conv(3, 2, cin, c))
            layers.append(ResidualSpec([conv(1, 1, c, c // 2), conv(3, 1, c // 2, c, act="identity")],
                                       activation="leaky_relu"))
            cin = c
        head = [conv(3, 1, cin, cin), conv(1, 1, cin, out_depth, act="identity")]
    elif backbone_kind == "tinydarknet_mini":
        layers.append(conv(3, 1, 3, width))
        cin = width
        for c in chans:
            layers.append(Pool(2, 2, "max"))
            layers.append(conv(3, 1, cin, c))
            cin = c
        head = [conv(1, 1, cin, cin), conv(1, 1, cin, out_depth, act="identity")]
    else:
        layers.append(conv(3, 2, 3, width * 2, act="relu"))
        cin = width * 2
        for c in chans[1:]:
            fire = FireSpec(cin, max(c // 8, 2), c // 2, c - c // 2, rng=rng, dtype=dtype)
            layers.append(fire)
            layers.append(Pool(2, 2, "max"))
            cin = fire.out_channels
        fire = FireSpec(cin, max(cin // 8, 2), cin // 2, cin - cin // 2, rng=rng, dtype=dtype)
        head = [fire, ConvSpec(1, 1, "valid", fire.out_channels, out_depth, activation="identity", rng=rng, dtype=dtype)]
    model = DetectionModel(Sequential(layers), Sequential(head), backbone_kind, grid_size, anchors,
                           num_classes, input_size)
    model.width = width
    model.max_channels = max_channels
    return model


# ---------------------------------------------------------------------------
# freezing
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FreezePolicy:
    mode: str = "none"
    k: int = 0

    def __post_init__(self):
        if self.mode not in ("none", "base_frozen", "all_but_last_k"):
            raise ConfigError(f"unknown freeze mode {self.mode!r}")


def apply_freeze(model, policy):
    """Mark exactly the tensors the policy allows as trainable; returns the model."""
    layers = model.param_layers()
    if policy.mode == "none":
        trainable = set(id(p) for p in model.parameters())
    elif policy.mode == "base_frozen":
        trainable = set(id(p) for p in model.head.parameters())
    else:
        if not 1 <= policy.k <= len(layers):
            raise ConfigError(f"k={policy.k} out of range for {len(layers)} parameterized layers")
        trainable = set(id(p) for layer in layers[-policy.k:] for p in layer.parameters())
    for p in model.parameters():
        p.requires_grad = id(p) in trainable
        if not p.requires_grad:
            p.grad = None
    model.freeze_policy = policy
    return model


# ---------------------------------------------------------------------------
# weight container
# ---------------------------------------------------------------------------

MAGIC = b"GCRD"
FORMAT_VERSION = 1


def encode_weights(named):
    """Serialize (name, array) pairs: magic, u32 version, then one record per tensor."""
    buf = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, arr in named:
        arr = np.asarray(arr.data if isinstance(arr, T.Tensor) else arr)
        raw = name.encode("utf-8")
        buf.append(struct.pack("<I", len(raw)))
        buf.append(raw)
        buf.append(struct.pack("<I", arr.ndim))
        buf.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(buf)


def decode_weights(blob):
    if blob[:4] != MAGIC:
        raise DataError("not a weight container (bad magic)")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise DataError(f"unsupported container version {version}")
    pos, out = 8, []
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(blob):
                raise DataError(f"truncated record {name!r}")
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
            out.append((name, arr))
    except struct.error as exc:
        raise DataError(f"truncated weight container: {exc}") from None
    return out


def save_weights(model, path):
    with open(path, "wb") as fh:
        fh.write(encode_weights(model.named_parameters()))


def load_weights(model, path):
    with open(path, "rb") as fh:
        records = dict(decode_weights(fh.read()))
    params = dict(model.named_parameters())
    missing = set(params) - set(records)
    if missing:
        raise DataError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    for name, p in params.items():
        arr = records[name]
        if arr.shape != p.shape:
            raise DataError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
        p.data = arr.astype(p.dtype)
    return model


def snapshot(model):
    return [p.data.copy() for p in model.parameters()]


def restore(model, snap):
    for p, arr in zip(model.parameters(), snap):
        p.data = arr.copy()
