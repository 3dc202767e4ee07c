"""Box geometry and the grid/anchor encoding used by the detection head.

Boxes handed to ``encode_targets`` and returned by ``decode`` are in
normalized image coordinates. Per grid slot the head predicts
``[t_x, t_y, t_w, t_h, t_o, class logits]``; the center is
``(cell + sigmoid(t)) / S`` and the size ``anchor * exp(t)``.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DataError, DimensionError, GeometryError

log = logging.getLogger(__name__)

DEFAULT_NMS_IOU = 0.45
DEFAULT_CONF_THRESHOLD = 0.05
ANCHOR_PRESETS = {"darknet_mini": 9, "squeezenet_mini": 9, "tinydarknet_mini": 6}


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int = 0

    def __post_init__(self):
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise ContractError(f"non-finite box coordinates {vals}")
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ContractError(f"degenerate box {vals}")

    @classmethod
    def from_center(cls, cx, cy, w, h, class_id=0):
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, class_id)

    @property
    def cx(self):
        return (self.x_min + self.x_max) / 2

    @property
    def cy(self):
        return (self.y_min + self.y_max) / 2

    @property
    def w(self):
        return self.x_max - self.x_min

    @property
    def h(self):
        return self.y_max - self.y_min

    @property
    def area(self):
        return self.w * self.h

    def as_array(self):
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    confidence: float
    sample_id: str = None

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ContractError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class AnchorSet:
    pairs: np.ndarray
    cost_history: list = field(default_factory=list)

    def __len__(self):
        return len(self.pairs)

    def tolist(self):
        return [[float(w), float(h)] for w, h in self.pairs]


def iou(a, b):
    """Intersection over union of two boxes."""
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a, b):
    """Pairwise IoU of (N, 4) and (M, 4) corner arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def wh_iou(wh, centroids):
    """IoU of (N, 2) sizes against (K, 2) sizes with all boxes co-centered."""
    wh = np.asarray(wh, dtype=np.float64).reshape(-1, 2)
    c = np.asarray(centroids, dtype=np.float64).reshape(-1, 2)
    inter = np.minimum(wh[:, None, 0], c[None, :, 0]) * np.minimum(wh[:, None, 1], c[None, :, 1])
    union = wh[:, 0:1] * wh[:, 1:2] + (c[:, 0] * c[:, 1])[None, :] - inter
    return inter / union


# ---------------------------------------------------------------------------
# anchors
# ---------------------------------------------------------------------------


def _cluster_cost(wh, centroid):
    return float(np.sum(1.0 - wh_iou(wh, centroid[None])[:, 0]))


def kmeans_anchors(boxes, k, seed=0, max_iter=300):
    """k (width, height) anchors clustering box sizes under the 1 - IoU distance.

    Seeding is farthest-point after a seeded random first pick. Each update
    moves a centroid to the mean or median of its members only when that
    lowers the members' cost, so the mean cost never rises between
    iterations; ``cost_history`` records it after every assignment.
    """
    wh = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    if k < 1:
        raise ConfigError("k must be positive")
    if len(wh) < k:
        raise DataError(f"need at least k={k} boxes, got {len(wh)}")
    if np.any(wh <= 0) or not np.all(np.isfinite(wh)):
        raise DataError("box sizes must be positive and finite")
    distinct = np.unique(wh, axis=0)
    if len(distinct) < k:
        raise DataError(f"k={k} exceeds the {len(distinct)} distinct box sizes (degenerate clusters)")

    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(len(wh)))]
    mind = 1.0 - wh_iou(wh, wh[chosen[0]][None])[:, 0]
    for _ in range(1, k):
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, 1.0 - wh_iou(wh, wh[nxt][None])[:, 0])
    centroids = wh[chosen].copy()

    history = []
    assign = None
    for _ in range(max_iter):
        dist = 1.0 - wh_iou(wh, centroids)
        new_assign = np.argmin(dist, axis=1)
        history.append(float(dist[np.arange(len(wh)), new_assign].mean()))
        moved = False
        for j in range(k):
            members = wh[new_assign == j]
            if len(members) == 0:
                continue
            best, best_cost = centroids[j], _cluster_cost(members, centroids[j])
            for cand in (members.mean(axis=0), np.median(members, axis=0)):
                c = _cluster_cost(members, cand)
                if c < best_cost - 1e-15:
                    best, best_cost = cand, c
            if not np.array_equal(best, centroids[j]):
                centroids[j] = best
                moved = True
        if assign is not None and np.array_equal(assign, new_assign) and not moved:
            break
        assign = new_assign
    order = np.argsort(centroids[:, 0] * centroids[:, 1], kind="stable")
    return AnchorSet(centroids[order], history)


# ---------------------------------------------------------------------------
# grid encoding
# ---------------------------------------------------------------------------


def _cell(v, s):
    return min(int(math.floor(v * s)), s - 1)


def encode_targets(annotations, S, anchors, C, return_dropped=False):
    """Build the (S, S, A, 5+C) target: [cell_x, cell_y, log_w, log_h, obj, one-hot].

    Each box goes to the cell holding its center and its best-IoU anchor; when
    that slot is taken the next-best free anchor is used, and a box finding no
    free anchor is dropped (counted, and logged).
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    a = len(anchors)
    target = np.zeros((S, S, a, 5 + C), dtype=np.float64)
    dropped = 0
    for box in annotations:
        if not 0 <= box.class_id < C:
            raise DataError(f"class id {box.class_id} outside [0, {C})")
        cx, cy = box.cx, box.cy
        if not (0 <= cx <= 1 and 0 <= cy <= 1):
            raise DataError(f"box center ({cx}, {cy}) not normalized")
        col, row = _cell(cx, S), _cell(cy, S)
        ranking = np.argsort(-wh_iou([[box.w, box.h]], anchors)[0], kind="stable")
        for j in ranking:
            if target[row, col, j, 4] == 0:
                target[row, col, j, 0] = cx * S - col
                target[row, col, j, 1] = cy * S - row
                target[row, col, j, 2] = math.log(box.w / anchors[j, 0])
                target[row, col, j, 3] = math.log(box.h / anchors[j, 1])
                target[row, col, j, 4] = 1.0
                target[row, col, j, 5 + box.class_id] = 1.0
                break
        else:
            dropped += 1
    if dropped:
        log.warning("encode_targets dropped %d box(es) with no free anchor slot", dropped)
    return (target, dropped) if return_dropped else target


def _logit(p):
    p = np.clip(p, 1e-12, 1 - 1e-12)
    return np.log(p) - np.log1p(-p)


def targets_to_raw(target, saturation=40.0):
    """Raw head output whose decoding reproduces the encoded boxes exactly."""
    s1, s2, a, d = target.shape
    raw = np.zeros((s1, s2, a, d), dtype=np.float64)
    raw[..., 0:2] = _logit(target[..., 0:2])
    raw[..., 2:4] = target[..., 2:4]
    raw[..., 4] = np.where(target[..., 4] > 0, saturation, -saturation)
    raw[..., 5:] = target[..., 5:] * saturation
    return raw.reshape(s1, s2, a * d)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def decode(output, anchors, conf_threshold=DEFAULT_CONF_THRESHOLD, sample_id=None):
    """Turn one (S, S, A*(5+C)) raw output into detections above the threshold."""
    out = np.asarray(output, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 2)
    a = len(anchors)
    if out.ndim != 3 or out.shape[0] != out.shape[1] or out.shape[2] % a or out.shape[2] // a < 6:
        raise GeometryError(f"raw output shape {out.shape} is not (S, S, A*(5+C)) for A={a}")
    s = out.shape[0]
    r = out.reshape(s, s, a, -1)
    cols = np.arange(s)[None, :, None]
    rows = np.arange(s)[:, None, None]
    cx = (cols + _sigmoid(r[..., 0])) / s
    cy = (rows + _sigmoid(r[..., 1])) / s
    w = anchors[None, None, :, 0] * np.exp(np.clip(r[..., 2], -30, 30))
    h = anchors[None, None, :, 1] * np.exp(np.clip(r[..., 3], -30, 30))
    logits = r[..., 5:]
    z = logits - logits.max(axis=-1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=-1, keepdims=True)
    cls = probs.argmax(axis=-1)
    conf = _sigmoid(r[..., 4]) * probs.max(axis=-1)
    x0 = np.clip(cx - w / 2, 0, 1)
    y0 = np.clip(cy - h / 2, 0, 1)
    x1 = np.clip(cx + w / 2, 0, 1)
    y1 = np.clip(cy + h / 2, 0, 1)
    keep = (conf >= conf_threshold) & (x1 > x0) & (y1 > y0)
    dets = []
    for i, j, k in zip(*np.nonzero(keep)):
        box = BoundingBox(float(x0[i, j, k]), float(y0[i, j, k]), float(x1[i, j, k]), float(y1[i, j, k]), int(cls[i, j, k]))
        dets.append(Detection(box, int(cls[i, j, k]), float(np.clip(conf[i, j, k], 0.0, 1.0)), sample_id))
    return dets


def nms(detections, iou_threshold=DEFAULT_NMS_IOU):
    """Greedy per-class suppression; result ordered by confidence, class, input order."""
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i].confidence, detections[i].class_id, i))
    kept = []
    for i in order:
        d = detections[i]
        if all(k.class_id != d.class_id or iou(k.box, d.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


def postprocess(raw_batch, anchors, conf_threshold=DEFAULT_CONF_THRESHOLD, iou_threshold=DEFAULT_NMS_IOU,
                sample_ids=None):
    """decode + nms for every image in an (N, S, S, D) batch."""
    raw_batch = np.asarray(raw_batch)
    if raw_batch.ndim != 4:
        raise DimensionError(f"expected (N, S, S, D), got {raw_batch.shape}")
    ids = sample_ids if sample_ids is not None else [None] * len(raw_batch)
    out = []
    for raw, sid in zip(raw_batch, ids):
        out.extend(nms(decode(raw, anchors, conf_threshold, sid), iou_threshold))
    return out
