"""Two-domain datasets: annotations, splits, class weights, injection, synthetic parts, file I/O."""

import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field, replace

import numpy as np
from PIL import Image, ImageDraw

from .codec import BoundingBox
from .errors import ConfigError, DataError, GeometryError, ParseError

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
INJECTION_FRACTIONS = (0, 10, 25, 50, 75, 100)
PART_ARCHETYPES = (
    "wheel-disc", "door-rect", "grille-stripes", "light-ellipse",
    "mirror-triangle", "exhaust-ring", "handle-bar", "window-trapezoid",
)
MIN_IMAGE_SIZE = 24


@dataclass(frozen=True)
class Annotation:
    """Center-form box in normalized coordinates, exactly as stored on disk."""

    class_id: int
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise DataError(f"annotation has non-positive size w={self.w} h={self.h}")

    def to_box(self):
        return BoundingBox.from_center(self.cx, self.cy, self.w, self.h, self.class_id)


@dataclass(eq=False)
class Sample:
    sample_id: str
    image: np.ndarray
    annotations: list = field(default_factory=list)
    label: int = None
    split: str = None
    domain: str = ""

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (self.sample_id == other.sample_id and self.annotations == other.annotations
                and self.label == other.label and self.split == other.split and self.domain == other.domain
                and self.image.shape == other.image.shape and np.array_equal(self.image, other.image))

    def class_ids(self):
        if self.label is not None:
            return [self.label]
        return [a.class_id for a in self.annotations]

    def boxes(self):
        return [a.to_box() for a in self.annotations]


@dataclass(eq=False)
class DomainDataset:
    domain_id: str
    samples: list
    class_names: list
    task: str = "detection"

    def __post_init__(self):
        k = len(self.class_names)
        seen = set()
        for s in self.samples:
            if s.sample_id in seen:
                raise DataError(f"duplicate sample id {s.sample_id!r}")
            seen.add(s.sample_id)
            for c in s.class_ids():
                if not 0 <= c < k:
                    raise DataError(f"sample {s.sample_id}: class id {c} outside [0, {k})")

    def __len__(self):
        return len(self.samples)

    def __eq__(self, other):
        return (isinstance(other, DomainDataset) and self.domain_id == other.domain_id
                and self.class_names == other.class_names and self.task == other.task
                and self.samples == other.samples)

    @property
    def num_classes(self):
        return len(self.class_names)

    def split(self, name):
        return [s for s in self.samples if s.split == name]

    @property
    def train(self):
        return self.split("train")

    @property
    def dev(self):
        return self.split("dev")

    @property
    def test(self):
        return self.split("test")

    def with_samples(self, samples, domain_id=None):
        return DomainDataset(domain_id or self.domain_id, list(samples), list(self.class_names), self.task)


def images_array(samples, dtype=np.float32):
    """Stack sample images into an (N, H, W, 3) array scaled to [0, 1]."""
    return np.stack([s.image for s in samples]).astype(dtype) / dtype(255.0)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def _check_ratios(ratios):
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 100) > 1e-9:
        raise ConfigError(f"split ratios must be three non-negative numbers summing to 100, got {ratios}")
    return ratios


def _apportion(n, ratios):
    """Integer counts summing to n, each within one of n*r/100 (largest remainder, train first)."""
    exact = [n * r / 100 for r in ratios]
    counts = [math.floor(e) for e in exact]
    order = sorted(range(3), key=lambda j: (-(exact[j] - counts[j]), j))
    for j in order[: n - sum(counts)]:
        counts[j] += 1
    return counts


def stratified_split(dataset, ratios=(80, 10, 10), seed=0):
    """Assign train/dev/test per class; multi-label sets use rarest-label-first iterative stratification."""
    ratios = _check_ratios(ratios)
    rng = np.random.default_rng(seed)
    samples = sorted(dataset.samples, key=lambda s: s.sample_id)
    single = all(len(set(s.class_ids())) <= 1 for s in samples)
    assignment = _split_single(samples, ratios, rng) if single else _split_multi(samples, ratios, rng, dataset.num_classes)
    out = [replace(s, split=assignment[s.sample_id]) for s in dataset.samples]
    return dataset.with_samples(out)


def _split_single(samples, ratios, rng):
    by_class = {}
    for s in samples:
        ids = s.class_ids()
        by_class.setdefault(ids[0] if ids else -1, []).append(s.sample_id)
    out = {}
    for c in sorted(by_class):
        ids = list(by_class[c])
        rng.shuffle(ids)
        if len(ids) < 3:
            log.warning("class %s has only %d sample(s); placing train-first", c, len(ids))
            counts = [0, 0, 0]
            counts[next(j for j in range(3) if ratios[j] > 0)] = len(ids)
        else:
            counts = _apportion(len(ids), ratios)
        pos = 0
        for j, n in enumerate(counts):
            for sid in ids[pos:pos + n]:
                out[sid] = SPLITS[j]
            pos += n
    return out


def _split_multi(samples, ratios, rng, num_classes):
    label_sets = {s.sample_id: set(s.class_ids()) for s in samples}
    ids = [s.sample_id for s in samples]
    rng.shuffle(ids)
    r = np.array(ratios) / 100.0
    want_total = r * len(ids)
    per_label = Counter(c for sid in ids for c in label_sets[sid])
    want = {c: r * per_label[c] for c in per_label}
    for c, n in per_label.items():
        if n < 3:
            log.warning("class %s appears in only %d sample(s); placing train-first", c, n)
    unassigned = set(ids)
    out = {}

    def place(sid, j):
        out[sid] = SPLITS[j]
        unassigned.discard(sid)
        want_total[j] -= 1
        for c in label_sets[sid]:
            want[c][j] -= 1

    while True:
        remaining = Counter(c for sid in unassigned for c in label_sets[sid])
        if not remaining:
            break
        label = min(remaining, key=lambda c: (remaining[c], c))
        for sid in [s for s in ids if s in unassigned and label in label_sets[s]]:
            if per_label[label] < 3:
                j = next(j for j in range(3) if ratios[j] > 0)
            else:
                j = max(range(3), key=lambda j: (round(want[label][j], 9), round(want_total[j], 9), -j))
            place(sid, j)
    for sid in [s for s in ids if s in unassigned]:
        place(sid, max(range(3), key=lambda j: (round(want_total[j], 9), -j)))
    _repair_multi(out, label_sets, ratios, per_label)
    return out


def _split_deviation(out, label_sets, ratios, per_label):
    counts = {c: [0, 0, 0] for c in per_label}
    for sid, split in out.items():
        j = SPLITS.index(split)
        for c in label_sets[sid]:
            counts[c][j] += 1
    return {c: [counts[c][j] - per_label[c] * ratios[j] / 100 for j in range(3)] for c in per_label}


def _repair_multi(out, label_sets, ratios, per_label, max_rounds=200):
    """Pairwise swaps between splits while they shrink the worst per-class deviation."""

    def badness(dev):
        return sum(max(0.0, abs(d) - 1.0) for v in dev.values() for d in v)

    dev = _split_deviation(out, label_sets, ratios, per_label)
    score = badness(dev)
    ids = sorted(out)
    for _ in range(max_rounds):
        if score == 0:
            return
        improved = False
        for a in ids:
            for b in ids:
                if out[a] == out[b] or label_sets[a] == label_sets[b]:
                    continue
                out[a], out[b] = out[b], out[a]
                new_dev = _split_deviation(out, label_sets, ratios, per_label)
                new_score = badness(new_dev)
                if new_score < score - 1e-12:
                    score, dev, improved = new_score, new_dev, True
                    break
                out[a], out[b] = out[b], out[a]
            if improved:
                break
        if not improved:
            return


# ---------------------------------------------------------------------------
# class weights and injection
# ---------------------------------------------------------------------------


def label_counts(samples, num_classes):
    counts = np.zeros(num_classes, dtype=np.int64)
    for s in samples:
        for c in s.class_ids():
            counts[c] += 1
    return counts


def class_weights(dataset, smoothing=True):
    """w_c = N / (K (n_c + 1)) with N = labels + K (add-one smoothing); train split when assigned."""
    samples = dataset.train if any(s.split for s in dataset.samples) else dataset.samples
    if not samples:
        raise DataError("cannot derive class weights from an empty dataset")
    n = label_counts(samples, dataset.num_classes).astype(np.float64)
    k = dataset.num_classes
    if smoothing:
        return (n.sum() + k) / (k * (n + 1))
    if np.any(n == 0):
        raise DataError("unsmoothed weights need at least one label per class")
    return n.sum() / (k * n)


@dataclass
class InjectionSchedule:
    source: DomainDataset
    inject: DomainDataset
    fraction: float
    seed: int = 0
    eval_target: str = "inject"

    def __post_init__(self):
        if not 0 <= self.fraction <= 100:
            raise ConfigError(f"injection fraction {self.fraction} outside [0, 100]")
        if self.eval_target not in ("inject", "source"):
            raise ConfigError("eval_target must be 'inject' or 'source'")


def injected_count(n_inject_train, fraction):
    return int(math.floor(fraction / 100 * n_inject_train + 0.5))


def inject(schedule):
    """Source train split plus a seeded uniform sample of X% of the injected train split."""
    t1, t2 = schedule.source, schedule.inject
    if t1.class_names != t2.class_names:
        raise ConfigError("source and injected datasets must share one class universe")
    pool = sorted(t2.train, key=lambda s: s.sample_id)
    k = injected_count(len(pool), schedule.fraction)
    rng = np.random.default_rng(schedule.seed)
    picked = [pool[i] for i in sorted(rng.choice(len(pool), size=k, replace=False))] if k else []
    target = t2 if schedule.eval_target == "inject" else t1
    samples = list(t1.train) + picked + target.dev + target.test
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise DataError("sample ids collide across domains")
    name = f"{t1.domain_id}+{schedule.fraction:g}%{t2.domain_id}"
    return DomainDataset(name, samples, list(t1.class_names), t1.task)


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

_PART_COLORS = np.array([
    (40, 40, 45), (40, 70, 170), (150, 150, 150), (235, 200, 40),
    (40, 140, 60), (110, 110, 120), (130, 70, 30), (90, 190, 210),
])
_SKIN = np.array([(224, 172, 105), (198, 134, 66), (141, 85, 36), (241, 194, 125), (255, 219, 172)])
_DOMAIN_CODES = {"clean": 1, "occluded": 2}


def _draw_part(draw, kind, x0, y0, x1, y1, color, rng):
    """Render one part archetype filling exactly the pixel box [x0, x1) x [y0, y1)."""
    c = tuple(int(v) for v in color)
    bx = (x0, y0, x1 - 1, y1 - 1)
    w, h = x1 - x0, y1 - y0
    dark = tuple(int(v * 0.5) for v in color)
    light = tuple(int(min(255, v * 1.6 + 40)) for v in color)
    if kind == 0:  # wheel disc with hub
        draw.ellipse(bx, fill=c)
        draw.ellipse((x0 + w // 3, y0 + h // 3, x1 - 1 - w // 3, y1 - 1 - h // 3), fill=light)
    elif kind == 1:  # door: rectangle with a seam
        draw.rectangle(bx, fill=c)
        draw.line((x0 + w // 2, y0, x0 + w // 2, y1 - 1), fill=dark, width=max(1, w // 16))
    elif kind == 2:  # grille stripes
        draw.rectangle(bx, fill=dark)
        step = max(2, h // 5)
        for yy in range(y0, y1, step):
            draw.rectangle((x0, yy, x1 - 1, min(yy + step // 2, y1 - 1)), fill=c)
    elif kind == 3:  # light ellipse
        draw.ellipse(bx, fill=c)
    elif kind == 4:  # mirror triangle
        draw.polygon([(x0, y1 - 1), (x1 - 1, y1 - 1), (x1 - 1, y0)], fill=c)
    elif kind == 5:  # exhaust ring
        draw.ellipse(bx, fill=c)
        t = max(2, min(w, h) // 4)
        draw.ellipse((x0 + t, y0 + t, x1 - 1 - t, y1 - 1 - t), fill=dark)
    elif kind == 6:  # handle bar
        draw.rectangle(bx, fill=c)
        draw.rectangle((x0 + w // 6, y0 + h // 3, x1 - 1 - w // 6, y1 - 1 - h // 3), fill=light)
    else:  # window trapezoid
        inset = w // 5
        draw.polygon([(x0 + inset, y0), (x1 - 1 - inset, y0), (x1 - 1, y1 - 1), (x0, y1 - 1)], fill=c)


def _part_size(kind, lo, hi, rng):
    side = rng.uniform(lo, hi)
    aspect = {1: rng.uniform(0.6, 0.9), 2: rng.uniform(1.4, 2.0), 3: rng.uniform(1.3, 1.8),
              6: rng.uniform(2.2, 3.0), 7: rng.uniform(1.3, 1.7)}.get(kind, rng.uniform(0.9, 1.1))
    w = side * math.sqrt(aspect)
    h = side / math.sqrt(aspect)
    return w, h


def _place(boxes, w, h, size, rng, tries=60, max_overlap=0.05):
    for _ in range(tries):
        x0 = int(rng.integers(0, size - w + 1))
        y0 = int(rng.integers(0, size - h + 1))
        cand = (x0, y0, x0 + w, y0 + h)
        ok = True
        for b in boxes:
            iw = min(cand[2], b[2]) - max(cand[0], b[0])
            ih = min(cand[3], b[3]) - max(cand[1], b[1])
            if iw > 0 and ih > 0 and iw * ih / min(w * h, (b[2] - b[0]) * (b[3] - b[1])) > max_overlap:
                ok = False
                break
        if ok:
            return cand
    return None


def _limb(image, box, size, rng):
    """Paint one opaque skin-tone stroke covering 10-50% of ``box``; returns the coverage reached."""
    x0, y0, x1, y1 = box
    area = (x1 - x0) * (y1 - y0)
    color = tuple(int(v) for v in _SKIN[rng.integers(len(_SKIN))])
    best = None
    for _ in range(12):
        ang = rng.uniform(0, 2 * math.pi)
        px = rng.uniform(x0, x1)
        py = rng.uniform(y0, y1)
        reach = rng.uniform(0.6, 1.0) * size
        ex, ey = px - math.cos(ang) * reach, py - math.sin(ang) * reach
        width = int(rng.uniform(0.15, 0.45) * min(x1 - x0, y1 - y0)) + 2
        mask = Image.new("L", (size, size), 0)
        ImageDraw.Draw(mask).line((ex, ey, px, py), fill=255, width=width)
        ImageDraw.Draw(mask).ellipse((px - width / 2, py - width / 2, px + width / 2, py + width / 2), fill=255)
        m = np.asarray(mask) > 0
        cov = m[y0:y1, x0:x1].sum() / area
        if 0.10 <= cov <= 0.50:
            best = m
            break
    if best is None:
        return 0.0
    image[best] = color
    return float(cov)


def _render(domain, num_classes, size, rng, parts, task):
    if domain == "clean":
        bg = rng.integers(200, 236, size=3)
    else:
        bg = rng.integers(120, 236, size=3)
    img = Image.new("RGB", (size, size), tuple(int(v) for v in bg))
    draw = ImageDraw.Draw(img)
    if task == "recognition":
        n_parts, lo, hi = 1, 0.45 * size, 0.8 * size
    else:
        n_parts, lo, hi = int(rng.integers(parts[0], parts[1] + 1)), 0.2 * size, 0.42 * size
    boxes, labels = [], []
    for _ in range(n_parts):
        kind = int(rng.integers(num_classes))
        w, h = _part_size(kind, lo, hi, rng)
        w = int(np.clip(round(w), 6, size))
        h = int(np.clip(round(h), 6, size))
        b = _place(boxes, w, h, size, rng)
        if b is None:
            continue
        color = np.clip(_PART_COLORS[kind] + rng.integers(-15, 16, size=3), 0, 255)
        _draw_part(draw, kind, *b, color, rng)
        boxes.append(b)
        labels.append(kind)
    arr = np.asarray(img, dtype=np.float64).copy()
    if domain == "occluded":
        targets = rng.permutation(len(boxes))[: int(rng.integers(1, 4))]
        for t in targets:
            _limb(arr, boxes[t], size, rng)
        gain = rng.uniform(0.6, 1.35)
        ramp = np.linspace(rng.uniform(-40, 0), rng.uniform(0, 40), size)
        shade = ramp[None, :, None] if rng.random() < 0.5 else ramp[:, None, None]
        arr = arr * gain + shade
    else:
        arr = arr * rng.uniform(0.92, 1.08)
    return np.clip(np.rint(arr), 0, 255).astype(np.uint8), boxes, labels


def synth_generate(domain, n, num_classes, image_size, seed=0, task="detection", parts=(1, 6)):
    """Deterministic synthetic car-part images in a clean or human-occluded domain.

    Detection images hold 1-6 non-overlapping parts; recognition images hold
    exactly one. Annotations always describe the full, un-occluded part.
    """
    if domain not in _DOMAIN_CODES:
        raise ConfigError(f"domain must be 'clean' or 'occluded', got {domain!r}")
    if not 1 <= num_classes <= len(PART_ARCHETYPES):
        raise ConfigError(f"num_classes must be in [1, {len(PART_ARCHETYPES)}]")
    if task not in ("detection", "recognition"):
        raise ConfigError(f"unknown task {task!r}")
    if n < 0:
        raise ConfigError("n must be non-negative")
    if image_size < MIN_IMAGE_SIZE:
        raise GeometryError(f"image size {image_size} too small for parts (minimum {MIN_IMAGE_SIZE})")
    samples = []
    for i in range(n):
        rng = np.random.default_rng([seed, _DOMAIN_CODES[domain], i])
        while True:
            img, boxes, labels = _render(domain, num_classes, image_size, rng, parts, task)
            if boxes:
                break
        sid = f"{domain}-{i:06d}"
        if task == "recognition":
            samples.append(Sample(sid, img, [], labels[0], None, domain))
        else:
            anns = [Annotation(c, (b[0] + b[2]) / 2 / image_size, (b[1] + b[3]) / 2 / image_size,
                               (b[2] - b[0]) / image_size, (b[3] - b[1]) / image_size)
                    for b, c in zip(boxes, labels)]
            samples.append(Sample(sid, img, anns, None, None, domain))
    return DomainDataset(domain, samples, list(PART_ARCHETYPES[:num_classes]), task)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def _fmt(v):
    return repr(float(v))


def save_dataset(dataset, directory, index_name="index.txt"):
    """Write PNG images, one annotation file per image, classes.txt and the index."""
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    os.makedirs(os.path.join(directory, "labels"), exist_ok=True)
    with open(os.path.join(directory, "classes.txt"), "w") as fh:
        fh.writelines(name + "\n" for name in dataset.class_names)
    lines = []
    for s in sorted(dataset.samples, key=lambda s: s.sample_id):
        img_rel = f"images/{s.sample_id}.png"
        ann_rel = f"labels/{s.sample_id}.txt"
        Image.fromarray(s.image).save(os.path.join(directory, img_rel), optimize=False)
        with open(os.path.join(directory, ann_rel), "w") as fh:
            if dataset.task == "recognition":
                fh.write(f"{s.label}\n")
            else:
                fh.writelines(f"{a.class_id} {_fmt(a.cx)} {_fmt(a.cy)} {_fmt(a.w)} {_fmt(a.h)}\n"
                              for a in s.annotations)
        lines.append(f"{s.sample_id} {img_rel} {ann_rel} {s.split or 'none'} {s.domain}\n")
    path = os.path.join(directory, index_name)
    with open(path, "w") as fh:
        fh.writelines(lines)
    return path


def read_class_names(path):
    with open(path) as fh:
        return [line.rstrip("\n") for line in fh if line.strip()]


def _parse_annotation_file(path, sample_id):
    anns, label = [], None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok:
                continue
            try:
                if len(tok) == 1:
                    label = int(tok[0])
                elif len(tok) == 5:
                    c = int(tok[0])
                    cx, cy, w, h = (float(t) for t in tok[1:])
                    if not (w > 0 and h > 0):
                        raise DataError(f"sample {sample_id}: degenerate box on line {lineno} ({line.strip()})")
                    anns.append(Annotation(c, cx, cy, w, h))
                else:
                    raise ParseError(path, lineno, f"expected 'class_id' or 'class_id cx cy w h', got {line.strip()!r}")
            except ValueError as exc:
                if isinstance(exc, DataError):
                    raise
                raise ParseError(path, lineno, str(exc)) from None
    if label is not None and anns:
        raise ParseError(path, 1, "file mixes recognition and detection lines")
    return anns, label


def load_dataset(index_path, class_names=None, load_images=True):
    """Read an index written by ``save_dataset`` (or by hand in the same format)."""
    root = os.path.dirname(os.path.abspath(index_path))
    if class_names is None:
        cpath = os.path.join(root, "classes.txt")
        if not os.path.exists(cpath):
            raise DataError(f"no class names given and {cpath} is missing")
        class_names = read_class_names(cpath)
    samples, task, domains = [], None, []
    with open(index_path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok:
                continue
            if len(tok) != 5:
                raise ParseError(index_path, lineno, "expected 'sample_id image_path annotation_path split domain'")
            sid, img_rel, ann_rel, split, domain = tok
            if split not in SPLITS + ("none",):
                raise ParseError(index_path, lineno, f"unknown split {split!r}")
            anns, label = _parse_annotation_file(os.path.join(root, ann_rel), sid)
            kind = "recognition" if label is not None else "detection"
            if task is None:
                task = kind
            elif task != kind and (label is not None or anns):
                raise ParseError(index_path, lineno, "index mixes recognition and detection samples")
            img = None
            if load_images:
                with Image.open(os.path.join(root, img_rel)) as im:
                    img = np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
            samples.append(Sample(sid, img, anns, label, None if split == "none" else split, domain))
            if domain not in domains:
                domains.append(domain)
    return DomainDataset("+".join(domains) or "empty", samples, class_names, task or "detection")


def write_index_splits(index_path, dataset):
    """Rewrite only the split column of an index from ``dataset``'s assignment."""
    by_id = {s.sample_id: s.split or "none" for s in dataset.samples}
    with open(index_path) as fh:
        lines = fh.readlines()
    out = []
    for line in lines:
        tok = line.split()
        if len(tok) == 5:
            tok[3] = by_id.get(tok[0], tok[3])
            line = " ".join(tok) + "\n"
        out.append(line)
    with open(index_path, "w") as fh:
        fh.writelines(out)
