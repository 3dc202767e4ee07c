"""Optimizers, schedules and the recognition / detection / domain-adaptation training procedures."""

import csv
import io
import itertools
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import codec
from . import tensor as T
from .data import DomainDataset, InjectionSchedule, class_weights, images_array, inject
from .errors import ConfigError, DivergenceError
from .metrics import DEFAULT_IOU_THRESHOLDS, f1_macro, map_at, recognition_report
from .models import (FreezePolicy, apply_freeze, build_detection, build_recognition, load_weights, restore,
                     save_weights, snapshot)

log = logging.getLogger(__name__)

RECOGNITION_BATCH_GRID = (16, 32, 64, 128)
RECOGNITION_LR_GRID = (0.1, 0.05, 0.01, 0.005, 0.001)
MODES = ("target_only", "fine_tune", "joint")


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class Optimizer:
    def __init__(self, params, lr):
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.state = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def sync_frozen(self):
        """Forget state held for tensors that are no longer trainable."""
        live = {id(p) for p in self.params if p.requires_grad}
        self.state = {k: v for k, v in self.state.items() if k in live}

    def step(self):
        for p in self.params:
            if p.requires_grad and p.grad is not None:
                self._update(p)


class SGD(Optimizer):
    def __init__(self, params, lr, momentum=0.0):
        super().__init__(params, lr)
        self.momentum = momentum

    def _update(self, p):
        g = p.grad
        if self.momentum:
            v = self.state.get(id(p))
            v = g.copy() if v is None else self.momentum * v + g
            self.state[id(p)] = v
            g = v
        p.data -= (self.lr * g).astype(p.dtype)


class Adam(Optimizer):
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def _update(self, p):
        st = self.state.get(id(p))
        if st is None:
            st = self.state[id(p)] = [0, np.zeros_like(p.data), np.zeros_like(p.data)]
        st[0] += 1
        t, m, v = st
        g = p.grad
        m *= self.beta1
        m += (1 - self.beta1) * g
        v *= self.beta2
        v += (1 - self.beta2) * g * g
        mhat = m / (1 - self.beta1**t)
        vhat = v / (1 - self.beta2**t)
        p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.dtype)


def make_optimizer(kind, params, lr):
    if kind == "adam":
        return Adam(params, lr)
    if kind == "sgd":
        return SGD(params, lr, momentum=0.9)
    raise ConfigError(f"unknown optimizer {kind!r}")


def global_norm(params):
    return math.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None))


def clip_grad_norm(params, max_norm):
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = global_norm(params)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(scale)
    return norm


class PlateauScheduler:
    """Multiply the learning rate by ``factor`` once the monitored loss has not improved for ``patience`` epochs."""

    def __init__(self, optimizer, factor=0.1, patience=5, min_delta=1e-4, min_lr=0.0):
        self.opt = optimizer
        self.factor, self.patience, self.min_delta, self.min_lr = factor, patience, min_delta, min_lr
        self.best = math.inf
        self.wait = 0

    def step(self, value):
        """Feed one epoch's loss; returns True when the rate was reduced."""
        if value < self.best * (1 - self.min_delta) if self.best > 0 else value < self.best - self.min_delta:
            self.best = value
            self.wait = 0
            return False
        self.wait += 1
        if self.wait >= self.patience:
            self.opt.lr = max(self.opt.lr * self.factor, self.min_lr)
            self.wait = 0
            return True
        return False


# ---------------------------------------------------------------------------
# configs and history
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float = 1e-3
    max_epochs: int = 30
    seed: int = 0
    clip_norm: float = None
    coord_weight: float = 5.0
    obj_weight: float = 1.0
    cls_weight: float = 1.0
    select_iou: float = 0.2
    conf_threshold: float = codec.DEFAULT_CONF_THRESHOLD
    nms_iou: float = codec.DEFAULT_NMS_IOU
    augment: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be non-negative")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive when set")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class StageSchedule:
    """Stage 1 trains the last ``stage1_k`` layers at lr1; stage 2 unfreezes all at lr1/10 with plateau decay."""

    lr1: float = 1e-2
    stage1_epochs: int = 10
    stage1_k: int = 3
    stage2_max_epochs: int = 40
    plateau_factor: float = 0.1
    plateau_patience: int = 5

    def __post_init__(self):
        if not self.lr1 > 0:
            raise ConfigError("lr1 must be positive")

    @property
    def lr2(self):
        return self.lr1 / 10

    @classmethod
    def full_length(cls, lr1=1e-2):
        return cls(lr1=lr1, stage1_epochs=50, stage2_max_epochs=200)


CLIP_PRESETS = {"squeezenet_mini": 0.5}


@dataclass
class History:
    rows: list = field(default_factory=list)
    lr_changes: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    best_epoch: int = None
    best_metric: float = None

    def log(self, epoch, split, loss, metric, lr):
        self.rows.append({"epoch": epoch, "split": split, "loss": loss, "metric": metric, "lr": lr})

    def losses(self, split="train"):
        return [r["loss"] for r in self.rows if r["split"] == split]

    def metrics(self, split="dev"):
        return [r["metric"] for r in self.rows if r["split"] == split]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.DictWriter(buf, ["epoch", "split", "loss", "metric", "lr"], lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def __len__(self):
        return len(self.rows)


def _check_finite(value, step):
    if not math.isfinite(value):
        raise DivergenceError(step, value)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


# ---------------------------------------------------------------------------
# recognition
# ---------------------------------------------------------------------------


def _onehot(labels, k, dtype=np.float32):
    out = np.zeros((len(labels), k), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def predict_recognition(model, samples, batch_size=64):
    model.eval()
    preds = []
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            x = T.Tensor(images_array(samples[i:i + batch_size]))
            preds.append(model.logits(x).data.argmax(axis=-1))
    model.train()
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def _recognition_loss(model, x, y, weights):
    return T.softmax_cross_entropy(model.logits(T.Tensor(x)), y, weights)


def train_recognition(model, dataset, config):
    """Mini-batch training with class-weighted cross-entropy; keeps the best dev macro-F1 weights."""
    history = History()
    if config.max_epochs == 0:
        return model, history
    train, dev = dataset.train, dataset.dev
    if not train:
        raise ConfigError("recognition training needs a non-empty train split")
    k = model.num_classes
    weights = class_weights(dataset).astype(np.float32)
    x_all = images_array(train)
    y_all = _onehot([s.label for s in train], k)
    dev_labels = np.array([s.label for s in dev], dtype=np.int64)
    rng = np.random.default_rng(config.seed)
    params = model.parameters()
    opt = make_optimizer(config.optimizer, params, config.lr)
    best = None
    step = 0
    model.train()
    for epoch in range(1, config.max_epochs + 1):
        total, seen = 0.0, 0
        for idx in _batches(len(train), config.batch_size, rng):
            loss = _recognition_loss(model, x_all[idx], y_all[idx], weights)
            step += 1
            _check_finite(loss.item(), step)
            opt.zero_grad()
            loss.backward()
            if config.clip_norm:
                clip_grad_norm([p for p in params if p.requires_grad], config.clip_norm)
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        history.log(epoch, "train", total / seen, None, opt.lr)
        if dev:
            pred = predict_recognition(model, dev)
            f1 = f1_macro(pred, dev_labels, k)
            with T.no_grad():
                model.eval()
                dl = _recognition_loss(model, images_array(dev), _onehot(dev_labels, k), weights).item()
                model.train()
            history.log(epoch, "dev", dl, f1, opt.lr)
            if best is None or f1 > best[0]:
                best = (f1, epoch, snapshot(model))
    opt.zero_grad()
    if best is not None:
        restore(model, best[2])
        history.best_metric, history.best_epoch = best[0], best[1]
    return model, history


def evaluate_recognition(model, samples, num_classes, class_names=None, dataset=None, partition=None):
    pred = predict_recognition(model, samples)
    tgt = np.array([s.label for s in samples], dtype=np.int64)
    return recognition_report(pred, tgt, num_classes, class_names, dataset, partition)


# ---------------------------------------------------------------------------
# detection
# ---------------------------------------------------------------------------


def craft_anchors(samples, k, seed=0):
    wh = [(a.w, a.h) for s in samples for a in s.annotations]
    return codec.kmeans_anchors(wh, k, seed)


def encode_batch(samples, model):
    s, c = model.grid_size, model.num_classes
    return np.stack([codec.encode_targets(smp.boxes(), s, model.anchors, c) for smp in samples]).astype(np.float32)


def _flip(x, tgt):
    """Horizontal mirror of images and their encoded targets."""
    x = x[:, :, ::-1, :]
    tgt = tgt[:, :, ::-1].copy()
    obj = tgt[..., 4] > 0
    tgt[..., 0] = np.where(obj, 1.0 - tgt[..., 0], 0.0)
    return np.ascontiguousarray(x), tgt


def _detection_loss(model, x, tgt, weights, config):
    raw = model(T.Tensor(x))
    return T.yolo_loss(raw, tgt, model.anchors_per_cell, weights, config.coord_weight,
                       config.obj_weight, config.cls_weight)


def predict_detection(model, samples, conf_threshold=codec.DEFAULT_CONF_THRESHOLD, nms_iou=codec.DEFAULT_NMS_IOU,
                      batch_size=32):
    dets = []
    model.eval()
    with T.no_grad():
        for i in range(0, len(samples), batch_size):
            chunk = samples[i:i + batch_size]
            raw = model(T.Tensor(images_array(chunk))).data
            dets.extend(codec.postprocess(raw, model.anchors, conf_threshold, nms_iou, [s.sample_id for s in chunk]))
    model.train()
    return dets


def ground_truth(samples):
    return [(s.sample_id, b) for s in samples for b in s.boxes()]


def evaluate_detection(model, samples, thresholds=DEFAULT_IOU_THRESHOLDS, class_names=None, dataset=None,
                       partition=None, conf_threshold=codec.DEFAULT_CONF_THRESHOLD, nms_iou=codec.DEFAULT_NMS_IOU):
    dets = predict_detection(model, samples, conf_threshold, nms_iou)
    return map_at(dets, ground_truth(samples), thresholds, class_names, dataset, partition)


def _dev_loss(model, x, tgt, weights, config, batch_size=64):
    total = 0.0
    model.eval()
    with T.no_grad():
        for i in range(0, len(x), batch_size):
            total += _detection_loss(model, x[i:i + batch_size], tgt[i:i + batch_size], weights, config).item() * len(x[i:i + batch_size])
    model.train()
    return total / max(len(x), 1)


def _run_detection_epochs(model, state, epochs, opt, config, plateau=None, stage=""):
    """Shared epoch loop; ``state`` carries data arrays, rng, history, best snapshot and counters."""
    hist = state["history"]
    for _ in range(epochs):
        state["epoch"] += 1
        epoch = state["epoch"]
        trainable = [p for p in model.parameters() if p.requires_grad]
        total, seen = 0.0, 0
        for idx in _batches(len(state["x"]), config.batch_size, state["rng"]):
            x, tgt = state["x"][idx], state["tgt"][idx]
            if config.augment and state["rng"].random() < 0.5:
                x, tgt = _flip(x, tgt)
            loss = _detection_loss(model, x, tgt, state["weights"], config)
            state["step"] += 1
            _check_finite(loss.item(), state["step"])
            opt.zero_grad()
            loss.backward()
            if config.clip_norm:
                clip_grad_norm(trainable, config.clip_norm)
                hist.grad_norms.append(global_norm(trainable))
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        hist.log(epoch, "train", total / seen, None, opt.lr)
        if state["dev"]:
            dl = _dev_loss(model, state["dev_x"], state["dev_tgt"], state["weights"], config)
            rep = evaluate_detection(model, state["dev"], (config.select_iou,), conf_threshold=config.conf_threshold,
                                     nms_iou=config.nms_iou)
            metric = rep.map_at(config.select_iou)
            hist.log(epoch, "dev", dl, metric, opt.lr)
            if state["best"] is None or metric > state["best"][0]:
                state["best"] = (metric, epoch, snapshot(model))
            if plateau is not None:
                old = opt.lr
                if plateau.step(dl):
                    hist.lr_changes.append({"epoch": epoch, "old": old, "new": opt.lr, "stage": stage})
                    log.info("epoch %d: lr %.3g -> %.3g", epoch, old, opt.lr)
    opt.zero_grad()


def _detection_state(model, dataset, config):
    train, dev = dataset.train, dataset.dev
    if not train:
        raise ConfigError("detection training needs a non-empty train split")
    state = {
        "x": images_array(train), "tgt": encode_batch(train, model),
        "dev": dev, "weights": class_weights(dataset).astype(np.float32),
        "rng": np.random.default_rng(config.seed), "history": History(),
        "best": None, "epoch": 0, "step": 0,
    }
    if dev:
        state["dev_x"], state["dev_tgt"] = images_array(dev), encode_batch(dev, model)
    return state


def _finish(model, state):
    hist = state["history"]
    if state["best"] is not None:
        restore(model, state["best"][2])
        hist.best_metric, hist.best_epoch = state["best"][0], state["best"][1]
    apply_freeze(model, FreezePolicy("none"))
    return model, hist


def train_detection(model, dataset, schedule, config):
    """Two-stage schedule: last-k layers at lr1, then everything at lr1/10 with plateau decay."""
    state = _detection_state(model, dataset, config)
    params = model.parameters()
    if schedule.stage1_epochs:
        apply_freeze(model, FreezePolicy("all_but_last_k", schedule.stage1_k))
        opt = make_optimizer(config.optimizer, params, schedule.lr1)
        _run_detection_epochs(model, state, schedule.stage1_epochs, opt, config, stage="stage1")
    apply_freeze(model, FreezePolicy("none"))
    opt = make_optimizer(config.optimizer, params, schedule.lr2)
    if state["history"].rows:
        state["history"].lr_changes.append({"epoch": state["epoch"], "old": schedule.lr1, "new": schedule.lr2,
                                            "stage": "stage2"})
    plateau = PlateauScheduler(opt, schedule.plateau_factor, schedule.plateau_patience)
    _run_detection_epochs(model, state, schedule.stage2_max_epochs, opt, config, plateau, stage="stage2")
    return _finish(model, state)


def fine_tune_detection(model, dataset, schedule, config):
    """Stage-2-style continuation of an already trained model on ``dataset``."""
    state = _detection_state(model, dataset, config)
    apply_freeze(model, getattr(model, "fine_tune_policy", FreezePolicy("none")))
    opt = make_optimizer(config.optimizer, model.parameters(), schedule.lr2)
    plateau = PlateauScheduler(opt, schedule.plateau_factor, schedule.plateau_patience)
    _run_detection_epochs(model, state, schedule.stage2_max_epochs, opt, config, plateau, stage="fine_tune")
    return _finish(model, state)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def model_arch(model):
    if hasattr(model, "backbone_kind"):
        return {"task": "detection", "backbone": model.backbone_kind, "grid_size": model.grid_size,
                "anchors": model.anchors.tolist(), "num_classes": model.num_classes,
                "input_size": model.input_size, "width": model.width, "max_channels": model.max_channels}
    return {"task": "recognition", "head": model.head_kind, "num_classes": model.num_classes,
            "input_size": model.input_size, "width_factor": model.width_factor}


def build_from_arch(arch, seed=0):
    if arch["task"] == "detection":
        return build_detection(arch["backbone"], arch["grid_size"], arch["anchors"], arch["num_classes"],
                               arch["input_size"], arch.get("width", 8), arch.get("max_channels", 64), seed)
    return build_recognition(arch["head"], arch["num_classes"], width_factor=arch["width_factor"],
                             input_size=arch["input_size"], seed=seed)


def save_checkpoint(model, path, **meta):
    """Weights in the binary container plus ``<path>.json`` with architecture and run metadata."""
    save_weights(model, path)
    doc = {"arch": model_arch(model), **meta}
    with open(path + ".json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def load_checkpoint(path):
    with open(path + ".json") as fh:
        meta = json.load(fh)
    model = build_from_arch(meta["arch"])
    load_weights(model, path)
    return model, meta


# ---------------------------------------------------------------------------
# experiment modes
# ---------------------------------------------------------------------------


@dataclass
class DetectionSetup:
    backbone: str = "darknet_mini"
    grid_size: int = 4
    anchors_per_cell: int = 3
    input_size: int = None
    width: int = 8
    max_channels: int = 64
    anchor_seed: int = 0


@dataclass
class ExperimentMode:
    """One adaptation run: train on ``source`` (+X% of ``target``) and score on ``target``."""

    mode: str
    source: DomainDataset
    target: DomainDataset
    fraction: float = 100.0
    checkpoint: object = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not 0 <= self.fraction <= 100:
            raise ConfigError(f"fraction {self.fraction} outside [0, 100]")
        if self.mode == "fine_tune" and self.checkpoint is None:
            raise ConfigError("fine_tune needs a source-trained checkpoint")


def new_detector(setup, train_samples, num_classes, seed):
    anchors = craft_anchors(train_samples, setup.anchors_per_cell, setup.anchor_seed).pairs
    return build_detection(setup.backbone, setup.grid_size, anchors, num_classes, setup.input_size,
                           setup.width, setup.max_channels, seed)


def _resolve_checkpoint(ckpt):
    if isinstance(ckpt, str):
        model, _ = load_checkpoint(ckpt)
        return model
    return ckpt


def run_experiment(mode, setup, schedule, config, thresholds=DEFAULT_IOU_THRESHOLDS):
    """Train per ``mode`` and score on the target domain's dev and test splits.

    Returns (model, history, {"dev": EvalReport, "test": EvalReport}).
    """
    target = mode.target
    k = target.num_classes
    if mode.mode == "target_only":
        data = target.with_samples(target.train + target.dev + target.test, f"{target.domain_id}-only")
        model = new_detector(setup, data.train, k, config.seed)
        model, hist = train_detection(model, data, schedule, config)
        label = f"{target.domain_id} -> {target.domain_id}"
    elif mode.mode == "joint":
        data = inject(InjectionSchedule(mode.source, target, mode.fraction, config.seed))
        model = new_detector(setup, data.train, k, config.seed)
        model, hist = train_detection(model, data, schedule, config)
        label = f"{mode.source.domain_id} JL {mode.fraction:g} {target.domain_id} -> {target.domain_id}"
    else:
        model = _resolve_checkpoint(mode.checkpoint)
        data = inject(InjectionSchedule(target.with_samples([]), target, mode.fraction, config.seed))
        model, hist = fine_tune_detection(model, data, schedule, config)
        label = f"{mode.source.domain_id} FT {mode.fraction:g} {target.domain_id} -> {target.domain_id}"
    reports = {}
    for part in ("dev", "test"):
        samples = target.split(part)
        if samples:
            reports[part] = evaluate_detection(model, samples, thresholds, target.class_names, label, part,
                                               config.conf_threshold, config.nms_iou)
    return model, hist, reports


def run_mode_grid(source, target, setup, schedule, config, fractions=(0, 50, 100), ft_fraction=100,
                  thresholds=DEFAULT_IOU_THRESHOLDS):
    """Joint learning at each fraction, fine-tuning from the joint(0) model, and a target-only baseline.

    joint(0) is training on the source alone, so its model doubles as the
    fine-tuning starting point. Returns a list of row dicts with keys
    ``mode``, ``fraction``, ``label`` and ``reports``.
    """
    rows = []
    source_model = None
    for x in sorted(set(fractions) | {0}):
        model, _, reports = run_experiment(ExperimentMode("joint", source, target, x), setup, schedule, config,
                                           thresholds)
        if x == 0:
            source_model = model
        if x in fractions:
            rows.append({"mode": "joint", "fraction": x, "label": f"JL {x:g}", "reports": reports})
    _, _, reports = run_experiment(ExperimentMode("fine_tune", source, target, ft_fraction, source_model), setup,
                                   schedule, config, thresholds)
    rows.append({"mode": "fine_tune", "fraction": ft_fraction, "label": f"FT {ft_fraction:g}", "reports": reports})
    _, _, reports = run_experiment(ExperimentMode("target_only", source, target), setup, schedule, config, thresholds)
    rows.append({"mode": "target_only", "fraction": None, "label": "target only", "reports": reports})
    return rows


def train_source(source, setup, schedule, config):
    """Source-only model used as the fine-tuning starting point."""
    model = new_detector(setup, source.train, source.num_classes, config.seed)
    model, _ = train_detection(model, source, schedule, config)
    return model


# ---------------------------------------------------------------------------
# hyperparameter search
# ---------------------------------------------------------------------------


def hyperparameter_grid(space, evaluate, base=None):
    """Exhaustive search; ``evaluate(config) -> dev metric``.

    Runs that diverge are logged and excluded. Ties prefer the smaller lr,
    then the smaller batch size. Returns (best_config, log_rows).
    """
    base = dict(base or {})
    keys = sorted(space)
    if not keys or any(len(space[k]) == 0 for k in keys):
        raise ConfigError("hyperparameter grid is empty")
    rows = []
    for combo in itertools.product(*(space[k] for k in keys)):
        cfg = {**base, **dict(zip(keys, combo))}
        try:
            metric = float(evaluate(cfg))
            if not math.isfinite(metric):
                raise DivergenceError(-1, metric)
        except DivergenceError as exc:
            log.warning("config %s diverged: %s", cfg, exc)
            rows.append({"config": cfg, "metric": None, "diverged": True})
            continue
        rows.append({"config": cfg, "metric": metric, "diverged": False})
    ok = [r for r in rows if not r["diverged"]]
    if not ok:
        raise ConfigError("every configuration in the grid diverged")
    best = min(ok, key=lambda r: (-r["metric"], r["config"].get("lr", 0), r["config"].get("batch_size", 0)))
    return best["config"], rows


def config_dict(cfg):
    return asdict(cfg)


def write_history(history, path):
    with open(path, "w") as fh:
        fh.write(history.to_csv())


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
