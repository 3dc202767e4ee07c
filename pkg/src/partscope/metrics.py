"""Scoring: macro-F1 for recognition, matching / AP / mAP for detection."""

import csv
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .codec import iou_matrix
from .errors import DataError

DEFAULT_IOU_THRESHOLDS = (0.2, 0.4, 0.5)


def confusion_matrix(predictions, targets, num_classes):
    pred = np.asarray(predictions, dtype=np.int64)
    tgt = np.asarray(targets, dtype=np.int64)
    if pred.shape != tgt.shape:
        raise DataError(f"{len(pred)} predictions vs {len(tgt)} targets")
    for name, arr in (("prediction", pred), ("target", tgt)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise DataError(f"{name} class id outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (tgt, pred), 1)
    return cm


def f1_macro(predictions, targets, num_classes):
    """Unweighted mean of 2TP/(2TP+FP+FN) over classes seen in targets or predictions."""
    cm = confusion_matrix(predictions, targets, num_classes)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    present = denom > 0
    if not present.any():
        return 0.0
    return float(np.mean(2 * tp[present] / denom[present]))


# ---------------------------------------------------------------------------
# detection matching
# ---------------------------------------------------------------------------


@dataclass
class ConfusionCounts:
    tp: dict = field(default_factory=dict)
    fp: dict = field(default_factory=dict)
    fn: dict = field(default_factory=dict)
    n_gt: dict = field(default_factory=dict)


def _group_gt(ground_truth):
    """``ground_truth`` is an iterable of (sample_id, BoundingBox)."""
    by_key = defaultdict(list)
    for sid, box in ground_truth:
        by_key[(sid, box.class_id)].append(box)
    return by_key


def match_detections(detections, ground_truth, iou_threshold):
    """Greedy VOC-style matching.

    Per class, detections are visited by descending confidence (stable on
    input order). A detection is a TP when its best-IoU unmatched GT of the
    same class and image exceeds the threshold; that GT is then consumed.
    Returns (counts, flags) with one boolean TP flag per input detection.
    """
    gts = _group_gt(ground_truth)
    gt_arrays = {k: np.array([b.as_array() for b in v]) for k, v in gts.items()}
    used = {k: np.zeros(len(v), dtype=bool) for k, v in gts.items()}
    order = sorted(range(len(detections)), key=lambda i: -detections[i].confidence)
    flags = [False] * len(detections)
    counts = ConfusionCounts()
    classes = {c for _, c in gts} | {d.class_id for d in detections}
    for c in classes:
        counts.tp[c] = counts.fp[c] = 0
        counts.n_gt[c] = sum(len(v) for (_, cc), v in gts.items() if cc == c)
    for i in order:
        d = detections[i]
        key = (d.sample_id, d.class_id)
        hit = False
        if key in gt_arrays:
            ious = iou_matrix(d.box.as_array(), gt_arrays[key])[0]
            ious[used[key]] = -1.0
            j = int(np.argmax(ious))
            if ious[j] > iou_threshold:
                used[key][j] = True
                hit = True
        flags[i] = hit
        counts.tp[d.class_id] += hit
        counts.fp[d.class_id] += not hit
    for c in classes:
        counts.fn[c] = counts.n_gt[c] - counts.tp[c]
    return counts, flags


def pr_points(flags_ranked, n_gt):
    """(recall, precision) after each detection of a confidence-ranked TP/FP list."""
    f = np.asarray(flags_ranked, dtype=np.float64)
    tp = np.cumsum(f)
    fp = np.cumsum(1.0 - f)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).tiny)
    return recall, precision


def average_precision(flags_ranked, n_gt):
    """All-point interpolated AP from a ranked TP/FP list; None when the class has no GT."""
    if n_gt <= 0:
        return None
    if len(flags_ranked) == 0:
        return 0.0
    recall, precision = pr_points(flags_ranked, n_gt)
    interp = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * interp))


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    thresholds: dict
    per_class: dict
    macro_f1: float = None
    dataset: str = None
    partition: str = None
    pr_curves: dict = field(default_factory=dict, repr=False)

    def map_at(self, threshold):
        return self.thresholds[_key(threshold)]["map"]

    def to_dict(self):
        return {"thresholds": self.thresholds, "per_class": self.per_class, "macro_f1": self.macro_f1,
                "dataset": self.dataset, "partition": self.partition}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def pr_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iou_threshold", "class_id", "rank", "recall", "precision"])
        for thr in sorted(self.pr_curves):
            for c in sorted(self.pr_curves[thr]):
                for rank, (r, p) in enumerate(self.pr_curves[thr][c]):
                    w.writerow([thr, c, rank, f"{r:.10g}", f"{p:.10g}"])
        return buf.getvalue()

    def table_row(self):
        """Three-threshold mAP row in percent, lowest threshold first."""
        keys = sorted(self.thresholds, key=float)
        return " | ".join(f">{k}: {100 * self.thresholds[k]['map']:.2f}" for k in keys)


def _key(threshold):
    return f"{float(threshold):g}"


def map_at(detections, ground_truth, thresholds=DEFAULT_IOU_THRESHOLDS, class_names=None,
           dataset=None, partition=None):
    """Per-threshold mAP over classes with at least one GT, with per-class TP/FP shares among predictions."""
    ground_truth = list(ground_truth)
    if not ground_truth:
        raise DataError("cannot score against an empty ground-truth set")
    gt_classes = sorted({b.class_id for _, b in ground_truth})
    all_classes = sorted(set(gt_classes) | {d.class_id for d in detections})
    if class_names is not None:
        all_classes = sorted(set(all_classes) | set(range(len(class_names))))
    report = EvalReport(thresholds={}, per_class={}, dataset=dataset, partition=partition)
    for thr in thresholds:
        counts, flags = match_detections(detections, ground_truth, thr)
        by_class = defaultdict(list)
        for i, d in enumerate(detections):
            by_class[d.class_id].append(i)
        aps, per_class, curves, unscored = {}, {}, {}, []
        for c in all_classes:
            idx = sorted(by_class.get(c, []), key=lambda i: -detections[i].confidence)
            ranked = [flags[i] for i in idx]
            n_gt = counts.n_gt.get(c, 0)
            ap = average_precision(ranked, n_gt)
            tp, fp = counts.tp.get(c, 0), counts.fp.get(c, 0)
            n_pred = tp + fp
            entry = {"ap": ap, "tp": tp, "fp": fp, "fn": n_gt - tp, "n_gt": n_gt,
                     "tp_share": tp / n_pred if n_pred else None,
                     "fp_share": fp / n_pred if n_pred else None}
            if class_names is not None and c < len(class_names):
                entry["name"] = class_names[c]
            per_class[str(c)] = entry
            if ap is None:
                unscored.append(c)
            else:
                aps[c] = ap
                if ranked:
                    r, p = pr_points(ranked, n_gt)
                    curves[c] = list(zip(r.tolist(), p.tolist()))
        report.thresholds[_key(thr)] = {
            "map": float(np.mean(list(aps.values()))),
            "per_class": per_class,
            "unscored": unscored,
        }
        report.pr_curves[_key(thr)] = curves
    first = report.thresholds[_key(thresholds[0])]["per_class"]
    report.per_class = {c: {k: v for k, v in e.items() if k in ("n_gt", "name")} for c, e in first.items()}
    return report


def recognition_report(predictions, targets, num_classes, class_names=None, dataset=None, partition=None):
    cm = confusion_matrix(predictions, targets, num_classes)
    per_class = {}
    for c in range(num_classes):
        tp = int(cm[c, c])
        fp = int(cm[:, c].sum() - tp)
        fn = int(cm[c, :].sum() - tp)
        entry = {"tp": tp, "fp": fp, "fn": fn, "n_gt": tp + fn,
                 "f1": (2 * tp / (2 * tp + fp + fn)) if (2 * tp + fp + fn) else None}
        if class_names is not None:
            entry["name"] = class_names[c]
        per_class[str(c)] = entry
    return EvalReport(thresholds={}, per_class=per_class, macro_f1=f1_macro(predictions, targets, num_classes),
                      dataset=dataset, partition=partition)


_COUNTS = {"type": "integer", "minimum": 0}
_SHARE = {"type": ["number", "null"], "minimum": 0, "maximum": 1}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["thresholds", "per_class", "macro_f1"],
    "properties": {
        "thresholds": {
            "type": "object",
            "patternProperties": {
                r"^[0-9.]+$": {
                    "type": "object",
                    "required": ["map", "per_class", "unscored"],
                    "properties": {
                        "map": {"type": "number", "minimum": 0, "maximum": 1},
                        "unscored": {"type": "array", "items": {"type": "integer"}},
                        "per_class": {
                            "type": "object",
                            "additionalProperties": {
                                "type": "object",
                                "required": ["ap", "tp", "fp", "fn", "n_gt"],
                                "properties": {
                                    "ap": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                                    "tp": _COUNTS, "fp": _COUNTS, "fn": _COUNTS, "n_gt": _COUNTS,
                                    "tp_share": _SHARE, "fp_share": _SHARE,
                                    "name": {"type": "string"},
                                },
                            },
                        },
                    },
                }
            },
            "additionalProperties": False,
        },
        "per_class": {"type": "object"},
        "macro_f1": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "dataset": {"type": ["string", "null"]},
        "partition": {"type": ["string", "null"]},
    },
}


def validate_report(doc):
    """Raise jsonschema.ValidationError when ``doc`` does not follow REPORT_SCHEMA."""
    import jsonschema

    jsonschema.validate(doc, REPORT_SCHEMA)
