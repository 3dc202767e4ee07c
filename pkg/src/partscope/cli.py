"""Command-line entry point: ``partscope <command> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training divergence.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields

from . import __version__
from .codec import BoundingBox, Detection
from .data import (load_dataset, save_dataset, stratified_split, synth_generate, write_index_splits)
from .errors import ConfigError, DataError, DivergenceError, ParseError, PartscopeError
from .metrics import map_at
from .models import build_recognition
from .train import (DetectionSetup, ExperimentMode, StageSchedule, TrainConfig, evaluate_detection,
                    evaluate_recognition, craft_anchors, ground_truth, run_experiment, save_checkpoint,
                    train_detection, train_recognition, write_history, new_detector)

log = logging.getLogger("partscope")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
MODE_ALIASES = {"target_only": "target_only", "ft": "fine_tune", "jl": "joint"}


@dataclass
class RunManifest:
    command: str
    config_path: str
    config: dict
    seed: int
    out_dir: str
    version: str = __version__

    def write(self):
        os.makedirs(self.out_dir, exist_ok=True)
        path = os.path.join(self.out_dir, "manifest.json")
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
        return path


def apply_thread_cap():
    """Honour GOCARD_THREADS by capping the BLAS worker pool (the numba kernels are serial)."""
    raw = os.environ.get("GOCARD_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"GOCARD_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("GOCARD_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _parse_floats(text, name):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"--{name} expects comma-separated numbers, got {text!r}") from None


def _read_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    with open(path) as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def _build(cls, section, name):
    section = dict(section or {})
    known = {f.name for f in fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"bad '{name}' section: {exc}") from None


def _require(cfg, key):
    if key not in cfg:
        raise ConfigError(f"config is missing required key {key!r}")
    return cfg[key]


def _resolve(cfg, config_path, key):
    """Paths inside a config are relative to the config file."""
    value = cfg.get(key)
    if value is None or os.path.isabs(value):
        return value
    return os.path.join(os.path.dirname(os.path.abspath(config_path)), value)


def _write_text(path, text):
    with open(path, "w") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args):
    ds = synth_generate(args.domain, args.n, args.classes, args.size, args.seed, task=args.task)
    path = save_dataset(ds, args.out)
    print(path)
    return EXIT_OK


def cmd_anchors(args):
    ds = load_dataset(args.index, load_images=False)
    pool = ds.train or ds.samples
    anchors = craft_anchors(pool, args.k, args.seed)
    print(json.dumps({"anchors": anchors.pairs.tolist(), "cost_history": list(anchors.cost_history)}))
    return EXIT_OK


def cmd_split(args):
    ratios = _parse_floats(args.ratios, "ratios")
    ds = load_dataset(args.index, load_images=False)
    out = stratified_split(ds, ratios, args.seed)
    write_index_splits(args.index, out)
    counts = {name: len(out.split(name)) for name in ("train", "dev", "test")}
    print(json.dumps(counts, sort_keys=True))
    return EXIT_OK


def _save_reports(out_dir, reports, stem="report"):
    for part, rep in reports.items():
        _write_text(os.path.join(out_dir, f"{stem}_{part}.json"), rep.to_json() + "\n")
        if rep.thresholds:
            _write_text(os.path.join(out_dir, f"{stem}_{part}_pr.csv"), rep.pr_csv())
            print(f"{part}: {rep.table_row()}")
        else:
            print(f"{part}: macro-F1 {100 * rep.macro_f1:.2f}")


def cmd_train(args):
    cfg = _read_config(args.config)
    index = _resolve(cfg, args.config, "index")
    if index is None:
        raise ConfigError("config is missing required key 'index'")
    out_dir = args.out or _resolve(cfg, args.config, "out") or "run"
    seed = int(cfg.get("seed", 0))
    tcfg = _build(TrainConfig, {**cfg.get("train", {}), "seed": seed}, "train")
    RunManifest("train " + args.task, os.path.abspath(args.config), cfg, seed, out_dir).write()
    ds = load_dataset(index)
    if args.task == "recognition":
        if ds.task != "recognition":
            raise DataError(f"{index} holds detection samples")
        mcfg = dict(cfg.get("model", {}))
        model = build_recognition(mcfg.get("head", "FULL"), ds.num_classes,
                                  width_factor=mcfg.get("width_factor", 1 / 8),
                                  input_size=ds.samples[0].image.shape[0], seed=seed)
        model, hist = train_recognition(model, ds, tcfg)
        reports = {p: evaluate_recognition(model, ds.split(p), ds.num_classes, ds.class_names, ds.domain_id, p)
                   for p in ("dev", "test") if ds.split(p)}
    else:
        setup = _build(DetectionSetup, cfg.get("model", {}), "model")
        if setup.input_size is None:
            setup.input_size = ds.samples[0].image.shape[0]
        schedule = _build(StageSchedule, cfg.get("schedule", {}), "schedule")
        model = new_detector(setup, ds.train, ds.num_classes, seed)
        model, hist = train_detection(model, ds, schedule, tcfg)
        reports = {p: evaluate_detection(model, ds.split(p), class_names=ds.class_names, dataset=ds.domain_id,
                                         partition=p, conf_threshold=tcfg.conf_threshold, nms_iou=tcfg.nms_iou)
                   for p in ("dev", "test") if ds.split(p)}
    save_checkpoint(model, os.path.join(out_dir, "model.gcrd"), epoch=hist.best_epoch, dev_metric=hist.best_metric,
                    lr=hist.rows[-1]["lr"] if hist.rows else tcfg.lr, seed=seed, mode="train " + args.task)
    write_history(hist, os.path.join(out_dir, "history.csv"))
    _save_reports(out_dir, reports)
    return EXIT_OK


def cmd_experiment(args):
    if not 0 <= args.fraction <= 100:
        raise ConfigError(f"--fraction {args.fraction} outside [0, 100]")
    cfg = _read_config(args.config)
    mode = MODE_ALIASES[args.mode]
    target_index = _resolve(cfg, args.config, "target_index")
    source_index = _resolve(cfg, args.config, "source_index")
    if target_index is None:
        raise ConfigError("config is missing required key 'target_index'")
    if mode != "target_only" and source_index is None:
        raise ConfigError(f"mode {args.mode} needs 'source_index'")
    checkpoint = _resolve(cfg, args.config, "checkpoint")
    if mode == "fine_tune" and (checkpoint is None or not os.path.exists(checkpoint)):
        raise ConfigError("ft mode needs an existing source 'checkpoint'")
    seed = int(cfg.get("seed", 0))
    out_dir = args.out or _resolve(cfg, args.config, "out") or "experiment"
    tcfg = _build(TrainConfig, {**cfg.get("train", {}), "seed": seed}, "train")
    setup = _build(DetectionSetup, cfg.get("model", {}), "model")
    schedule = _build(StageSchedule, cfg.get("schedule", {}), "schedule")
    RunManifest(f"experiment {args.mode} {args.fraction:g}", os.path.abspath(args.config), cfg, seed,
                out_dir).write()
    target = load_dataset(target_index)
    source = load_dataset(source_index) if source_index else target
    if setup.input_size is None:
        setup.input_size = target.samples[0].image.shape[0]
    em = ExperimentMode(mode, source, target, args.fraction, checkpoint)
    model, hist, reports = run_experiment(em, setup, schedule, tcfg)
    save_checkpoint(model, os.path.join(out_dir, "model.gcrd"), epoch=hist.best_epoch, dev_metric=hist.best_metric,
                    lr=hist.rows[-1]["lr"] if hist.rows else schedule.lr1, seed=seed, mode=f"{mode} {args.fraction:g}")
    write_history(hist, os.path.join(out_dir, "history.csv"))
    _save_reports(out_dir, reports, stem=f"report_{args.mode}_{args.fraction:g}")
    return EXIT_OK


def read_predictions(path):
    """Lines of ``sample_id class_id confidence cx cy w h``."""
    dets = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            if len(tok) != 7:
                raise ParseError(path, lineno, "expected 'sample_id class_id confidence cx cy w h'")
            try:
                c, conf = int(tok[1]), float(tok[2])
                cx, cy, w, h = (float(t) for t in tok[3:])
                box = BoundingBox.from_center(cx, cy, w, h, c)
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            dets.append(Detection(box, c, conf, tok[0]))
    return dets


def cmd_eval(args):
    thresholds = _parse_floats(args.iou, "iou")
    if not thresholds or any(not 0 <= t < 1 for t in thresholds):
        raise ConfigError("--iou thresholds must lie in [0, 1)")
    ds = load_dataset(args.gt, load_images=False)
    samples = ds.split(args.partition) if args.partition else ds.samples
    if not samples:
        raise DataError(f"no ground-truth samples for partition {args.partition!r}")
    ids = {s.sample_id for s in samples}
    dets = [d for d in read_predictions(args.pred) if d.sample_id in ids]
    report = map_at(dets, ground_truth(samples), thresholds, ds.class_names, ds.domain_id, args.partition)
    os.makedirs(args.out, exist_ok=True)
    _write_text(os.path.join(args.out, "report.json"), report.to_json() + "\n")
    _write_text(os.path.join(args.out, "pr_curve.csv"), report.pr_csv())
    _write_text(os.path.join(args.out, "table_row.txt"), report.table_row() + "\n")
    print(report.table_row())
    return EXIT_OK


def cmd_rerun(args):
    with open(args.manifest) as fh:
        manifest = json.load(fh)
    words = manifest["command"].split()
    if words[0] == "train":
        ns = argparse.Namespace(task=words[1], config=manifest["config_path"], out=manifest["out_dir"])
        return cmd_train(ns)
    if words[0] == "experiment":
        ns = argparse.Namespace(mode=words[1], fraction=float(words[2]), config=manifest["config_path"],
                                out=manifest["out_dir"])
        return cmd_experiment(ns)
    raise ConfigError(f"cannot rerun command {manifest['command']!r}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="partscope", description="Part recognition and detection toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic clean or occluded dataset")
    s.add_argument("--domain", choices=("clean", "occluded"), required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--classes", type=int, required=True)
    s.add_argument("--size", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--task", choices=("detection", "recognition"), default="detection")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("anchors", help="k-means anchors (IoU distance) from an index's train split")
    s.add_argument("--index", required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_anchors)

    s = sub.add_parser("split", help="stratified train/dev/test assignment, written back into the index")
    s.add_argument("--index", required=True)
    s.add_argument("--ratios", default="80,10,10")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_split)

    s = sub.add_parser("train", help="train a recognition or detection model from a JSON config")
    s.add_argument("--task", choices=("recognition", "detection"), required=True)
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("experiment", help="domain-adaptation run: target-only, fine-tune or joint learning")
    s.add_argument("--mode", choices=tuple(MODE_ALIASES), required=True)
    s.add_argument("--fraction", type=float, default=100.0, help="percent of the target train split (ft/jl)")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("eval", help="score a prediction file against an index")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.add_argument("--iou", default="0.2,0.4,0.5")
    s.add_argument("--partition", choices=("train", "dev", "test"))
    s.add_argument("--out", default="eval")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("rerun", help="repeat a train/experiment run from its manifest")
    s.add_argument("manifest")
    s.set_defaults(func=cmd_rerun)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        limiter = apply_thread_cap()
        try:
            return args.func(args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PartscopeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
