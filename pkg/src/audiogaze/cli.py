"""Command-line entry point: gen, train, eval, rollout, analyze, ablate.

Every command writes its outputs plus one ``run_manifest.json`` into ``--out``.
Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.
"""

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import data, metrics, synthetic
from .dynamics import FREE, TEACHER, predict, rollout_to_json, rollout
from . import diffcore as dc
from .errors import AudioGazeError, ConfigError, DivergedLoss
from .model import VARIANTS, ModelConfig
from .training import (Checkpoint, MetricOptions, SceneCache, TrainConfig, Trainer,
                       evaluate, run_ablation)

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3
CONFIG_SECTIONS = ("synthetic", "model", "train", "metrics")
LOG_FIELDS = ("epoch", "stage", "train_loss", "val_loss", "alpha")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# helpers -----------------------------------------------------------------------

def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def load_config(path):
    """Sectioned JSON overrides: {"synthetic": {...}, "model": {...}, ...}."""
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(doc) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}; "
                          f"expected some of {CONFIG_SECTIONS}")
    return doc


def _metric_options(cfg):
    d = dict(cfg.get("metrics", {}))
    if "scanmatch_grid" in d:
        d["scanmatch_grid"] = tuple(d["scanmatch_grid"])
    try:
        return MetricOptions(**d)
    except TypeError as exc:
        raise ConfigError(f"bad metrics config: {exc}") from exc


def _train_config(cfg, args):
    d = dict(cfg.get("train", {}))
    if args.seed is not None:
        d["seed"] = args.seed
    if getattr(args, "stage", None):
        d["stage"] = args.stage
    return TrainConfig.from_dict(d)


def _model_config(cfg, dataset):
    d = {"embed_dim": dataset.bundles[0].embed_dim} | dict(cfg.get("model", {}))
    return ModelConfig.from_dict(d)


def write_json(path, doc):
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def write_run_manifest(out, command, config, seed, inputs, outputs, started):
    out = Path(out)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(Path(p).relative_to(out)) for p in outputs],
        "wall_clock_s": time.time() - started,
        "hashes": {str(Path(p).relative_to(out)): sha256(p) for p in outputs},
    }
    write_json(out / "run_manifest.json", manifest)
    return manifest


def _load_checkpoint(path):
    try:
        return Checkpoint.load(path)
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from exc


# commands ------------------------------------------------------------------------

def cmd_gen(args, cfg):
    d = dict(cfg.get("synthetic", {}))
    for key, flag in (("n_scenes", "scenes"), ("seed", "seed"), ("subjects", "subjects")):
        if getattr(args, flag) is not None:
            d[key] = getattr(args, flag)
    scfg = synthetic.SynthConfig.from_dict(d)
    out = Path(args.out)
    scene_dir = out / "scenes"
    scene_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for b in synthetic.generate(scfg):
        p = scene_dir / f"{b.scene_id}.json"
        data.save_bundle(b, p)
        paths.append(p)
    manifest = out / "manifest.json"
    data.save_manifest(paths, scfg.seed, manifest)
    return {"synthetic": scfg.to_dict()}, scfg.seed, [], paths + [manifest]


def _write_log(path, curves):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in curves:
            w.writerow({k: metrics.format_cell(v) for k, v in row.items()})


def cmd_train(args, cfg):
    dataset = data.load_dataset(args.dataset)
    if args.resume:
        ckpt = _load_checkpoint(args.resume)
        trainer = Trainer.resume(dataset, ckpt)
    else:
        tcfg = _train_config(cfg, args)
        trainer = Trainer(dataset, tcfg, _model_config(cfg, dataset))
    remaining = args.stop_after
    while not trainer.done and (remaining is None or remaining > 0):
        trainer.step()
        if remaining is not None:
            remaining -= 1
    res = trainer.result()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "best.json", out / "stage1.json", out / "last.json", out / "train_log.csv"]
    res.best.save(paths[0])
    res.stage1.save(paths[1])
    res.last.save(paths[2])
    _write_log(paths[3], res.last.curves)
    inputs = [args.dataset] + ([args.resume] if args.resume else [])
    config = {"train": trainer.cfg.to_dict(), "model": trainer.params.config.to_dict()}
    return config, trainer.cfg.seed, inputs, paths


def cmd_eval(args, cfg):
    dataset = data.load_dataset(args.dataset)
    ckpt = _load_checkpoint(args.checkpoint)
    tc = TrainConfig.from_dict(ckpt.train_config) if ckpt.train_config else TrainConfig()
    cache = SceneCache(tc.bandwidth_floor, tc.grid_res)
    opts = _metric_options(cfg)
    report = evaluate(ckpt, dataset.part(args.split), cache, opts)
    report["split"] = args.split
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "metrics.json"
    write_json(path, report)
    print(json.dumps(report["aggregate"], sort_keys=True))
    return {"metrics": vars(opts) | {"scanmatch_grid": list(opts.scanmatch_grid)}}, None, \
        [args.checkpoint, args.dataset], [path]


def cmd_rollout(args, cfg):
    dataset = data.load_dataset(args.dataset)
    ckpt = _load_checkpoint(args.checkpoint)
    try:
        scene = dataset.by_id(args.scene)
    except KeyError:
        raise ConfigError(f"scene {args.scene!r} is not in the dataset") from None
    if args.mode == TEACHER:
        if args.subject is None:
            raise UsageError("--mode teacher_forced requires --subject")
        ids = [t.subject for t in scene.trajectories]
        if args.subject not in ids:
            raise ConfigError(f"subject {args.subject} not in scene (have {ids})")
        gt = scene.normalize(scene.trajectories[ids.index(args.subject)].points)
        with dc.no_grad():
            pts = rollout(scene, ckpt.params, TEACHER, teacher=gt).value
    else:
        pts = predict(scene, ckpt.params)
    doc = rollout_to_json(scene, pts, args.mode)
    if args.subject is not None:
        doc["subject"] = args.subject
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"rollout_{scene.scene_id}_{args.mode}.json"
    write_json(path, doc)
    return {}, None, [args.checkpoint, args.dataset], [path]


def _load_rollout(path):
    try:
        doc = json.loads(Path(path).read_text())
        return np.asarray(doc["points"], dtype=np.float64), np.asarray(doc["times"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"cannot read trajectory file {path}: {exc}") from exc


def cmd_analyze(args, cfg):
    trajs = [_load_rollout(p) for p in args.files]
    inputs = list(args.files)
    if args.dataset:
        dataset = data.load_dataset(args.dataset)
        scenes = dataset.part(args.split) if args.split else dataset.bundles
        for s in scenes:
            t = s.end_times()
            trajs.extend((tr.points, t) for tr in s.trajectories)
        inputs.append(args.dataset)
    if not trajs:
        raise UsageError("analyze needs trajectory files or --dataset")
    edges = metrics.DEFAULT_LENGTH_EDGES if args.length_edges is None else args.length_edges
    rows = metrics.saccade_analysis(trajs, args.angle_bins, edges, flip_y=args.flip_y)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "saccades.csv"
    metrics.write_saccade_csv(rows, path)
    config = {"angle_bins": args.angle_bins, "length_edges": list(edges), "flip_y": args.flip_y}
    return config, None, inputs, [path]


def cmd_ablate(args, cfg):
    dataset = data.load_dataset(args.dataset)
    tcfg = _train_config(cfg, args)
    mcfg = _model_config(cfg, dataset)
    opts = _metric_options(cfg)
    results = run_ablation(dataset, args.variants, tcfg, mcfg, opts=opts, split=args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    summary = {}
    for v, (report, ckpt) in results.items():
        p = out / f"{v}.json"
        ckpt.save(p)
        paths.append(p)
        summary[v] = report
    path = out / "ablation.json"
    write_json(path, summary)
    paths.append(path)
    print(json.dumps({v: r["aggregate"] for v, r in summary.items()}, sort_keys=True))
    config = {"train": tcfg.to_dict(), "model": mcfg.to_dict(), "variants": list(args.variants)}
    return config, tcfg.seed, [args.dataset], paths


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "rollout": cmd_rollout,
            "analyze": cmd_analyze, "ablate": cmd_ablate}


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--config", default=None, help="JSON file of config overrides")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="audiogaze", description="Gaze trajectory prediction from narration.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--scenes", type=int, default=None)
    g.add_argument("--subjects", type=int, default=None)

    t = sub.add_parser("train", parents=[common], help="two-stage training")
    t.add_argument("dataset", help="dataset manifest.json")
    t.add_argument("--stage", choices=("two-stage", "mse-only", "pd-only"), default=None)
    t.add_argument("--resume", default=None, help="resume from a last.json checkpoint")
    t.add_argument("--stop-after", type=int, default=None,
                   help="run at most this many epochs, then save a resumable state")

    e = sub.add_parser("eval", parents=[common], help="metrics report")
    e.add_argument("checkpoint")
    e.add_argument("dataset")
    e.add_argument("--split", choices=data.SPLITS, default="test")

    r = sub.add_parser("rollout", parents=[common], help="predict one scene")
    r.add_argument("checkpoint")
    r.add_argument("dataset")
    r.add_argument("--scene", required=True)
    r.add_argument("--mode", choices=(FREE, TEACHER), default=FREE)
    r.add_argument("--subject", type=int, default=None)

    a = sub.add_parser("analyze", parents=[common], help="saccade statistics CSV")
    a.add_argument("files", nargs="*", help="rollout JSON files")
    a.add_argument("--dataset", default=None, help="also include subject gaze of a dataset")
    a.add_argument("--split", choices=data.SPLITS, default=None)
    a.add_argument("--angle-bins", type=int, default=8)
    a.add_argument("--length-edges", type=float, nargs="+", default=None)
    a.add_argument("--flip-y", action="store_true")

    b = sub.add_parser("ablate", parents=[common], help="train and score ablation variants")
    b.add_argument("dataset")
    b.add_argument("--variants", nargs="+", choices=list(VARIANTS), default=list(VARIANTS))
    b.add_argument("--split", choices=data.SPLITS, default="test")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    started = time.time()
    try:
        cfg = load_config(args.config)
        config, seed, inputs, outputs = COMMANDS[args.command](args, cfg)
        write_run_manifest(args.out, args.command, config, seed, inputs, outputs, started)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergedLoss as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (AudioGazeError, ValueError, TypeError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to an exit code
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
