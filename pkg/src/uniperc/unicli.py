"""Command-line entry point: data generation, training, evaluation and gradient checks.

Every command writes its resolved configuration to ``<out>/config.json``;
passing that file back through ``--config`` reruns the command identically.
Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np
import torch

from . import evalmetrics as em
from . import gradcheck
from . import synthdata as sd
from . import trainflow as tf
from .netzoo import NetConfig, UniPerceptionNet, state_checksum

SEED_ENV = "UNIPERC_SEED"


class UsageError(Exception):
    pass


def _resolve(args, keys, defaults: dict) -> dict:
    """Merge built-in defaults, the ``--config`` file and explicit flags, in that order."""
    merged = dict(defaults)
    if args.config:
        with open(args.config) as f:
            merged.update(json.load(f))
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            merged[k] = v
    if merged.get("seed") is None:
        env = os.environ.get(SEED_ENV)
        merged["seed"] = int(env) if env is not None else 0
    if not merged.get("out"):
        raise UsageError("an output directory is required (--out DIR or 'out' in the config file)")
    return merged


def _write_config(run: dict):
    os.makedirs(run["out"], exist_ok=True)
    with open(os.path.join(run["out"], "config.json"), "w") as f:
        json.dump(run, f, indent=2, sort_keys=True)


def _write_json(path, payload):
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _require_data(run):
    if not run.get("data"):
        raise UsageError("--data DIR is required")
    return run["data"]


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    run = _resolve(args, ("seed", "out", "scenes", "steering", "moving", "val_fraction"),
                   {"command": "gen-data", "scenes": 20, "steering": 0, "moving": 1, "val_fraction": 0.2})
    if run["scenes"] <= 0:
        raise UsageError("--scenes must be positive")
    cfg = sd.SceneConfig(n_moving=run["moving"])
    manifest = sd.write_dataset(run["out"], run["seed"], run["scenes"], cfg, run["val_fraction"], run["steering"])
    _write_config(run)
    splits = manifest["splits"]
    print(f"wrote {run['scenes']} scenes ({len(splits['train'])} train, {len(splits['val'])} val)"
          f" and {len(splits.get('steering', []))} steering sequences to {run['out']}")
    return 0


def _train_config(run: dict) -> tf.TrainConfig:
    base = tf.desk_config() if run.get("preset") == "desk" else tf.TrainConfig()
    d = base.to_dict()
    d.update(run.get("train", {}))
    d["seed"] = run["seed"]
    if run.get("stages") is not None:
        d["stages"] = [int(s) for s in str(run["stages"]).split(",")]
    if run.get("scale") is not None:
        d["schedule"] = {**d["schedule"], "scale": run["scale"]}
    for key in ("lr", "batch_k"):
        if run.get(key) is not None:
            d[key] = run[key]
    if run.get("pose_decoder") is not None:
        d["net"] = {**d["net"], "pose_decoder": run["pose_decoder"]}
    if run.get("no_distill"):
        d["distill"] = False
        d["weights"] = {**d["weights"], "distil": 0.0}
    return tf.TrainConfig.from_dict(d)


_TRAIN_KEYS = ("seed", "out", "data", "stages", "scale", "lr", "batch_k", "pose_decoder", "no_distill", "preset")


def cmd_train(args) -> int:
    run = _resolve(args, _TRAIN_KEYS, {"command": "train", "preset": "reference"})
    _require_data(run)
    cfg = _train_config(run)
    run["train"] = cfg.to_dict()
    _write_config(run)
    data = tf.SceneDataset.from_dir(run["data"], "train")
    teacher = None
    if cfg.distill and cfg.weights.distil != 0 and any(s > 1 for s in cfg.stages):
        teacher = tf.train_teacher(data, cfg, run_dir=run["out"])
    net, results = tf.train_student(data, cfg, teacher=teacher, run_dir=run["out"])
    for r in results:
        status = "frozen ok" if r.frozen_unchanged else "FROZEN PARAMETERS CHANGED"
        print(f"stage {r.stage}: {r.steps} steps, total {r.first['total']:.4f} -> {r.last['total']:.4f}, {status}")
    checksum = state_checksum(net)
    _write_json(os.path.join(run["out"], "reports", "train_summary.json"),
                {"checksum": checksum, "stages": [{"stage": r.stage, "steps": r.steps, "frozen_unchanged": r.frozen_unchanged,
                                                    "first": r.first, "last": r.last} for r in results]})
    print(f"checksum {checksum}")
    return 0 if all(r.frozen_unchanged for r in results) else 1


def cmd_distill(args) -> int:
    run = _resolve(args, _TRAIN_KEYS, {"command": "distill", "preset": "reference"})
    _require_data(run)
    cfg = _train_config(run)
    run["train"] = cfg.to_dict()
    _write_config(run)
    teacher = tf.train_teacher(tf.SceneDataset.from_dir(run["data"], "train"), cfg, run_dir=run["out"])
    print(f"teacher checksum {state_checksum(teacher)}")
    return 0


def _load_net(path):
    if not path:
        raise UsageError("--checkpoint is required")
    return tf.load_student(path)


def cmd_eval_depth(args) -> int:
    run = _resolve(args, ("seed", "out", "data", "checkpoint", "split", "oracle", "max_depth"),
                   {"command": "eval-depth", "split": "val", "oracle": False, "max_depth": None})
    data = tf.SceneDataset.from_dir(_require_data(run), run["split"])
    if run["oracle"]:
        pred = data.depth
    else:
        net = _load_net(run.get("checkpoint"))
        pred = tf.predict_depth(net.encoder, net.depth, torch.from_numpy(data.images[:, 1]))
        pred = np.stack([p * np.median(g) / np.median(p) for p, g in zip(pred, data.depth)])
    m = em.depth_metrics(pred, data.depth, median_scale=False, max_depth=run["max_depth"])
    _write_config(run)
    em.to_json(m, os.path.join(run["out"], "depth_metrics.json"), protocol="per-image median scaling",
               oracle=run["oracle"])
    em.to_csv([m.row()], em.DEPTH_COLUMNS, os.path.join(run["out"], "depth_metrics.csv"))
    print(em.to_csv([m.row()], em.DEPTH_COLUMNS), end="")
    return 0


def cmd_eval_seg(args) -> int:
    run = _resolve(args, ("seed", "out", "data", "checkpoint", "split", "task"),
                   {"command": "eval-seg", "split": "val", "task": "panoptic"})
    data = tf.SceneDataset.from_dir(_require_data(run), run["split"])
    net = _load_net(run.get("checkpoint"))
    sem, inst = tf.predict_segmentation(net.encoder, net.seg, torch.from_numpy(data.images[:, 1]), run["task"])
    per_image = [em.seg_metrics(sem[i], data.semantic[i], run["task"], inst[i], data.instance[i], sd.NUM_CLASSES)
                 for i in range(len(data))]

    def avg(name):
        vals = [getattr(m, name) for m in per_image if getattr(m, name) is not None]
        return float(np.mean(vals)) if vals else None
    result = em.SegMetrics(iou=avg("iou"), pq=avg("pq"), ap=avg("ap"), task=run["task"])
    _write_config(run)
    em.to_json(result, os.path.join(run["out"], "seg_metrics.json"), images=len(data))
    em.to_csv([result.row()], em.SEG_COLUMNS, os.path.join(run["out"], "seg_metrics.csv"))
    print(em.to_csv([result.row()], em.SEG_COLUMNS), end="")
    return 0


def cmd_eval_steering(args) -> int:
    run = _resolve(args, ("seed", "out", "data", "checkpoint", "random_init", "sequences", "steps", "unfrozen"),
                   {"command": "eval-steering", "random_init": False, "sequences": 80, "steps": 300, "unfrozen": False})
    if run["random_init"]:
        torch.manual_seed(run["seed"])
        net = UniPerceptionNet(NetConfig(seed=run["seed"]))
    else:
        net = _load_net(run.get("checkpoint"))
    if not run.get("data") and run["sequences"] < 10:
        raise UsageError(f"tenfold evaluation needs at least 10 sequences, got --sequences {run['sequences']}")
    seqs = sd.load_steering_dataset(run["data"]) if run.get("data") else sd.make_steering_dataset(run["seed"], run["sequences"])
    if len(seqs) < 10:
        raise UsageError(f"tenfold evaluation needs at least 10 sequences, found {len(seqs)}")
    frozen = not run["unfrozen"]
    before = state_checksum(net.encoder)
    folds = tf.FoldPlan.make(len(seqs), 10, seed=run["seed"])
    results = tf.finetune_steering(net.encoder, seqs, folds, frozen=frozen, steps=run["steps"], seed=run["seed"],
                                   net_config=net.config)
    report = em.steering_report([(r.train_mse, r.test_mse) for r in results])
    baseline = float(np.mean([r.baseline_test_mse for r in results]))
    unchanged = state_checksum(net.encoder) == before
    _write_config(run)
    em.to_json(report, os.path.join(run["out"], "reports", "steering_cv.json"), frozen=frozen,
               encoder_unchanged=unchanged, constant_baseline_test_mse=baseline,
               model="random-init" if run["random_init"] else "pretrained")
    name = "random-init" if run["random_init"] else "pretrained"
    em.to_csv([[name, report.train_cell, report.test_cell]], em.STEERING_COLUMNS,
              os.path.join(run["out"], "reports", "steering_cv.csv"))
    for r in results:
        print(f"fold {r.fold}: train {r.train_mse:.3f} test {r.test_mse:.3f}")
    print(f"{name}: train {report.train_cell} test {report.test_cell} (constant predictor {baseline:.2f})")
    return 0 if (unchanged or not frozen) else 1


def cmd_eval(args) -> int:
    return {"depth": cmd_eval_depth, "seg": cmd_eval_seg, "steering": cmd_eval_steering}[args.which](args)


def cmd_grad_check(args) -> int:
    run = {"command": "grad-check", "checks": None, "inject_fault": []}
    if args.config:
        with open(args.config) as f:
            run.update(json.load(f))
    for k in ("seed", "out", "checks", "inject_fault"):
        if getattr(args, k, None) is not None:
            run[k] = getattr(args, k)
    if run.get("seed") is None:
        env = os.environ.get(SEED_ENV)
        run["seed"] = int(env) if env is not None else 0
    names = run["checks"].split(",") if run["checks"] else None
    faults = tuple(run["inject_fault"] or ())
    for requested in (names or []), faults:
        unknown = [n for n in requested if n not in gradcheck.CHECKS]
        if unknown:
            raise UsageError(f"unknown checks {unknown}; available: {sorted(gradcheck.CHECKS)}")
    results = gradcheck.run_checks(names, seed=run["seed"], faults=faults)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    if run.get("out"):
        _write_config(run)
        _write_json(os.path.join(run["out"], "grad_check.json"),
                    {"seed": run["seed"], "faults": list(faults),
                     "results": [{"name": r.name, "max_rel_error": r.max_rel_error, "passed": r.passed} for r in results]})
    return 1 if failed else 0


# -- parser -------------------------------------------------------------------------

def _common(p):
    p.add_argument("--seed", type=int, default=None, help=f"random seed (falls back to ${SEED_ENV}, then 0)")
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--config", default=None, help="JSON config file; explicit flags override its values")


def _train_flags(p):
    p.add_argument("--data", default=None, help="dataset directory written by gen-data")
    p.add_argument("--stages", default=None, help="comma-separated stage numbers, e.g. 1,2,3,4")
    p.add_argument("--scale", type=float, default=None, help="desk-scale factor applied to stage step counts")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-k", type=int, default=None, dest="batch_k")
    p.add_argument("--pose-decoder", choices=("multiscale", "naive"), default=None, dest="pose_decoder")
    p.add_argument("--no-distill", action="store_const", const=True, default=None, dest="no_distill")
    p.add_argument("--preset", choices=("reference", "desk"), default=None,
                   help="reference: default hyperparameters; desk: settings for minutes-long CPU runs")


def _eval_flags(p):
    p.add_argument("--data", default=None)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--split", default=None)
    p.add_argument("--task", choices=em.TASKS, default=None)
    p.add_argument("--oracle", action="store_const", const=True, default=None,
                   help="score ground truth against itself (sanity check)")
    p.add_argument("--max-depth", type=float, default=None, dest="max_depth")
    p.add_argument("--random-init", action="store_const", const=True, default=None, dest="random_init")
    p.add_argument("--sequences", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--unfrozen", action="store_const", const=True, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uniperc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    _common(p)
    p.add_argument("--scenes", type=int, default=None)
    p.add_argument("--steering", type=int, default=None, help="number of 16-frame steering sequences")
    p.add_argument("--moving", type=int, default=None, help="independently moving boxes per scene")
    p.add_argument("--val-fraction", type=float, default=None, dest="val_fraction")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the staged schedule (teacher first when distilling)")
    _common(p)
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("distill", help="train the teacher only")
    _common(p)
    _train_flags(p)
    p.set_defaults(func=cmd_distill)

    for name, fn in (("eval-depth", cmd_eval_depth), ("eval-seg", cmd_eval_seg), ("eval-steering", cmd_eval_steering)):
        p = sub.add_parser(name, help=f"{name.split('-')[1]} metrics")
        _common(p)
        _eval_flags(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("eval", help="evaluate: depth, seg or steering")
    p.add_argument("which", choices=("depth", "seg", "steering"))
    _common(p)
    _eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grad-check", help="finite-difference gradient checks")
    _common(p)
    p.add_argument("--checks", default=None, help="comma-separated check names (default: all)")
    p.add_argument("--inject-fault", action="append", default=None, dest="inject_fault",
                   help="flip the gradient sign of the named check (mutation test)")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"uniperc: error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # runtime failures map to exit code 1
        print(f"uniperc: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
