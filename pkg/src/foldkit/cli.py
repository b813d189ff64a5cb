"""Command-line front end.

Option precedence, highest first: values from --config, then explicit
flags, then built-in defaults. The seed falls back to the FOLDKIT_SEED
environment variable before its default. Every run writes the resolved
options next to its primary output as <output>.run.json.

Exit codes: 0 success, 1 invalid input or options, 2 runtime failure.
Failures print a single JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from .errors import FoldkitError, ModelFormatError, ShapeError, ValidationError
from .folding.fold import REPAIR_MODES, FoldPlan, fold_network
from .folding.merge import MERGE_MODES, merge_networks
from .harness.data import (load_dataset, make_synthetic_dataset, save_dataset,
                           save_json, write_logits, Dataset)
from .harness.sweep import SweepConfig, run_sweep
from .harness.train import (ARCHITECTURES, TrainConfig, build_network,
                            evaluate, predict_logits, train)
from .nn.serialize import load_network, save_network
from .pruning import NORM_KINDS, magnitude_prune
from .repair import (InversionConfig, apply_fold_ar, deep_inversion,
                     fold_data_repair, fold_dir)
from .report import report_from_csv

VALIDATION_ERROR, RUNTIME_ERROR = 1, 2


def _fail(kind, message, code):
    json.dump({"error": {"type": kind, "message": message}}, sys.stderr)
    sys.stderr.write("\n")
    return code


def _load_config_file(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise ValidationError(f"cannot read config file {path}: {e}")
    if not isinstance(cfg, dict):
        raise ValidationError("config file must hold a JSON object")
    return {k.replace("-", "_"): v for k, v in cfg.items()}


def _resolve(args):
    """Apply config-file overrides and the seed fallback chain."""
    opts = vars(args).copy()
    config_path = opts.pop("config", None)
    overrides = _load_config_file(config_path) if config_path else {}
    known = set(opts)
    for key, value in overrides.items():
        if key not in known:
            raise ValidationError(f"config key {key!r} is not an option of "
                                  f"'{opts['command']}'")
        opts[key] = value
    if "seed" in opts and opts["seed"] is None:
        env = os.environ.get("FOLDKIT_SEED")
        opts["seed"] = int(env) if env else 0
    return opts


def _write_run_config(primary_output, opts):
    payload = {k: v for k, v in opts.items() if not k.startswith("_")}
    save_json(primary_output + ".run.json", payload)


def _dataset_batches(ds, input_shape, batch_size=256):
    shaped = ds.features.reshape((ds.count,) + tuple(input_shape))
    return [shaped[i:i + batch_size] for i in range(0, ds.count, batch_size)]


def _sparsity_or_fail(value):
    if value is None:
        raise ValidationError("--sparsity is required")
    if not 0.0 <= value < 1.0:
        raise ValidationError("sparsity must lie in [0, 1)")
    return value


# ---------------------------------------------------------------------------
# commands

def cmd_train(opts):
    if opts["data"]:
        ds = load_dataset(opts["data"])
        dim = int(np.prod(ds.features.shape[1:]))
        class_count = ds.class_count
    else:
        splits = make_synthetic_dataset(class_count=opts["classes"],
                                        dim=opts["dim"],
                                        train_count=opts["train_count"],
                                        separation=opts["separation"],
                                        seed=opts["seed"])
        ds, dim, class_count = splits.train, opts["dim"], opts["classes"]
    net = build_network(opts["arch"], dim=dim, class_count=class_count,
                        width=opts["width"], seed=opts["seed"])
    cfg = TrainConfig(epochs=opts["epochs"], batch_size=opts["batch_size"],
                      lr=opts["lr"], momentum=opts["momentum"],
                      weight_decay=opts["weight_decay"],
                      decay_kind=opts["decay_kind"], seed=opts["seed"])
    net, history = train(net, ds, cfg)
    save_network(net, opts["out"])
    _write_run_config(opts["out"], opts)
    if opts["report"]:
        save_json(opts["report"], {"losses": history.losses,
                                   "accuracies": history.accuracies})
    print(f"trained {opts['arch']} "
          f"train_accuracy={history.accuracies[-1]:.4f} -> {opts['out']}")
    return 0


def cmd_fold(opts):
    net = load_network(opts["model"])
    sparsity = _sparsity_or_fail(opts["sparsity"])
    repair = opts["repair"]
    if repair not in REPAIR_MODES:
        raise ValidationError(f"unknown repair mode {repair!r}")
    plan = FoldPlan(sparsity=sparsity, repair=repair, seed=opts["seed"])
    if repair == "naive":
        folded, report = fold_network(net, plan)
    elif repair == "ar":
        folded, report = apply_fold_ar(net, plan)
    elif repair == "dir":
        cfg = InversionConfig(batch_size=opts["di_batch"], steps=opts["di_steps"],
                              lr=opts["di_lr"], momentum=opts["di_momentum"],
                              bn_weight=opts["di_bn_weight"],
                              l2_weight=opts["di_l2_weight"],
                              tv_weight=opts["di_tv_weight"], seed=opts["seed"])
        folded, report, _ = fold_dir(net, plan, cfg)
    else:
        if not opts["calib"]:
            raise ValidationError("repair mode 'data' needs --calib")
        calib = load_dataset(opts["calib"])
        folded, report = fold_data_repair(net, plan,
                                          _dataset_batches(calib, net.input_shape))
    save_network(folded, opts["out"])
    _write_run_config(opts["out"], opts)
    if opts["report"]:
        save_json(opts["report"], report.to_json())
    print(f"folded sparsity={sparsity:g} repair={repair} "
          f"total_J={report.total_cost:.6g} -> {opts['out']}")
    return 0


def cmd_prune(opts):
    net = load_network(opts["model"])
    sparsity = _sparsity_or_fail(opts["sparsity"])
    pruned, report = magnitude_prune(net, sparsity=sparsity, norm=opts["norm"])
    save_network(pruned, opts["out"])
    _write_run_config(opts["out"], opts)
    if opts["report"]:
        save_json(opts["report"], report.to_json())
    print(f"pruned sparsity={sparsity:g} norm={opts['norm']} "
          f"dropped_mass={report.total_dropped_mass:.6g} -> {opts['out']}")
    return 0


def cmd_eval(opts):
    net = load_network(opts["model"])
    ds = load_dataset(opts["data"])
    acc = evaluate(net, ds)
    if opts["logits"]:
        write_logits(opts["logits"], predict_logits(net, ds.features))
    if opts["report"]:
        save_json(opts["report"], {"accuracy": acc, "count": ds.count})
        _write_run_config(opts["report"], opts)
    print(f"accuracy={acc:.6f} count={ds.count}")
    return 0


def cmd_sweep(opts):
    fields = {f for f in SweepConfig.__dataclass_fields__}
    overrides = {}
    if opts["sweep_config"]:
        raw = _load_config_file(opts["sweep_config"])
        train_over = raw.pop("train", {})
        inv_over = raw.pop("inversion", {})
        unknown = set(raw) - fields
        if unknown:
            raise ValidationError(f"unknown sweep config keys: {sorted(unknown)}")
        overrides = raw
        if train_over:
            overrides["train"] = TrainConfig(**train_over)
        if inv_over:
            overrides["inversion"] = InversionConfig(**inv_over)
    if opts["sparsity"]:
        overrides["sparsities"] = tuple(opts["sparsity"])
    if opts["seed_list"]:
        overrides["seeds"] = tuple(opts["seed_list"])
    if opts["method"]:
        overrides["methods"] = tuple(opts["method"])
    config = SweepConfig(**overrides)
    rows = run_sweep(config, out_csv=opts["out"], jobs=opts["jobs"])
    _write_run_config(opts["out"], {**opts, "resolved": config.to_json()})
    print(f"sweep rows={len(rows)} -> {opts['out']}")
    return 0


def cmd_merge(opts):
    a = load_network(opts["model_a"])
    b = load_network(opts["model_b"])
    if opts["mode"] not in MERGE_MODES:
        raise ValidationError(f"unknown merge mode {opts['mode']!r}")
    merged, report = merge_networks(a, b, mode=opts["mode"], seed=opts["seed"])
    if opts["calib"]:
        from .nn.recalibrate import bn_recalibrate
        calib = load_dataset(opts["calib"])
        merged = bn_recalibrate(merged,
                                _dataset_batches(calib, merged.input_shape))
    save_network(merged, opts["out"])
    _write_run_config(opts["out"], opts)
    if opts["report"]:
        save_json(opts["report"], report.to_json())
    print(f"merged mode={opts['mode']} total_J={report.total_cost:.6g} "
          f"-> {opts['out']}")
    return 0


def cmd_di(opts):
    net = load_network(opts["model"])
    cfg = InversionConfig(batch_size=opts["di_batch"], steps=opts["di_steps"],
                          lr=opts["di_lr"], momentum=opts["di_momentum"],
                          bn_weight=opts["di_bn_weight"],
                          l2_weight=opts["di_l2_weight"],
                          tv_weight=opts["di_tv_weight"], seed=opts["seed"])
    result = deep_inversion(net, cfg)
    flat = result.batch.reshape(result.batch.shape[0], -1)
    save_dataset(Dataset(flat, result.targets, net.class_count), opts["out"])
    _write_run_config(opts["out"], opts)
    if opts["report"]:
        save_json(opts["report"], {"loss_trace": result.loss_trace})
    print(f"synthesized batch={result.batch.shape[0]} "
          f"final_loss={result.loss_trace[-1]:.6g} -> {opts['out']}")
    return 0


def cmd_report(opts):
    made = report_from_csv(opts["csv"], opts["out"],
                           figures=not opts["no_figures"])
    _write_run_config(opts["out"], opts)
    print("wrote " + ", ".join(made))
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_di_flags(p):
    p.add_argument("--di-steps", type=int, default=500)
    p.add_argument("--di-batch", type=int, default=64)
    p.add_argument("--di-lr", type=float, default=0.05)
    p.add_argument("--di-momentum", type=float, default=0.9)
    p.add_argument("--di-bn-weight", type=float, default=1.0)
    p.add_argument("--di-l2-weight", type=float, default=1e-4)
    p.add_argument("--di-tv-weight", type=float, default=1e-4)


def _common(p, out_required=True):
    p.add_argument("--config", help="JSON file whose keys override flags")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=out_required)
    p.add_argument("--report", help="optional JSON report path")


class _Parser(argparse.ArgumentParser):
    # route usage errors through the JSON error path instead of exiting
    def error(self, message):
        raise ValidationError(message)


def build_parser():
    parser = _Parser(prog="foldkit")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("train", help="train a reference network")
    p.add_argument("--arch", choices=ARCHITECTURES, default="mlp_bn")
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--train-count", type=int, default=4096)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--decay-kind", choices=("l1", "l2"), default="l2")
    p.add_argument("--data", help="train on an existing FDSTv1 dataset")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fold", help="compress a model by channel folding")
    p.add_argument("--model", required=True)
    p.add_argument("--sparsity", type=float, default=None)
    p.add_argument("--repair", choices=REPAIR_MODES, default="naive")
    p.add_argument("--calib", help="FDSTv1 calibration set (repair=data)")
    _add_di_flags(p)
    _common(p)
    p.set_defaults(func=cmd_fold)

    p = sub.add_parser("prune", help="structured magnitude pruning")
    p.add_argument("--model", required=True)
    p.add_argument("--sparsity", type=float, default=None)
    p.add_argument("--norm", choices=NORM_KINDS, default="l2")
    _common(p)
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("eval", help="top-1 accuracy on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--logits", help="dump raw logits to this path")
    p.add_argument("--config")
    p.add_argument("--report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="method x sparsity x seed grid")
    p.add_argument("--sweep-config", help="JSON file of sweep settings")
    p.add_argument("--sparsity", type=float, action="append",
                   help="repeatable; overrides the grid")
    p.add_argument("--seed-list", type=int, action="append", metavar="SEED",
                   help="repeatable; overrides the grid")
    p.add_argument("--method", action="append", help="repeatable")
    p.add_argument("--jobs", type=int, default=1)
    _common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("merge", help="fold two trained models into one")
    p.add_argument("--model-a", required=True)
    p.add_argument("--model-b", required=True)
    p.add_argument("--mode", choices=MERGE_MODES, default="paired")
    p.add_argument("--calib", help="recalibrate the merge on this dataset")
    _common(p)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("di", help="synthesize a batch from a trained model")
    p.add_argument("--model", required=True)
    _add_di_flags(p)
    _common(p)
    p.set_defaults(func=cmd_di)

    p = sub.add_parser("report", help="render a sweep CSV into markdown")
    p.add_argument("--csv", required=True)
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        opts = _resolve(args)
        opts.pop("func", None)
        return args.func(opts)
    except (ValidationError, ShapeError, ModelFormatError) as e:
        return _fail(type(e).__name__, str(e), VALIDATION_ERROR)
    except FoldkitError as e:
        return _fail(type(e).__name__, str(e), RUNTIME_ERROR)
    except OSError as e:
        return _fail("OSError", str(e), RUNTIME_ERROR)


if __name__ == "__main__":
    sys.exit(main())
