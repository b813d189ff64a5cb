"""Compression sweep: retrain per seed, compress per (method, sparsity),
evaluate, and emit a deterministic CSV plus a JSON sidecar.

Row order and float formatting are canonical so identical configs produce
byte-identical files. Existing rows in the output are kept and skipped,
which makes interrupted sweeps resumable.
"""

from __future__ import annotations

import concurrent.futures
import csv
import io
import os
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ValidationError
from ..folding.fold import FoldPlan, fold_network
from ..pruning import magnitude_prune
from ..repair import InversionConfig, apply_fold_ar, fold_data_repair, fold_dir
from .data import make_synthetic_dataset, save_json
from .metrics import variance_ratio
from .train import TrainConfig, build_network, evaluate, train

CSV_HEADER = ["method", "sparsity", "seed", "accuracy",
              "var_ratio_last", "var_ratio_mean_abs_dev", "total_J"]

METHODS = ("fold-naive", "fold-ar", "fold-dir", "fold-r",
           "prune-l1", "prune-l2")


@dataclass
class SweepConfig:
    arch: str = "mlp_bn"
    width: int = 128
    class_count: int = 8
    dim: int = 16
    separation: float = 4.0
    train_count: int = 4096
    test_count: int = 1024
    calib_count: int = 512
    methods: tuple = METHODS
    sparsities: tuple = (0.3, 0.5, 0.7)
    seeds: tuple = tuple(range(10))
    train: TrainConfig = field(default_factory=TrainConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)

    def to_json(self):
        out = asdict(self)
        out["methods"] = list(self.methods)
        out["sparsities"] = [float(s) for s in self.sparsities]
        out["seeds"] = [int(s) for s in self.seeds]
        return out


def _as_batches(features, input_shape, batch_size=256):
    shaped = features.reshape((features.shape[0],) + tuple(input_shape))
    return [shaped[i:i + batch_size] for i in range(0, shaped.shape[0], batch_size)]


def compress(net, method, sparsity, seed, splits, inversion):
    """Apply one compression method. Returns (network, channel_maps, total_J)."""
    if method.startswith("fold"):
        repair = {"fold-naive": "naive", "fold-ar": "ar",
                  "fold-dir": "dir", "fold-r": "data"}.get(method)
        if repair is None:
            raise ValidationError(f"unknown method {method!r}")
        plan = FoldPlan(sparsity=sparsity, repair=repair, seed=seed)
        if repair == "naive":
            folded, report = fold_network(net, plan)
        elif repair == "ar":
            folded, report = apply_fold_ar(net, plan)
        elif repair == "dir":
            cfg = InversionConfig(**{**asdict(inversion), "seed": seed})
            folded, report, _ = fold_dir(net, plan, cfg)
        else:
            batches = _as_batches(splits.calib.features, net.input_shape)
            folded, report = fold_data_repair(net, plan, batches)
        return folded, report.probe_assignments(), report.total_cost
    if method in ("prune-l1", "prune-l2"):
        pruned, report = magnitude_prune(net, sparsity=sparsity,
                                         norm=method.split("-")[1])
        return pruned, report.probe_assignments(), report.total_dropped_mass
    raise ValidationError(f"unknown method {method!r}")


def _rows_for_seed(config: SweepConfig, seed, wanted):
    """All sweep rows for one seed. `wanted` lists (method, sparsity) pairs."""
    splits = make_synthetic_dataset(
        class_count=config.class_count, dim=config.dim,
        train_count=config.train_count, test_count=config.test_count,
        calib_count=config.calib_count, separation=config.separation, seed=seed)
    base = build_network(config.arch, dim=config.dim,
                         class_count=config.class_count,
                         width=config.width, seed=seed)
    tcfg = TrainConfig(**{**asdict(config.train), "seed": seed})
    base, _ = train(base, splits.train, tcfg)
    base_acc = evaluate(base, splits.test)
    probe = splits.test.features[:512].reshape((-1,) + tuple(base.input_shape))
    rows = []
    for method, sparsity in wanted:
        if sparsity == 0.0:
            # folding/pruning at zero sparsity keeps every channel
            rows.append({"method": method, "sparsity": 0.0, "seed": seed,
                         "accuracy": base_acc, "var_ratio_last": 1.0,
                         "var_ratio_mean_abs_dev": 0.0, "total_J": 0.0})
            continue
        net, maps, total_j = compress(base, method, sparsity, seed,
                                      splits, config.inversion)
        acc = evaluate(net, splits.test)
        ratios = variance_ratio(base, net, probe, channel_maps=maps)
        rows.append({"method": method, "sparsity": float(sparsity), "seed": seed,
                     "accuracy": acc, "var_ratio_last": ratios.headline,
                     "var_ratio_mean_abs_dev": ratios.mean_abs_dev,
                     "total_J": float(total_j)})
    return rows


def _row_key(row):
    return (str(row["method"]), float(row["sparsity"]), int(row["seed"]))


def _canonical(rows):
    return sorted(rows, key=_row_key)


def format_rows(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for row in _canonical(rows):
        writer.writerow([row["method"], repr(float(row["sparsity"])),
                         str(int(row["seed"])), repr(float(row["accuracy"])),
                         repr(float(row["var_ratio_last"])),
                         repr(float(row["var_ratio_mean_abs_dev"])),
                         repr(float(row["total_J"]))])
    return buf.getvalue()


def parse_rows(text):
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != CSV_HEADER:
        raise ValidationError(f"unexpected sweep CSV header: {reader.fieldnames}")
    rows = []
    for r in reader:
        rows.append({"method": r["method"], "sparsity": float(r["sparsity"]),
                     "seed": int(r["seed"]), "accuracy": float(r["accuracy"]),
                     "var_ratio_last": float(r["var_ratio_last"]),
                     "var_ratio_mean_abs_dev": float(r["var_ratio_mean_abs_dev"]),
                     "total_J": float(r["total_J"])})
    return rows


def _write_atomic(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run_sweep(config: SweepConfig, out_csv=None, jobs=1):
    """Run (or resume) the sweep. Returns the full canonical row list."""
    for m in config.methods:
        if m not in METHODS:
            raise ValidationError(f"unknown method {m!r}")
    done = {}
    if out_csv and os.path.exists(out_csv):
        with open(out_csv) as fh:
            for row in parse_rows(fh.read()):
                done[_row_key(row)] = row
    grid = [(m, float(s)) for m in config.methods for s in config.sparsities]
    per_seed = {}
    for seed in config.seeds:
        wanted = [(m, s) for m, s in grid
                  if (m, s, int(seed)) not in done]
        if wanted:
            per_seed[int(seed)] = wanted
    new_rows = []
    if per_seed:
        if jobs > 1:
            with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = {pool.submit(_rows_for_seed, config, seed, wanted): seed
                           for seed, wanted in per_seed.items()}
                for fut in concurrent.futures.as_completed(futures):
                    new_rows.extend(fut.result())
        else:
            for seed, wanted in per_seed.items():
                new_rows.extend(_rows_for_seed(config, seed, wanted))
    rows = _canonical(list(done.values()) + new_rows)
    if out_csv:
        _write_atomic(out_csv, format_rows(rows))
        save_json(out_csv + ".meta.json",
                  {"config": config.to_json(), "rows": len(rows)})
    return rows
