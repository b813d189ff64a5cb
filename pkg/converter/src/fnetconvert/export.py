"""Fixture export: FNET model + FDST batch + recorded logits + manifest.

`fnetconvert --arch small_cnn --out-dir fixtures/` writes four files that
let the engine be checked against this framework's inference output
without torch installed. Logits are recorded in eval mode; batch-norm
running statistics are first warmed with a few training-mode passes so
they carry real values instead of the 0/1 init.
"""
import argparse
import hashlib
import os
import sys

import numpy as np
import torch

from foldkit import save_network
from foldkit.harness import Dataset, save_dataset, save_json, write_logits

from .adapters import ADAPTERS
from .convert import module_to_network

PARITY_TOLERANCE = 1e-4


def checkpoint_id(state_dict):
    digest = hashlib.sha256()
    for name in sorted(state_dict):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(state_dict[name].numpy()).tobytes())
    return digest.hexdigest()


def export_fixture(adapter, out_dir, seed=1234, batch_size=32, warm_passes=5):
    """Build, convert, and write <name>.fnet/.fdst/.logits/.manifest.json."""
    torch.manual_seed(seed)
    module = adapter.build()
    gen = torch.Generator().manual_seed(seed + 1)
    module.train()
    with torch.no_grad():
        for _ in range(warm_passes):
            module(torch.randn((64,) + adapter.input_shape, generator=gen))
    module.eval()

    batch = torch.randn((batch_size,) + adapter.input_shape, generator=gen)
    with torch.no_grad():
        logits = module(batch).numpy()

    result = module_to_network(module, adapter.input_shape, adapter.class_count)
    os.makedirs(out_dir, exist_ok=True)
    paths = {kind: os.path.join(out_dir, f"{adapter.name}.{ext}")
             for kind, ext in (("model", "fnet"), ("batch", "fdst"),
                               ("logits", "logits"), ("manifest", "manifest.json"))}
    save_network(result.network, paths["model"])
    save_dataset(Dataset(features=batch.numpy(),
                         labels=logits.argmax(axis=1),
                         class_count=adapter.class_count), paths["batch"])
    write_logits(paths["logits"], logits)
    save_json(paths["manifest"], {
        "source": {"adapter": adapter.name,
                   "id": f"{adapter.name}@sha256:{checkpoint_id(module.state_dict())}",
                   "framework": f"torch {torch.__version__}"},
        "preprocessing": adapter.preprocessing,
        "mapping": result.mapping,
        "fixture": {"model": os.path.basename(paths["model"]),
                    "batch": os.path.basename(paths["batch"]),
                    "logits": os.path.basename(paths["logits"]),
                    "batch_size": batch_size,
                    "labels": "argmax of the recorded logits",
                    "tolerance": PARITY_TOLERANCE},
    })
    return paths


def main(argv=None):
    parser = argparse.ArgumentParser(prog="fnetconvert")
    parser.add_argument("--arch", choices=sorted(ADAPTERS), action="append",
                        help="adapter to export (default: all)")
    parser.add_argument("--out-dir", required=True)
    parser.add_argument("--seed", type=int, default=1234)
    parser.add_argument("--batch-size", type=int, default=32)
    args = parser.parse_args(argv)
    for name in args.arch or sorted(ADAPTERS):
        paths = export_fixture(ADAPTERS[name], args.out_dir,
                               seed=args.seed, batch_size=args.batch_size)
        print(f"{name}: wrote {', '.join(sorted(paths.values()))}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
