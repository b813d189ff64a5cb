"""BatchNorm running-statistics recalibration."""

from __future__ import annotations

import numpy as np

from ..errors import ValidationError
from .blocks import BatchNorm, Network, get_block, path_str, RUNNING_VAR_FLOOR
from .engine import run_tape, _walk_tape


def bn_recalibrate(net: Network, batches) -> Network:
    """Replace every BatchNorm's running stats with empirical moments.

    Each batch is run with batch-statistics normalization (so downstream
    blocks see the same stream the new statistics describe), the
    pre-normalization inputs are pooled over all batches, and running
    mean/var are set to the pooled population moments.
    """
    batches = list(batches)
    if not batches:
        raise ValidationError("bn_recalibrate needs at least one batch")
    collected = {}
    for batch in batches:
        _, tape = run_tape(net, batch, bn_mode="batch")
        for e in _walk_tape(tape):
            if isinstance(e.block, BatchNorm):
                z = e.x
                flat = np.moveaxis(z, 1, -1).reshape(-1, z.shape[1]) if z.ndim == 4 else z
                collected.setdefault(e.path, []).append(flat)
    out = net.copy()
    for path, chunks in collected.items():
        pooled = np.concatenate(chunks, axis=0)
        bn = get_block(out, path)
        bn.running_mean = pooled.mean(axis=0)
        bn.running_var = np.maximum(pooled.var(axis=0), RUNNING_VAR_FLOOR)
    return out
