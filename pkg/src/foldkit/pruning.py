"""Structured magnitude pruning baseline.

Keeps the k highest-norm channels of every foldable group and deletes the
rest outright: producer rows, attached BatchNorm entries, and consumer
input columns. Shares group discovery (and hence residual coupling) with
folding, so pruned channel counts match folded ones for the same plan.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .folding.fold import sparsity_to_k
from .folding.groups import (consumer_cols, discover_groups, producer_rows,
                             set_consumer_cols, set_producer_rows)
from .nn.blocks import Network, get_block, path_str

NORM_KINDS = ("l1", "l2")


def _channel_scores(net, group, norm):
    """Per-channel importance: producer-row norms (bias included), summed
    over a group's coupled producers."""
    scores = np.zeros(group.n)
    for p in group.producers:
        rows = producer_rows(net, p)
        if norm == "l1":
            scores += np.abs(rows).sum(axis=1)
        else:
            scores += np.sqrt((rows * rows).sum(axis=1))
    return scores


@dataclass
class PruneGroupRecord:
    group_id: str
    n: int
    k: int
    kept: np.ndarray
    scores: np.ndarray
    probe_site: str
    dropped_mass: float  # squared L2 of the deleted producer rows

    def labels(self):
        """original channel -> surviving index, -1 for deleted channels."""
        labels = np.full(self.n, -1, dtype=np.int64)
        labels[self.kept] = np.arange(self.kept.size)
        return labels

    def to_json(self):
        return {"group_id": self.group_id, "n": self.n, "k": self.k,
                "kept": [int(i) for i in self.kept],
                "scores": [float(s) for s in self.scores],
                "probe_site": self.probe_site, "dropped_mass": float(self.dropped_mass)}


@dataclass
class PruneReport:
    norm: str
    groups: list = field(default_factory=list)
    total_dropped_mass: float = 0.0

    def probe_assignments(self):
        return {g.probe_site: g.labels() for g in self.groups}

    def to_json(self):
        return {"norm": self.norm, "total_dropped_mass": self.total_dropped_mass,
                "groups": [g.to_json() for g in self.groups]}


def magnitude_prune(net: Network, sparsity=None, per_group=None, norm="l2"):
    """Delete low-norm channels per group, front to back. Returns
    (pruned network, report)."""
    if norm not in NORM_KINDS:
        raise ValidationError(f"unknown norm kind {norm!r}")
    if sparsity is None and not per_group:
        raise ValidationError("prune needs a sparsity or per-group sizes")
    order = [g.group_id for g in discover_groups(net)]
    report = PruneReport(norm=norm)
    current = net
    for gid in order:
        group = next(g for g in discover_groups(current) if g.group_id == gid)
        if per_group and gid in per_group:
            k = int(per_group[gid])
            if not 1 <= k <= group.n:
                raise ValidationError(f"group {gid}: k={k} out of range for n={group.n}")
        else:
            if sparsity is None:
                raise ValidationError(f"prune plan does not cover group {gid}")
            k = sparsity_to_k(group.n, sparsity)
        scores = _channel_scores(current, group, norm)
        # stable sort keeps the lowest index first among equal scores
        keep = np.sort(np.argsort(-scores, kind="stable")[:k])

        out = current.copy()
        dropped = np.setdiff1d(np.arange(group.n), keep)
        mass = 0.0
        for c in group.consumers:
            cols = consumer_cols(out, c, group.n)
            set_consumer_cols(out, c, cols[keep])
        for p in group.producers:
            rows = producer_rows(out, p)
            mass += float((rows[dropped] ** 2).sum())
            set_producer_rows(out, p, rows[keep])
            if p.bn_path is not None:
                bn = get_block(out, p.bn_path)
                bn.gamma = bn.gamma[keep].copy()
                bn.beta = bn.beta[keep].copy()
                bn.running_mean = bn.running_mean[keep].copy()
                bn.running_var = bn.running_var[keep].copy()
        current = Network(blocks=out.blocks, input_shape=out.input_shape,
                          class_count=out.class_count)
        report.groups.append(PruneGroupRecord(
            group_id=gid, n=group.n, k=k, kept=keep, scores=scores,
            probe_site=group.probe_site, dropped_mass=mass))
        report.total_dropped_mass += mass
    return current, report
