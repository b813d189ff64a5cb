"""Merging two structurally identical networks into one of the same shape.

The two networks are stacked into a doubled network (shared input, 2n
channels per group, block-diagonal middle layers, halved concatenated
classifier so logits are the two-model ensemble average), and the doubled
network is folded back down to n channels per group:

* free mode clusters each group's 2n stacked rows with unconstrained
  k-means (k = n),
* paired mode constrains every cluster to exactly one row from each
  network, found per group by a minimum-cost assignment on the pairwise
  row distances, swept front to back until the pairings stabilize.

Producer means over a paired cluster reproduce the usual half-sum merge of
matched channels; consumer folding plus the halved classifier realizes the
halving on the read side.

`weight_matching` is an independently formulated route to the same paired
permutations (maximize the aligned weight inner products per layer); the
two must agree away from exact cost ties.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..clustering import Assignment, fold_cost, hungarian, kmeans
from ..errors import ValidationError
from ..nn.blocks import (AvgPool, BatchNorm, Conv2D, Dense, Flatten, Network,
                         ReLU, ResidualBlock, get_block, iter_blocks,
                         path_str)
from .fold import fold_group
from .groups import consumer_cols, discover_groups, producer_rows


def _check_same_structure(a: Network, b: Network):
    if a.input_shape != b.input_shape or a.class_count != b.class_count:
        raise ValidationError("networks differ in input shape or class count")
    pa, pb = list(iter_blocks(a)), list(iter_blocks(b))
    if len(pa) != len(pb):
        raise ValidationError("networks have different block counts")
    for (path_a, ba), (path_b, bb) in zip(pa, pb):
        if path_a != path_b or type(ba) is not type(bb):
            raise ValidationError(f"architectures differ at {path_str(path_a)}")
        if isinstance(ba, (Dense, Conv2D)) and ba.weight.shape != bb.weight.shape:
            raise ValidationError(f"weight shapes differ at {path_str(path_a)}")
        if isinstance(ba, Conv2D) and (ba.stride != bb.stride or ba.padding != bb.padding):
            raise ValidationError(f"conv hyperparameters differ at {path_str(path_a)}")
        if isinstance(ba, BatchNorm) and ba.epsilon != bb.epsilon:
            raise ValidationError(f"BatchNorm epsilon differs at {path_str(path_a)}")
        if isinstance(ba, AvgPool) and (ba.size != bb.size or ba.stride != bb.stride):
            raise ValidationError(f"pool hyperparameters differ at {path_str(path_a)}")


def _producer_roles(net: Network):
    """Producers reading the raw input, and the (single) classifier producer."""
    groups = discover_groups(net)
    if not groups:
        raise ValidationError("no foldable groups: nothing to merge")
    consumed = {path_str(c.path) for g in groups for c in g.consumers}
    producing = {path_str(p.path) for g in groups for p in g.producers}
    first, classifier = set(), set()
    seen_producer = False
    for path, blk in iter_blocks(net):
        if isinstance(blk, (Dense, Conv2D)):
            tag = path_str(path)
            if tag not in consumed:
                if seen_producer:
                    raise ValidationError(
                        f"producer {tag} reads channels no foldable group owns; cannot merge")
                first.add(tag)
            if tag not in producing:
                classifier.add(tag)
        if len(path) == 1 and isinstance(blk, (Dense, Conv2D, ResidualBlock)):
            seen_producer = True
    if len(classifier) != 1:
        raise ValidationError(
            f"expected exactly one classifier producer, found {sorted(classifier)}")
    return first, classifier


def _double_producer(ba, bb, tag, first, classifier):
    stack_rows = tag in first
    halve_cols = tag in classifier
    if stack_rows and halve_cols:
        raise ValidationError("single-producer networks cannot be merged")
    if isinstance(ba, Dense):
        if stack_rows:
            return Dense(weight=np.vstack([ba.weight, bb.weight]),
                         bias=np.concatenate([ba.bias, bb.bias]))
        if halve_cols:
            return Dense(weight=np.hstack([ba.weight, bb.weight]) / 2.0,
                         bias=(ba.bias + bb.bias) / 2.0)
        out, inp = ba.weight.shape
        w = np.zeros((2 * out, 2 * inp))
        w[:out, :inp] = ba.weight
        w[out:, inp:] = bb.weight
        return Dense(weight=w, bias=np.concatenate([ba.bias, bb.bias]))
    if stack_rows:
        return Conv2D(weight=np.concatenate([ba.weight, bb.weight], axis=0),
                      bias=np.concatenate([ba.bias, bb.bias]),
                      stride=ba.stride, padding=ba.padding)
    if halve_cols:
        return Conv2D(weight=np.concatenate([ba.weight, bb.weight], axis=1) / 2.0,
                      bias=(ba.bias + bb.bias) / 2.0,
                      stride=ba.stride, padding=ba.padding)
    co, ci, kh, kw = ba.weight.shape
    w = np.zeros((2 * co, 2 * ci, kh, kw))
    w[:co, :ci] = ba.weight
    w[co:, ci:] = bb.weight
    return Conv2D(weight=w, bias=np.concatenate([ba.bias, bb.bias]),
                  stride=ba.stride, padding=ba.padding)


def _double_block(ba, bb, path, first, classifier):
    if isinstance(ba, (Dense, Conv2D)):
        return _double_producer(ba, bb, path_str(path), first, classifier)
    if isinstance(ba, BatchNorm):
        return BatchNorm(gamma=np.concatenate([ba.gamma, bb.gamma]),
                         beta=np.concatenate([ba.beta, bb.beta]),
                         running_mean=np.concatenate([ba.running_mean, bb.running_mean]),
                         running_var=np.concatenate([ba.running_var, bb.running_var]),
                         epsilon=ba.epsilon)
    if isinstance(ba, ResidualBlock):
        main = [_double_block(m, bm, path + ("main", j), first, classifier)
                for j, (m, bm) in enumerate(zip(ba.main, bb.main))]
        short = [_double_block(s, bs, path + ("shortcut", j), first, classifier)
                 for j, (s, bs) in enumerate(zip(ba.shortcut, bb.shortcut))]
        return ResidualBlock(main=main, shortcut=short)
    if isinstance(ba, ReLU):
        return ReLU()
    if isinstance(ba, Flatten):
        return Flatten()
    if isinstance(ba, AvgPool):
        return AvgPool(size=ba.size, stride=ba.stride)
    raise ValidationError(f"cannot merge block type {type(ba)!r}")


def doubled_network(a: Network, b: Network) -> Network:
    """Both networks side by side: shared input, 2x channels, averaged logits."""
    _check_same_structure(a, b)
    first, classifier = _producer_roles(a)
    blocks = [_double_block(ba, bb, (i,), first, classifier)
              for i, (ba, bb) in enumerate(zip(a.blocks, b.blocks))]
    return Network(blocks=blocks, input_shape=a.input_shape, class_count=a.class_count)


# ---------------------------------------------------------------------------
# per-channel rows used for matching and for free-mode clustering

def merge_rows(net: Network, group) -> np.ndarray:
    """Flattened per-channel rows: producer rows (bias included), BatchNorm
    parameter columns, then consumer column slices."""
    parts = []
    for p in group.producers:
        parts.append(producer_rows(net, p))
        if p.bn_path is not None:
            bn = get_block(net, p.bn_path)
            parts.append(np.stack([bn.gamma, bn.beta, bn.running_mean, bn.running_var], axis=1))
    for c in group.consumers:
        parts.append(consumer_cols(net, c, group.n))
    return np.hstack(parts)


def _aligned_rows(net, group, perms, upstream_of, downstream_of, n_of):
    """merge_rows with neighbor channel spaces reordered by `perms`, making
    rows comparable across the two networks."""
    parts = []
    for p in group.producers:
        rows = producer_rows(net, p)
        up = upstream_of.get(path_str(p.path))
        if up is not None:
            n_in = n_of[up]
            m = (rows.shape[1] - 1) // n_in
            w = rows[:, :-1].reshape(rows.shape[0], n_in, m)[:, perms[up], :]
            rows = np.hstack([w.reshape(rows.shape[0], -1), rows[:, -1:]])
        parts.append(rows)
        if p.bn_path is not None:
            bn = get_block(net, p.bn_path)
            parts.append(np.stack([bn.gamma, bn.beta, bn.running_mean, bn.running_var], axis=1))
    for c in group.consumers:
        cols = consumer_cols(net, c, group.n)
        down = downstream_of.get(path_str(c.path))
        if down is not None:
            n_out = n_of[down]
            m = cols.shape[1] // n_out
            w = cols.reshape(cols.shape[0], n_out, m)[:, perms[down], :]
            cols = w.reshape(cols.shape[0], -1)
        parts.append(cols)
    return np.hstack(parts)


def _pairing_sweeps(a: Network, b: Network, pair_fn, max_sweeps=30):
    """Front-to-back per-group assignment sweeps until the pairings stabilize.

    Returns perms with perms[gid][i] = b-channel matched to a-channel i.
    """
    groups_a = discover_groups(a)
    groups_b = {g.group_id: g for g in discover_groups(b)}
    upstream_of = {path_str(c.path): g.group_id for g in groups_a for c in g.consumers}
    downstream_of = {path_str(p.path): g.group_id for g in groups_a for p in g.producers}
    n_of = {g.group_id: g.n for g in groups_a}
    identity = {gid: np.arange(n) for gid, n in n_of.items()}
    perms = {gid: np.arange(n) for gid, n in n_of.items()}
    for _ in range(max_sweeps):
        changed = False
        for g in groups_a:
            rows_a = _aligned_rows(a, g, identity, upstream_of, downstream_of, n_of)
            rows_b = _aligned_rows(b, groups_b[g.group_id], perms, upstream_of,
                                   downstream_of, n_of)
            new_perm = pair_fn(rows_a, rows_b)
            if not np.array_equal(new_perm, perms[g.group_id]):
                perms[g.group_id] = new_perm
                changed = True
        if not changed:
            break
    return perms


def _euclidean_pairing(rows_a, rows_b):
    d = ((rows_a[:, None, :] - rows_b[None, :, :]) ** 2).sum(axis=2)
    cols, _ = hungarian(d)
    return cols


def _innerproduct_pairing(rows_a, rows_b):
    cols, _ = hungarian(-(rows_a @ rows_b.T))
    return cols


def weight_matching(a: Network, b: Network, max_sweeps=30):
    """Channel permutations aligning b to a, by per-group assignment problems
    maximizing the aligned weight inner products."""
    _check_same_structure(a, b)
    return _pairing_sweeps(a, b, _innerproduct_pairing, max_sweeps)


@dataclass
class MergeGroupRecord:
    group_id: str
    n: int
    labels: np.ndarray           # over the doubled group's 2n rows
    pairing: np.ndarray | None   # paired mode only
    cost: float

    def to_json(self):
        return {"group_id": self.group_id, "n": self.n,
                "labels": [int(x) for x in self.labels],
                "pairing": None if self.pairing is None else [int(x) for x in self.pairing],
                "cost": float(self.cost)}


@dataclass
class MergeReport:
    mode: str
    groups: list = field(default_factory=list)
    total_cost: float = 0.0

    def to_json(self):
        return {"mode": self.mode, "total_cost": self.total_cost,
                "groups": [g.to_json() for g in self.groups]}


MERGE_MODES = ("paired", "free")


def merge_networks(a: Network, b: Network, mode="paired", seed=0):
    """Merge two same-architecture networks. Returns (merged, report)."""
    if mode not in ("free", "paired"):
        raise ValidationError(f"unknown merge mode {mode!r}")
    doubled = doubled_network(a, b)
    order = [(g.group_id, g.n // 2) for g in discover_groups(doubled)]

    pairings = _pairing_sweeps(a, b, _euclidean_pairing) if mode == "paired" else None

    report = MergeReport(mode=mode)
    current = doubled
    for index, (gid, n) in enumerate(order):
        group = next(g for g in discover_groups(current) if g.group_id == gid)
        rows = merge_rows(current, group)
        if mode == "paired":
            perm = pairings[gid]
            labels = np.empty(2 * n, dtype=np.int64)
            labels[:n] = np.arange(n)
            labels[n + perm] = np.arange(n)
            assignment = Assignment(labels=labels, k=n)
            cost = fold_cost(assignment, rows)
        else:
            result = kmeans(rows, n, seed=(int(seed) * 1000003 + index) % (2 ** 63))
            assignment, cost, perm = result.assignment, result.cost, None
        current = fold_group(current, group, assignment)
        report.groups.append(MergeGroupRecord(
            group_id=gid, n=n, labels=assignment.labels.copy(),
            pairing=None if perm is None else perm.copy(), cost=cost))
        report.total_cost += cost
    return current, report
