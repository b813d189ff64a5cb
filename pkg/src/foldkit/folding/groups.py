"""Foldable-group discovery and channel-space flattening.

A foldable group is one output-channel space together with everything that
reads or writes it: one or more producers (Dense/Conv2D rows, plus any
attached BatchNorm), and the consumers whose input columns are indexed by
those channels. Identity residual blocks couple the incoming producer with
the main path's final producer into a single shared group; projection
shortcuts couple the shortcut producer with the main path's final producer.

The final classifier's output space has no consumers and is never foldable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError
from ..nn.blocks import (AvgPool, BatchNorm, Conv2D, Dense, Flatten, Network,
                         ReLU, ResidualBlock, block_output_shape, get_block,
                         path_str)


@dataclass
class ProducerRef:
    path: tuple
    bn_path: tuple | None = None


@dataclass
class ConsumerRef:
    path: tuple
    multiplicity: int = 1  # input columns per channel (dense heads after conv)


@dataclass
class FoldableGroup:
    producers: list
    consumers: list
    n: int
    kind: str            # chain | residual_identity | residual_projection
    probe_site: str      # block-output path where the channels are observable

    @property
    def group_id(self):
        return path_str(self.producers[0].path)

    @property
    def has_bn(self):
        return all(p.bn_path is not None for p in self.producers)


class _OpenGroup:
    def __init__(self, producer: ProducerRef, n: int, probe: tuple):
        self.producers = [producer]
        self.consumers = []
        self.n = n
        self.kind = "chain"
        self.probe = probe
        self.awaiting_bn = True  # BatchNorm may still attach to the newest producer

    def finish(self):
        return FoldableGroup(producers=self.producers, consumers=self.consumers,
                             n=self.n, kind=self.kind, probe_site=path_str(self.probe))


def _consumer_ref(block, path, in_shape, n):
    if isinstance(block, Dense):
        feats = in_shape[0]
        if feats % n:
            raise ValidationError(
                f"consumer {path_str(path)} input width {feats} not a multiple of {n} channels")
        return ConsumerRef(path=path, multiplicity=feats // n)
    return ConsumerRef(path=path, multiplicity=1)


def _remove_last(lst, item):
    for idx in range(len(lst) - 1, -1, -1):
        if lst[idx] is item:
            del lst[idx]
            return
    raise AssertionError("item not present")


class _ChainWalker:
    """Walks one linear block sequence, maintaining the open channel group."""

    def __init__(self, open_group, shape, groups_out):
        self.open = open_group
        self.shape = shape
        self.groups = groups_out  # groups closed in forward order

    def step(self, block, path):
        if isinstance(block, (Dense, Conv2D)):
            if self.open is not None:
                self.open.consumers.append(_consumer_ref(block, path, self.shape, self.open.n))
                self.groups.append(self.open)
            self.open = _OpenGroup(ProducerRef(path=path), block.out_channels, probe=path)
        elif isinstance(block, BatchNorm):
            if (self.open is None or not self.open.awaiting_bn
                    or self.open.producers[-1].bn_path is not None):
                raise ValidationError(
                    f"BatchNorm at {path_str(path)} does not directly follow a producer")
            self.open.producers[-1].bn_path = path
            self.open.probe = path
        elif isinstance(block, ReLU):
            if self.open is not None:
                self.open.probe = path
                self.open.awaiting_bn = False
        elif isinstance(block, (AvgPool, Flatten)):
            if self.open is not None:
                self.open.awaiting_bn = False
        else:
            raise ValidationError(f"unsupported block inside a chain: {type(block)!r}")
        self.shape = block_output_shape(block, self.shape, path)


def _depth_key(path):
    # document order of the primary producer; parallel branches rank main first
    if len(path) == 1:
        return (path[0], 0, 0, 0)
    return (path[0], 1, 0 if path[1] == "main" else 1, path[2])


def discover_groups(net: Network):
    """All foldable groups, ordered front to back by producer depth
    (classifier output excluded)."""
    groups = []
    walker = _ChainWalker(None, net.input_shape, groups)
    for i, b in enumerate(net.blocks):
        if isinstance(b, ResidualBlock):
            _walk_residual(b, (i,), walker, groups)
        else:
            walker.step(b, (i,))
    done = [g.finish() for g in groups if g.consumers]
    return sorted(done, key=lambda g: _depth_key(g.producers[0].path))


def _branch_walk(blocks, path, branch, enclosing, in_shape, groups):
    w = _ChainWalker(enclosing, in_shape, groups)
    for j, blk in enumerate(blocks):
        if isinstance(blk, ResidualBlock):
            raise ValidationError("nested residual blocks are not supported")
        w.step(blk, path + (branch, j))
    return w


def _walk_residual(block, path, outer, groups):
    in_shape = outer.shape
    enclosing = outer.open
    if enclosing is not None:
        enclosing.awaiting_bn = False  # a branch BatchNorm never belongs to it

    main = _branch_walk(block.main, path, "main", enclosing, in_shape, groups)
    outer.shape = block_output_shape(block, in_shape, path)

    if not block.shortcut:
        # Identity coupling: the enclosing group flows through the addition,
        # so the close triggered by main's first producer is undone and the
        # main path's final producer joins the group as a co-producer.
        if enclosing is None:
            outer.open = None  # raw input mixes into the output: not foldable
            return
        if main.open is not enclosing:
            _remove_last(groups, enclosing)
            if main.open.n != enclosing.n:
                raise ValidationError(f"residual {path_str(path)}: channel count mismatch")
            enclosing.producers.extend(main.open.producers)
        enclosing.kind = "residual_identity"
        enclosing.probe = path
        outer.open = enclosing
        return

    short = _branch_walk(block.shortcut, path, "shortcut", enclosing, in_shape, groups)
    if main.open is enclosing or short.open is enclosing:
        raise ValidationError(
            f"residual {path_str(path)}: projection shortcut requires a producer in both branches")
    if enclosing is not None:
        # both branch heads consumed it; keep the first close, drop the second
        _remove_last(groups, enclosing)
    if main.open.n != short.open.n:
        raise ValidationError(f"residual {path_str(path)}: branch channel count mismatch")
    merged = short.open  # shortcut producer listed first in the coupled group
    merged.producers.extend(main.open.producers)
    merged.kind = "residual_projection"
    merged.probe = path
    merged.awaiting_bn = False
    outer.open = merged


# ---------------------------------------------------------------------------
# flattening between blocks and row space

def producer_rows(net: Network, producer: ProducerRef) -> np.ndarray:
    """(n, d) rows of a producer: weights flattened per output channel, bias last."""
    b = get_block(net, producer.path)
    w = b.weight.reshape(b.weight.shape[0], -1)
    return np.hstack([w, b.bias[:, None]])


def consumer_cols(net: Network, consumer: ConsumerRef, n: int) -> np.ndarray:
    """(n, d) input-column slices of a consumer, one row per upstream channel."""
    b = get_block(net, consumer.path)
    if isinstance(b, Dense):
        m = consumer.multiplicity
        w = b.weight.reshape(b.weight.shape[0], n, m)
        return np.transpose(w, (1, 0, 2)).reshape(n, -1)
    if isinstance(b, Conv2D):
        w = b.weight  # (co, n, kh, kw)
        return np.transpose(w, (1, 0, 2, 3)).reshape(n, -1)
    raise ValidationError(f"block at {path_str(consumer.path)} cannot consume channels")


def set_producer_rows(net: Network, producer: ProducerRef, rows: np.ndarray):
    b = get_block(net, producer.path)
    k = rows.shape[0]
    w, bias = rows[:, :-1], rows[:, -1]
    if isinstance(b, Dense):
        b.weight, b.bias = w.copy(), bias.copy()
    elif isinstance(b, Conv2D):
        b.weight = w.reshape((k,) + b.weight.shape[1:]).copy()
        b.bias = bias.copy()
    else:
        raise ValidationError(f"block at {path_str(producer.path)} is not a producer")


def set_consumer_cols(net: Network, consumer: ConsumerRef, cols: np.ndarray):
    b = get_block(net, consumer.path)
    k = cols.shape[0]
    if isinstance(b, Dense):
        m = consumer.multiplicity
        w = cols.reshape(k, b.weight.shape[0], m)
        b.weight = np.transpose(w, (1, 0, 2)).reshape(b.weight.shape[0], k * m).copy()
    elif isinstance(b, Conv2D):
        co, _, kh, kw = b.weight.shape
        w = cols.reshape(k, co, kh, kw)
        b.weight = np.transpose(w, (1, 0, 2, 3)).copy()
    else:
        raise ValidationError(f"block at {path_str(consumer.path)} cannot consume channels")
