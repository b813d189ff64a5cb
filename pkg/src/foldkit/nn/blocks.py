"""Network container and block types.

A network is a flat list of blocks plus one optional level of residual
nesting. Weights live in float64 while a model is in memory; serialization
quantizes to float32. Networks are treated as immutable: every transform
returns a fresh deep copy.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError, ValidationError

RUNNING_VAR_FLOOR = 1e-8


def _as64(a):
    return np.asarray(a, dtype=np.float64)


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray    # (out,)

    kind = "Dense"

    def __post_init__(self):
        self.weight = _as64(self.weight)
        self.bias = _as64(self.bias)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValidationError(f"Dense weight/bias shapes inconsistent: "
                                  f"{self.weight.shape} vs {self.bias.shape}")

    @property
    def out_channels(self):
        return self.weight.shape[0]


@dataclass
class Conv2D:
    weight: np.ndarray  # (c_out, c_in, kh, kw)
    bias: np.ndarray    # (c_out,)
    stride: int = 1
    padding: int = 0

    kind = "Conv2D"

    def __post_init__(self):
        self.weight = _as64(self.weight)
        self.bias = _as64(self.bias)
        if self.weight.ndim != 4 or self.bias.shape != (self.weight.shape[0],):
            raise ValidationError(f"Conv2D weight/bias shapes inconsistent: "
                                  f"{self.weight.shape} vs {self.bias.shape}")

    @property
    def out_channels(self):
        return self.weight.shape[0]


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5

    kind = "BatchNorm"

    def __post_init__(self):
        self.gamma = _as64(self.gamma)
        self.beta = _as64(self.beta)
        self.running_mean = _as64(self.running_mean)
        self.running_var = _as64(self.running_var)
        n = self.gamma.shape
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != n:
                raise ValidationError(f"BatchNorm parameter {name} shape {getattr(self, name).shape} != {n}")
        # running variance must stay strictly positive
        self.running_var = np.maximum(self.running_var, RUNNING_VAR_FLOOR)

    @property
    def channels(self):
        return self.gamma.shape[0]


@dataclass
class ReLU:
    kind = "ReLU"


@dataclass
class AvgPool:
    size: int
    stride: int | None = None  # defaults to size (non-overlapping)

    kind = "AvgPool"

    def __post_init__(self):
        if self.stride is None:
            self.stride = self.size


@dataclass
class Flatten:
    kind = "Flatten"


@dataclass
class ResidualBlock:
    main: list = field(default_factory=list)
    shortcut: list = field(default_factory=list)  # empty -> identity

    kind = "ResidualBlock"


BLOCK_KINDS = {c.kind: c for c in (Dense, Conv2D, BatchNorm, ReLU, AvgPool, Flatten, ResidualBlock)}


@dataclass
class Network:
    blocks: list
    input_shape: tuple  # per-sample shape, excluding batch dim
    class_count: int

    def __post_init__(self):
        self.input_shape = tuple(self.input_shape)
        validate_network(self)

    def copy(self) -> "Network":
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# block addressing: a path is a tuple such as (3,) or (3, "main", 1)

def iter_blocks(net):
    """Yield (path, block) over all blocks, depth-first, in forward order."""
    for i, b in enumerate(net.blocks):
        if isinstance(b, ResidualBlock):
            for j, mb in enumerate(b.main):
                yield (i, "main", j), mb
            for j, sb in enumerate(b.shortcut):
                yield (i, "shortcut", j), sb
            yield (i,), b
        else:
            yield (i,), b


def get_block(net, path):
    b = net.blocks[path[0]]
    if len(path) == 1:
        return b
    branch = b.main if path[1] == "main" else b.shortcut
    return branch[path[2]]


def set_block(net, path, new_block):
    if len(path) == 1:
        net.blocks[path[0]] = new_block
    else:
        b = net.blocks[path[0]]
        branch = b.main if path[1] == "main" else b.shortcut
        branch[path[2]] = new_block


def path_str(path):
    return ".".join(str(p) for p in path)


# ---------------------------------------------------------------------------
# shape propagation

def block_output_shape(block, in_shape, path=()):
    """Per-sample output shape of one block; raises ShapeError on mismatch."""
    if isinstance(block, Dense):
        if len(in_shape) != 1 or in_shape[0] != block.weight.shape[1]:
            raise ShapeError(path_str(path), f"Dense expects ({block.weight.shape[1]},), got {in_shape}")
        return (block.weight.shape[0],)
    if isinstance(block, Conv2D):
        if len(in_shape) != 3 or in_shape[0] != block.weight.shape[1]:
            raise ShapeError(path_str(path), f"Conv2D expects (c={block.weight.shape[1]}, h, w), got {in_shape}")
        _, _, kh, kw = block.weight.shape
        h = (in_shape[1] + 2 * block.padding - kh) // block.stride + 1
        w = (in_shape[2] + 2 * block.padding - kw) // block.stride + 1
        if h <= 0 or w <= 0:
            raise ShapeError(path_str(path), f"Conv2D output collapses to {(h, w)} on input {in_shape}")
        return (block.weight.shape[0], h, w)
    if isinstance(block, BatchNorm):
        if in_shape[0] != block.channels:
            raise ShapeError(path_str(path), f"BatchNorm over {block.channels} channels, input has {in_shape[0]}")
        return in_shape
    if isinstance(block, ReLU):
        return in_shape
    if isinstance(block, AvgPool):
        if len(in_shape) != 3:
            raise ShapeError(path_str(path), f"AvgPool expects (c, h, w), got {in_shape}")
        c, h, w = in_shape
        oh = (h - block.size) // block.stride + 1
        ow = (w - block.size) // block.stride + 1
        if oh <= 0 or ow <= 0:
            raise ShapeError(path_str(path), f"AvgPool window {block.size} too large for {in_shape}")
        return (c, oh, ow)
    if isinstance(block, Flatten):
        return (int(np.prod(in_shape)),)
    if isinstance(block, ResidualBlock):
        shape = in_shape
        for j, mb in enumerate(block.main):
            shape = block_output_shape(mb, shape, path + ("main", j))
        s_shape = in_shape
        for j, sb in enumerate(block.shortcut):
            s_shape = block_output_shape(sb, s_shape, path + ("shortcut", j))
        if shape != s_shape:
            raise ShapeError(path_str(path), f"residual branches disagree: main {shape} vs shortcut {s_shape}")
        return shape
    raise ValidationError(f"unknown block type {type(block)!r}")


def output_shapes(net):
    """Shapes after each top-level block, keyed by path string."""
    shapes = {}
    shape = net.input_shape
    for i, b in enumerate(net.blocks):
        if isinstance(b, ResidualBlock):
            s = shape
            for j, mb in enumerate(b.main):
                s = block_output_shape(mb, s, (i, "main", j))
                shapes[path_str((i, "main", j))] = s
            s2 = shape
            for j, sb in enumerate(b.shortcut):
                s2 = block_output_shape(sb, s2, (i, "shortcut", j))
                shapes[path_str((i, "shortcut", j))] = s2
        shape = block_output_shape(b, shape, (i,))
        shapes[path_str((i,))] = shape
    return shapes


def validate_network(net):
    shapes = output_shapes(net)
    if not net.blocks:
        raise ValidationError("network has no blocks")
    final = shapes[path_str((len(net.blocks) - 1,))]
    if final != (net.class_count,):
        raise ValidationError(f"network output shape {final} != class count ({net.class_count},)")
    for path, b in iter_blocks(net):
        if isinstance(b, BatchNorm) and np.any(b.running_var <= 0):
            raise ValidationError(f"block {path_str(path)}: running_var must be positive")
    return shapes
