"""Reference architectures and a small SGD trainer.

Training runs entirely on the float64 tape engine. It is meant for
reproducible experiments on synthetic data, not speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import FoldkitError, ValidationError
from ..nn.blocks import (AvgPool, BatchNorm, Conv2D, Dense, Flatten, Network,
                         ReLU, ResidualBlock, get_block, iter_blocks)
from ..nn.engine import backward, cross_entropy, forward, run_tape

ARCHITECTURES = ("mlp_bn", "mlp", "conv_bn", "residual")


def _dense(rng, fan_in, fan_out):
    w = rng.standard_normal((fan_out, fan_in)) * math.sqrt(2.0 / fan_in)
    return Dense(weight=w, bias=np.zeros(fan_out))


def _conv(rng, ci, co, k):
    fan_in = ci * k * k
    w = rng.standard_normal((co, ci, k, k)) * math.sqrt(2.0 / fan_in)
    return Conv2D(weight=w, bias=np.zeros(co), stride=1, padding=k // 2)


def _bn(c):
    return BatchNorm(gamma=np.ones(c), beta=np.zeros(c),
                     running_mean=np.zeros(c), running_var=np.ones(c))


def build_network(arch, dim=16, class_count=8, width=128, seed=0) -> Network:
    rng = np.random.default_rng((int(seed), 777))
    if arch == "mlp_bn":
        blocks = [_dense(rng, dim, width), _bn(width), ReLU(),
                  _dense(rng, width, width), _bn(width), ReLU(),
                  _dense(rng, width, width), _bn(width), ReLU(),
                  _dense(rng, width, class_count)]
        return Network(blocks, (dim,), class_count)
    if arch == "mlp":
        blocks = [_dense(rng, dim, width), ReLU(),
                  _dense(rng, width, width), ReLU(),
                  _dense(rng, width, width), ReLU(),
                  _dense(rng, width, class_count)]
        return Network(blocks, (dim,), class_count)
    if arch == "conv_bn":
        side = int(round(math.sqrt(dim)))
        if side * side != dim:
            raise ValidationError("conv_bn needs a square input dimension")
        c1, c2 = width, 2 * width
        blocks = [_conv(rng, 1, c1, 3), _bn(c1), ReLU(),
                  _conv(rng, c1, c2, 3), _bn(c2), ReLU(),
                  AvgPool(size=2), Flatten(),
                  _dense(rng, c2 * (side // 2) ** 2, class_count)]
        return Network(blocks, (1, side, side), class_count)
    if arch == "residual":
        main = [_dense(rng, width, width), _bn(width), ReLU(),
                _dense(rng, width, width), _bn(width)]
        blocks = [_dense(rng, dim, width), _bn(width), ReLU(),
                  ResidualBlock(main=main, shortcut=[]), ReLU(),
                  _dense(rng, width, class_count)]
        return Network(blocks, (dim,), class_count)
    raise ValidationError(f"unknown architecture {arch!r}")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    decay_kind: str = "l2"  # "l1" or "l2"; applies only if weight_decay > 0
    bn_momentum: float = 0.1
    seed: int = 0


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    accuracies: list = field(default_factory=list)


_PARAM_NAMES = {
    "Dense": ("weight", "bias"),
    "Conv2D": ("weight", "bias"),
    "BatchNorm": ("gamma", "beta"),
}


def _trainable(net):
    out = []
    for path, block in iter_blocks(net):
        names = _PARAM_NAMES.get(type(block).__name__)
        if names:
            out.append((path, names))
    return out


def _batch_view(features, input_shape):
    return np.ascontiguousarray(features).reshape((features.shape[0],)
                                                  + tuple(input_shape))


def train(net: Network, dataset, config: TrainConfig):
    """SGD with momentum on the cross-entropy loss. Returns
    (trained network, history). Raises on divergence."""
    if dataset.count < config.batch_size:
        raise ValidationError("dataset smaller than one batch")
    current = net.copy()
    rng = np.random.default_rng((int(config.seed), 404))
    velocity = {}
    history = TrainHistory()
    params = _trainable(current)
    decay = config.weight_decay
    for epoch in range(config.epochs):
        order = rng.permutation(dataset.count)
        losses = []
        for start in range(0, dataset.count - config.batch_size + 1,
                           config.batch_size):
            idx = order[start:start + config.batch_size]
            x = _batch_view(dataset.features[idx], current.input_shape)
            y = dataset.labels[idx]
            logits, tape = run_tape(current, x, bn_mode="batch")
            loss, dlogits = cross_entropy(logits, y)
            losses.append(loss)
            _, grads = backward(tape, dlogits, want_param_grads=True)
            for path, names in params:
                block = get_block(current, path)
                for name in names:
                    g = grads[path][name]
                    if decay > 0.0 and name in ("weight",):
                        p = getattr(block, name)
                        if config.decay_kind == "l2":
                            g = g + decay * p
                        elif config.decay_kind == "l1":
                            g = g + decay * np.sign(p)
                        else:
                            raise ValidationError(
                                f"unknown decay kind {config.decay_kind!r}")
                    key = (path, name)
                    v = velocity.get(key)
                    v = g if v is None else config.momentum * v + g
                    velocity[key] = v
                    setattr(block, name, getattr(block, name) - config.lr * v)
            # running-stat EMA from the batch statistics this step used
            for entry in _bn_entries(tape):
                bn = get_block(current, entry.path)
                m = config.bn_momentum
                bn.running_mean = (1 - m) * bn.running_mean + m * entry.cache["mean"]
                bn.running_var = np.maximum(
                    (1 - m) * bn.running_var + m * entry.cache["var"], 1e-8)
        mean_loss = float(np.mean(losses))
        if not math.isfinite(mean_loss):
            raise FoldkitError(f"training diverged at epoch {epoch}")
        history.losses.append(mean_loss)
        history.accuracies.append(evaluate(current, dataset))
    return current, history


def _bn_entries(tape):
    for entry in tape:
        if type(entry.block).__name__ == "BatchNorm":
            yield entry
        if entry.main_tape is not None:
            yield from _bn_entries(entry.main_tape)
            yield from _bn_entries(entry.shortcut_tape)


def evaluate(net: Network, dataset, batch_size=256) -> float:
    """Top-1 accuracy over the dataset, using running BatchNorm stats."""
    hits = 0
    for start in range(0, dataset.count, batch_size):
        feats = dataset.features[start:start + batch_size]
        x = _batch_view(feats, net.input_shape)
        logits = forward(net, x)
        hits += int((np.argmax(logits, axis=1)
                     == dataset.labels[start:start + batch_size]).sum())
    return hits / dataset.count


def predict_logits(net: Network, features, batch_size=256):
    outs = []
    for start in range(0, features.shape[0], batch_size):
        x = _batch_view(features[start:start + batch_size], net.input_shape)
        outs.append(forward(net, x))
    return np.concatenate(outs, axis=0)
