"""Forward evaluation, activation tracing, and reverse-mode gradients.

One tape-based engine serves three callers: plain inference, the trainer
(parameter gradients, batch-stat BatchNorm), and input-space optimization
(input gradients with statistics-matching terms injected at BatchNorm
inputs). All arithmetic is float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ShapeError, ValidationError
from .blocks import (AvgPool, BatchNorm, Conv2D, Dense, Flatten, Network,
                     ReLU, ResidualBlock, path_str)


# ---------------------------------------------------------------------------
# im2col helpers

def im2col(x, kh, kw, stride, padding):
    """(N, C, H, W) -> (N, C*kh*kw, OH*OW) patch matrix."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    sn, sc, sh, sw = x.strides
    windows = np.lib.stride_tricks.as_strided(
        x, shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)
    return windows.reshape(n, c * kh * kw, oh * ow).copy(), (oh, ow)


def col2im(cols, x_shape, kh, kw, stride, padding):
    """Adjoint of im2col: scatter-add patches back onto the padded image."""
    n, c, h, w = x_shape
    hp, wp = h + 2 * padding, w + 2 * padding
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, hp, wp))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def _pool_windows(x, size, stride):
    n, c, h, w = x.shape
    oh = (h - size) // stride + 1
    ow = (w - size) // stride + 1
    sn, sc, sh, sw = x.strides
    return np.lib.stride_tricks.as_strided(
        x, shape=(n, c, oh, ow, size, size),
        strides=(sn, sc, sh * stride, sw * stride, sh, sw), writeable=False)


# ---------------------------------------------------------------------------
# tape

@dataclass
class TapeEntry:
    path: tuple
    block: object
    x: np.ndarray
    cache: dict = field(default_factory=dict)
    out: np.ndarray = None
    main_tape: list = None
    shortcut_tape: list = None


def _channel_axes(x):
    return (0, 2, 3) if x.ndim == 4 else (0,)


def _bn_forward(bn, x, mode):
    axes = _channel_axes(x)
    if mode == "batch":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)  # population variance
    else:
        mean, var = bn.running_mean, bn.running_var
    shape = (1, -1) + (1,) * (x.ndim - 2)
    inv = 1.0 / np.sqrt(var + bn.epsilon)
    xhat = (x - mean.reshape(shape)) * inv.reshape(shape)
    out = bn.gamma.reshape(shape) * xhat + bn.beta.reshape(shape)
    return out, {"mean": mean, "var": var, "inv": inv, "xhat": xhat, "mode": mode}


def _block_forward(block, x, path, tape, bn_mode):
    entry = TapeEntry(path=path, block=block, x=x)
    if isinstance(block, Dense):
        if x.ndim != 2 or x.shape[1] != block.weight.shape[1]:
            raise ShapeError(path_str(path),
                             f"Dense expects (n, {block.weight.shape[1]}), got {x.shape}")
        out = x @ block.weight.T + block.bias
    elif isinstance(block, Conv2D):
        if x.ndim != 4 or x.shape[1] != block.weight.shape[1]:
            raise ShapeError(path_str(path),
                             f"Conv2D expects (n, {block.weight.shape[1]}, h, w), got {x.shape}")
        co, ci, kh, kw = block.weight.shape
        cols, (oh, ow) = im2col(x, kh, kw, block.stride, block.padding)
        out = np.einsum("op,npq->noq", block.weight.reshape(co, -1), cols)
        out = out.reshape(x.shape[0], co, oh, ow) + block.bias.reshape(1, -1, 1, 1)
        entry.cache["cols"] = cols
    elif isinstance(block, BatchNorm):
        if x.shape[1] != block.channels:
            raise ShapeError(path_str(path),
                             f"BatchNorm over {block.channels} channels, input has {x.shape[1]}")
        out, cache = _bn_forward(block, x, bn_mode)
        entry.cache.update(cache)
    elif isinstance(block, ReLU):
        out = np.maximum(x, 0.0)
    elif isinstance(block, AvgPool):
        if x.ndim != 4:
            raise ShapeError(path_str(path), f"AvgPool expects (n, c, h, w), got {x.shape}")
        out = _pool_windows(x, block.size, block.stride).mean(axis=(4, 5))
    elif isinstance(block, Flatten):
        out = x.reshape(x.shape[0], -1)
    elif isinstance(block, ResidualBlock):
        m, m_tape = x, []
        for j, mb in enumerate(block.main):
            m, e = _block_forward(mb, m, path + ("main", j), m_tape, bn_mode)
            m_tape.append(e)
        s, s_tape = x, []
        for j, sb in enumerate(block.shortcut):
            s, e = _block_forward(sb, s, path + ("shortcut", j), s_tape, bn_mode)
            s_tape.append(e)
        if m.shape != s.shape:
            raise ShapeError(path_str(path), f"residual branches disagree: {m.shape} vs {s.shape}")
        out = m + s
        entry.main_tape, entry.shortcut_tape = m_tape, s_tape
    else:
        raise ValidationError(f"unknown block type {type(block)!r}")
    entry.out = out
    return out, entry


def run_tape(net: Network, batch, bn_mode="running"):
    """Forward pass recording every intermediate; returns (logits, tape)."""
    x = np.asarray(batch, dtype=np.float64)
    if x.shape[1:] != net.input_shape:
        raise ShapeError("input", f"expected (n, {net.input_shape}), got {x.shape}")
    tape = []
    for i, block in enumerate(net.blocks):
        x, entry = _block_forward(block, x, (i,), tape, bn_mode)
        tape.append(entry)
    return x, tape


def forward(net: Network, batch) -> np.ndarray:
    """Inference-mode logits for a batch."""
    logits, _ = run_tape(net, batch)
    return logits


# ---------------------------------------------------------------------------
# tracing

@dataclass
class SiteStats:
    mean: np.ndarray   # per channel
    var: np.ndarray    # per channel, population
    raw: np.ndarray | None = None  # (samples, channels) when requested


def _site_stats(x, keep_raw):
    if x.ndim == 4:
        flat = np.moveaxis(x, 1, -1).reshape(-1, x.shape[1])
    else:
        flat = x
    return SiteStats(mean=flat.mean(axis=0), var=flat.var(axis=0),
                     raw=flat if keep_raw else None)


def _walk_tape(tape):
    for e in tape:
        if e.main_tape is not None:
            yield from _walk_tape(e.main_tape)
            yield from _walk_tape(e.shortcut_tape)
        yield e


def forward_trace(net: Network, batch, sites=None, keep_raw=False):
    """Logits plus per-channel mean/variance at requested block-output sites.

    `sites` is a collection of path strings (see path_str); None traces every
    block output.
    """
    logits, tape = run_tape(net, batch)
    wanted = None if sites is None else set(sites)
    stats = {}
    for e in _walk_tape(tape):
        key = path_str(e.path)
        if wanted is None or key in wanted:
            stats[key] = _site_stats(e.out, keep_raw)
    if wanted is not None:
        missing = wanted - stats.keys()
        if missing:
            raise ValidationError(f"unknown trace sites: {sorted(missing)}")
    return logits, stats


# ---------------------------------------------------------------------------
# backward

def _bn_backward(entry, dy, grads):
    bn, x = entry.block, entry.x
    axes = _channel_axes(x)
    shape = (1, -1) + (1,) * (x.ndim - 2)
    xhat, inv = entry.cache["xhat"], entry.cache["inv"]
    if grads is not None:
        grads.setdefault(entry.path, {})
        grads[entry.path]["gamma"] = (dy * xhat).sum(axis=axes)
        grads[entry.path]["beta"] = dy.sum(axis=axes)
    g = bn.gamma.reshape(shape)
    if entry.cache["mode"] == "running":
        return dy * g * inv.reshape(shape)
    m = x.size / x.shape[1]
    dxhat = dy * g
    mean = entry.cache["mean"].reshape(shape)
    dvar = (dxhat * (x - mean)).sum(axis=axes) * (-0.5) * inv ** 3
    dmean = -(dxhat.sum(axis=axes)) * inv + dvar * (-2.0) * (x - mean).sum(axis=axes) / m
    return (dxhat * inv.reshape(shape)
            + (dvar.reshape(shape) * 2.0 * (x - mean) + dmean.reshape(shape)) / m)


def _block_backward(entry, dy, grads, injections):
    block = entry.block
    if isinstance(block, Dense):
        if grads is not None:
            grads.setdefault(entry.path, {})
            grads[entry.path]["weight"] = dy.T @ entry.x
            grads[entry.path]["bias"] = dy.sum(axis=0)
        dx = dy @ block.weight
    elif isinstance(block, Conv2D):
        co, ci, kh, kw = block.weight.shape
        n = dy.shape[0]
        dflat = dy.reshape(n, co, -1)
        if grads is not None:
            grads.setdefault(entry.path, {})
            dw = np.einsum("noq,npq->op", dflat, entry.cache["cols"])
            grads[entry.path]["weight"] = dw.reshape(co, ci, kh, kw)
            grads[entry.path]["bias"] = dy.sum(axis=(0, 2, 3))
        dcols = np.einsum("op,noq->npq", block.weight.reshape(co, -1), dflat)
        dx = col2im(dcols, entry.x.shape, kh, kw, block.stride, block.padding)
    elif isinstance(block, BatchNorm):
        dx = _bn_backward(entry, dy, grads)
    elif isinstance(block, ReLU):
        dx = dy * (entry.x > 0)
    elif isinstance(block, AvgPool):
        k, s = block.size, block.stride
        n, c, h, w = entry.x.shape
        oh, ow = entry.out.shape[2:]
        dx = np.zeros((n, c, h, w))
        per = dy / (k * k)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + oh * s:s, j:j + ow * s:s] += per
    elif isinstance(block, Flatten):
        dx = dy.reshape(entry.x.shape)
    elif isinstance(block, ResidualBlock):
        dm = _tape_backward(entry.main_tape, dy, grads, injections)
        ds = _tape_backward(entry.shortcut_tape, dy, grads, injections)
        dx = dm + ds
    else:
        raise ValidationError(f"unknown block type {type(block)!r}")
    return dx


def _tape_backward(tape, dy, grads, injections):
    for entry in reversed(tape):
        dy = _block_backward(entry, dy, grads, injections)
        if injections:
            inj = injections.get(path_str(entry.path))
            if inj is not None:
                dy = dy + inj
    return dy


def backward(tape, dlogits, want_param_grads=False, injections=None):
    """Reverse sweep. Returns (dinput, param_grads or None).

    `injections` maps a block path string to an extra gradient added at that
    block's INPUT (applied after backing through the block itself).
    """
    grads = {} if want_param_grads else None
    dx = _tape_backward(tape, np.asarray(dlogits, dtype=np.float64), grads, injections or {})
    return dx, grads


# ---------------------------------------------------------------------------
# losses on the input

@dataclass
class InputLossSpec:
    """Objective for input-space optimization.

    total = ce_weight * CE(logits, targets)
          + bn_weight * sum over BatchNorm blocks of
                (||batch_mean - running_mean||^2 + ||batch_var - running_var||^2)
          + l2_weight * sum(x^2) + tv_weight * TV(x)

    TV is the squared forward-difference total variation, summed over the
    trailing spatial (or feature) axes.
    """
    targets: np.ndarray | None = None
    ce_weight: float = 1.0
    bn_weight: float = 0.0
    l2_weight: float = 0.0
    tv_weight: float = 0.0


def softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits, targets):
    p = softmax(logits)
    n = logits.shape[0]
    eps = 1e-300
    loss = -np.log(p[np.arange(n), targets] + eps).mean()
    grad = p.copy()
    grad[np.arange(n), targets] -= 1.0
    return loss, grad / n


def _tv_loss(x):
    loss = 0.0
    grad = np.zeros_like(x)
    axes = range(1, x.ndim)
    for ax in axes:
        d = np.diff(x, axis=ax)
        loss += float((d ** 2).sum())
        pad_lo = [(0, 0)] * x.ndim
        pad_lo[ax] = (1, 0)
        pad_hi = [(0, 0)] * x.ndim
        pad_hi[ax] = (0, 1)
        # d/dx_j of sum_i (x_{i+1}-x_i)^2 = 2*(d_{j-1} - d_j)
        grad += 2.0 * (np.pad(d, pad_lo) - np.pad(d, pad_hi))
    return loss, grad


def input_loss_and_gradient(net: Network, batch, spec: InputLossSpec):
    """Loss value, per-term breakdown, and d(loss)/d(input)."""
    x = np.asarray(batch, dtype=np.float64)
    logits, tape = run_tape(net, x)
    parts = {}
    total = 0.0
    dlogits = np.zeros_like(logits)
    injections = {}

    if spec.ce_weight:
        if spec.targets is None:
            raise ValidationError("ce_weight set but no targets given")
        ce, dce = cross_entropy(logits, np.asarray(spec.targets))
        parts["ce"] = ce
        total += spec.ce_weight * ce
        dlogits += spec.ce_weight * dce

    if spec.bn_weight:
        bn_entries = [e for e in _walk_tape(tape) if isinstance(e.block, BatchNorm)]
        if not bn_entries:
            raise ValidationError("bn_weight set but network has no BatchNorm blocks")
        bn_loss = 0.0
        for e in bn_entries:
            z = e.x
            axes = _channel_axes(z)
            m = z.size / z.shape[1]
            shape = (1, -1) + (1,) * (z.ndim - 2)
            mu = z.mean(axis=axes)
            var = z.var(axis=axes)
            dm = mu - e.block.running_mean
            dv = var - e.block.running_var
            bn_loss += float((dm ** 2).sum() + (dv ** 2).sum())
            g = (2.0 * dm.reshape(shape) / m
                 + 2.0 * dv.reshape(shape) * 2.0 * (z - mu.reshape(shape)) / m)
            injections[path_str(e.path)] = spec.bn_weight * g
        parts["bn"] = bn_loss
        total += spec.bn_weight * bn_loss

    dx_extra = np.zeros_like(x)
    if spec.l2_weight:
        l2 = float((x ** 2).sum())
        parts["l2"] = l2
        total += spec.l2_weight * l2
        dx_extra += spec.l2_weight * 2.0 * x
    if spec.tv_weight:
        tv, dtv = _tv_loss(x)
        parts["tv"] = tv
        total += spec.tv_weight * tv
        dx_extra += spec.tv_weight * dtv

    dx, _ = backward(tape, dlogits, injections=injections)
    return total, parts, dx + dx_extra


def input_gradient(net: Network, batch, spec: InputLossSpec) -> np.ndarray:
    """Gradient of the configured loss with respect to the input batch."""
    _, _, dx = input_loss_and_gradient(net, batch, spec)
    return dx
