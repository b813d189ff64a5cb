"""torch module -> FNET network conversion.

Layout rules (torch -> engine), all exact:

- data is NCHW on both sides; ``nn.Flatten()`` and the engine's Flatten
  both produce channel-major (C*H*W) rows, so classifier columns line up
  with no reordering
- ``Linear.weight`` (out, in) -> Dense.weight (out, in), unchanged
- ``Conv2d.weight`` (c_out, c_in, kh, kw) -> Conv2D.weight, unchanged;
  only groups=1, dilation=1, symmetric integer stride/padding convert
- ``BatchNorm1d/2d``: weight -> gamma, bias -> beta, running_mean/var and
  eps copied; ``num_batches_tracked`` is intentionally dropped (it only
  parameterizes torch's own momentum schedule)
- ``AvgPool2d`` -> AvgPool(size, stride); padding/ceil_mode must be off

Parameters are float32 in the checkpoint and in FNETv1, so converting is
value-exact; the parity tolerance exists because the engine evaluates in
float64 afterwards.
"""
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from foldkit import Network, save_network
from foldkit.nn import AvgPool, BatchNorm, Conv2D, Dense, Flatten, ReLU, ResidualBlock, path_str

from .residual import Residual


class UnsupportedLayerError(ValueError):
    """Raised with every offending source layer listed, not just the first."""

    def __init__(self, offenders):
        self.offenders = list(offenders)
        lines = ", ".join(self.offenders)
        super().__init__(f"unsupported source layers: {lines}")


@dataclass
class ConversionResult:
    network: Network
    mapping: list  # [{"source": tensor name, "target": FNET tensor}, ...]


def _int_pair(value, name, offenders, prefix):
    if isinstance(value, int):
        return value
    pair = tuple(value)
    if len(pair) == 2 and pair[0] == pair[1]:
        return int(pair[0])
    offenders.append(f"{prefix}: asymmetric {name} {value}")
    return 0


def _convert_layer(name, layer, offenders):
    """One torch layer -> (engine block, [(source tensor, attr), ...])."""
    if isinstance(layer, nn.Linear):
        if layer.bias is None:
            offenders.append(f"{name}: Linear without bias")
            return None, []
        return (Dense(weight=layer.weight.detach().numpy(),
                      bias=layer.bias.detach().numpy()),
                [(f"{name}.weight", "weight"), (f"{name}.bias", "bias")])
    if isinstance(layer, nn.Conv2d):
        bad = []
        if layer.groups != 1:
            bad.append(f"{name}: Conv2d groups={layer.groups}")
        if tuple(layer.dilation) != (1, 1):
            bad.append(f"{name}: Conv2d dilation={layer.dilation}")
        if layer.bias is None:
            bad.append(f"{name}: Conv2d without bias")
        if layer.padding_mode != "zeros":
            bad.append(f"{name}: Conv2d padding_mode={layer.padding_mode}")
        if bad:
            offenders.extend(bad)
            return None, []
        stride = _int_pair(layer.stride, "stride", offenders, name)
        padding = _int_pair(layer.padding, "padding", offenders, name)
        return (Conv2D(weight=layer.weight.detach().numpy(),
                       bias=layer.bias.detach().numpy(),
                       stride=stride, padding=padding),
                [(f"{name}.weight", "weight"), (f"{name}.bias", "bias")])
    if isinstance(layer, (nn.BatchNorm1d, nn.BatchNorm2d)):
        if not layer.affine or not layer.track_running_stats:
            offenders.append(f"{name}: BatchNorm without affine+running stats")
            return None, []
        return (BatchNorm(gamma=layer.weight.detach().numpy(),
                          beta=layer.bias.detach().numpy(),
                          running_mean=layer.running_mean.numpy(),
                          running_var=layer.running_var.numpy(),
                          epsilon=float(layer.eps)),
                [(f"{name}.weight", "gamma"), (f"{name}.bias", "beta"),
                 (f"{name}.running_mean", "running_mean"),
                 (f"{name}.running_var", "running_var")])
    if isinstance(layer, nn.ReLU):
        return ReLU(), []
    if isinstance(layer, nn.Flatten):
        if layer.start_dim != 1 or layer.end_dim != -1:
            offenders.append(f"{name}: Flatten over dims {layer.start_dim}..{layer.end_dim}")
            return None, []
        return Flatten(), []
    if isinstance(layer, nn.AvgPool2d):
        if layer.padding != 0 or layer.ceil_mode:
            offenders.append(f"{name}: AvgPool2d with padding or ceil_mode")
            return None, []
        size = _int_pair(layer.kernel_size, "kernel_size", offenders, name)
        stride = size if layer.stride is None else _int_pair(layer.stride, "stride", offenders, name)
        return AvgPool(size=size, stride=stride), []
    offenders.append(f"{name}: {type(layer).__name__}")
    return None, []


def _convert_children(module, prefix, offenders, allow_residual):
    blocks = []
    sources = []  # parallel to blocks: [(source tensor, attr), ...]
    for name, child in module.named_children():
        full = f"{prefix}{name}"
        if isinstance(child, Residual):
            if not allow_residual:
                offenders.append(f"{full}: nested Residual")
                continue
            main, main_sources = _convert_children(child.main, f"{full}.main.",
                                                   offenders, allow_residual=False)
            blocks.append(ResidualBlock(main=main))
            sources.append(main_sources)
        else:
            block, tensors = _convert_layer(full, child, offenders)
            if block is not None:
                blocks.append(block)
                sources.append(tensors)
    return blocks, sources


def module_to_network(module, input_shape, class_count):
    """Convert a chain-of-blocks (optionally simple-residual) torch module."""
    offenders = []
    blocks, sources = _convert_children(module, "", offenders, allow_residual=True)
    if offenders:
        raise UnsupportedLayerError(offenders)
    net = Network(blocks=blocks, input_shape=tuple(input_shape),
                  class_count=int(class_count))
    mapping = _mapping_table(net, sources)
    _check_single_source(net, mapping)
    return ConversionResult(network=net, mapping=mapping)


def convert(checkpoint, adapter):
    """Load a torch state dict into the adapter's skeleton and convert it."""
    module = adapter.build()
    module.load_state_dict(checkpoint)
    module.eval()
    return module_to_network(module, adapter.input_shape, adapter.class_count)


def _mapping_table(net, sources):
    mapping = []
    for index, per_block in enumerate(sources):
        if isinstance(net.blocks[index], ResidualBlock):
            for inner, tensors in enumerate(per_block):
                for source, attr in tensors:
                    mapping.append({"source": source,
                                    "target": f"{path_str((index, 'main', inner))}.{attr}"})
        else:
            for source, attr in per_block:
                mapping.append({"source": source,
                                "target": f"{path_str((index,))}.{attr}"})
    return mapping


def _network_tensors(net):
    names = []
    for index, block in enumerate(net.blocks):
        items = [((index,), block)]
        if isinstance(block, ResidualBlock):
            items = [((index, "main", j), b) for j, b in enumerate(block.main)]
        for path, b in items:
            if isinstance(b, (Dense, Conv2D)):
                names.extend(f"{path_str(path)}.{a}" for a in ("weight", "bias"))
            elif isinstance(b, BatchNorm):
                names.extend(f"{path_str(path)}.{a}"
                             for a in ("gamma", "beta", "running_mean", "running_var"))
    return names


def _check_single_source(net, mapping):
    targets = [m["target"] for m in mapping]
    expected = _network_tensors(net)
    if sorted(targets) != sorted(expected) or len(set(targets)) != len(targets):
        missing = set(expected) - set(targets)
        extra = set(targets) - set(expected)
        raise ValueError(f"mapping must cover every FNET tensor exactly once "
                         f"(missing {sorted(missing)}, extra {sorted(extra)})")
