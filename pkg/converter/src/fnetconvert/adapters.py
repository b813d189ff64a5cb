"""Shipped architectures: builders for the torch side of each fixture.

An adapter owns the module skeleton (so a checkpoint can be loaded into
it), the per-sample input shape, the class count, and a human-readable
note on how fixture inputs are produced.
"""
from dataclasses import dataclass

import torch
from torch import nn

from .residual import Residual

PREPROCESSING = "standard-normal synthetic batch (torch.randn, seeded); no scaling"


@dataclass(frozen=True)
class Adapter:
    name: str
    input_shape: tuple
    class_count: int
    builder: callable
    preprocessing: str = PREPROCESSING

    def build(self):
        return self.builder()


def _small_cnn():
    return nn.Sequential(
        nn.Conv2d(1, 6, 3, padding=1),
        nn.BatchNorm2d(6),
        nn.ReLU(),
        nn.Conv2d(6, 12, 3, padding=1),
        nn.BatchNorm2d(12),
        nn.ReLU(),
        nn.AvgPool2d(2),
        nn.Flatten(),
        nn.Linear(12 * 5 * 5, 5),
    )


def _compact_residual():
    return nn.Sequential(
        nn.Linear(12, 10),
        nn.BatchNorm1d(10),
        nn.ReLU(),
        Residual(
            nn.Linear(10, 10),
            nn.BatchNorm1d(10),
            nn.ReLU(),
            nn.Linear(10, 10),
            nn.BatchNorm1d(10),
        ),
        nn.ReLU(),
        nn.Linear(10, 4),
    )


ADAPTERS = {
    "small_cnn": Adapter("small_cnn", (1, 10, 10), 5, _small_cnn),
    "compact_residual": Adapter("compact_residual", (12,), 4, _compact_residual),
}
