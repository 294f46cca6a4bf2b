"""Channel-compressed U-Net and the per-channel sigmoid cross-entropy.

The segmentation network is a standard U-Net encoder/decoder shrunk to a
small channel budget (base width 16, doubling per level, optionally capped)
so that training fits on a CPU. It takes either the 2K-channel feature
stack from the representation layer or the raw grayscale image, and emits
3-channel logits (air/dirt/bone). Each logit channel goes through its own
sigmoid; decoding is per-pixel argmax.

The loss here is the numerically stable numpy reference; the trainer uses
the torch equivalent internally and the tests pin the two together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import expit
from torch import nn

from . import imagedata
from .errors import DataError


@dataclass(frozen=True)
class Prediction:
    """Per-class logits (3, H, W); probabilities are their elementwise sigmoid."""

    logits: np.ndarray

    def __post_init__(self):
        if self.logits.ndim != 3 or self.logits.shape[0] != imagedata.NUM_CLASSES:
            raise ValueError(
                f"logits must be ({imagedata.NUM_CLASSES}, H, W), got shape {self.logits.shape}"
            )
        if not np.all(np.isfinite(self.logits)):
            raise ValueError("logits contain non-finite values")

    @property
    def probabilities(self) -> np.ndarray:
        return expit(self.logits)


class DoubleConv(nn.Module):
    """Two 3x3 conv + batch-norm + ReLU stages."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.block(x)


class Up(nn.Module):
    """Nearest-neighbor 2x upsample, 3x3 conv, then fuse with the skip path."""

    def __init__(self, in_ch: int, skip_ch: int, out_ch: int):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.reduce = nn.Sequential(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )
        self.fuse = DoubleConv(out_ch + skip_ch, out_ch)

    def forward(self, x, skip):
        x = self.reduce(self.up(x))
        return self.fuse(torch.cat([skip, x], dim=1))


class LightUNet(nn.Module):
    """U-Net with widths min(base_width * 2^level, width_cap) and a 1x1 head.

    Input spatial dims must be divisible by 2**depth. The channel budget is
    deliberately small; width_cap trims the deepest levels further for
    desk-scale runs.
    """

    def __init__(
        self,
        in_channels: int,
        depth: int = 4,
        base_width: int = 16,
        width_cap: int = 128,
        num_classes: int = imagedata.NUM_CLASSES,
    ):
        super().__init__()
        if in_channels < 1:
            raise ValueError(f"in_channels must be at least 1, got {in_channels}")
        if depth < 1:
            raise ValueError(f"depth must be at least 1, got {depth}")
        self.in_channels = in_channels
        self.depth = depth
        widths = [min(base_width * 2**level, width_cap) for level in range(depth + 1)]
        self.widths = widths

        self.enc = nn.ModuleList()
        prev = in_channels
        for w in widths[:depth]:
            self.enc.append(DoubleConv(prev, w))
            prev = w
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = DoubleConv(widths[depth - 1], widths[depth])
        self.dec = nn.ModuleList(
            Up(widths[level + 1], widths[level], widths[level])
            for level in reversed(range(depth))
        )
        self.head = nn.Conv2d(widths[0], num_classes, 1)

    def forward(self, x):
        h, w = x.shape[-2:]
        divisor = 2**self.depth
        if h % divisor or w % divisor:
            raise DataError(
                f"input {h}x{w} is not divisible by 2^depth = {divisor}"
            )
        skips = []
        for block in self.enc:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for block, skip in zip(self.dec, reversed(skips)):
            x = block(x, skip)
        return self.head(x)


def seg_forward(x: np.ndarray, net: LightUNet) -> Prediction:
    """Deterministic inference pass; accepts (H, W) grayscale or (C, H, W)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise DataError(f"expected (H, W) or (C, H, W) input, got shape {x.shape}")
    if x.shape[0] != net.in_channels:
        raise DataError(
            f"input has {x.shape[0]} channels but the network expects {net.in_channels}"
        )
    dtype = next(net.parameters()).dtype
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            logits = net(torch.from_numpy(x).to(dtype).unsqueeze(0))
    finally:
        net.train(was_training)
    return Prediction(logits=logits.squeeze(0).numpy().astype(np.float64))


def _check_pair(pred: Prediction, target: np.ndarray):
    if target.shape != pred.logits.shape:
        raise ValueError(
            f"target shape {target.shape} does not match logits shape {pred.logits.shape}"
        )
    if not np.array_equal(np.sum(target, axis=0), np.ones(target.shape[1:], dtype=target.dtype)):
        raise ValueError("target must be one-hot across the class axis")


def cross_entropy_loss(pred: Prediction, target: np.ndarray) -> float:
    """Mean over pixels of the true-channel sigmoid cross-entropy.

    Computed as softplus(-z) on the true channel's logit, never as log of a
    stored sigmoid, so it is finite and accurate for any logit magnitude.
    """
    _check_pair(pred, target)
    per_channel = np.logaddexp(0.0, -pred.logits)
    n_pixels = pred.logits.shape[1] * pred.logits.shape[2]
    return float(np.sum(per_channel * target) / n_pixels)


def cross_entropy_grad(pred: Prediction, target: np.ndarray) -> np.ndarray:
    """Gradient of cross_entropy_loss w.r.t. the logits: y * (sigmoid(z) - 1) / Npix."""
    _check_pair(pred, target)
    n_pixels = pred.logits.shape[1] * pred.logits.shape[2]
    return target * (expit(pred.logits) - 1.0) / n_pixels


def predict_labels(pred: Prediction) -> np.ndarray:
    """Per-pixel argmax over the class channels; ties go to the lowest class."""
    return np.argmax(pred.logits, axis=0).astype(np.uint8)
