"""Frozen feature extractors for the perceptual cycle loss.

An extractor is any callable mapping a Bx3xHxW batch in [-1, 1] to a list of
feature maps. Parameters are frozen; gradients still flow to the input.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Sequence

import torch
import torch.nn as nn

log = logging.getLogger(__name__)

_IMAGENET_MEAN = (0.485, 0.456, 0.406)
_IMAGENET_STD = (0.229, 0.224, 0.225)


def _vgg19_layer_names() -> list[str]:
    names, block, conv = [], 1, 1
    for size in (2, 2, 4, 4, 4):
        for _ in range(size):
            names += [f"conv{block}_{conv}", f"relu{block}_{conv}"]
            conv += 1
        names.append(f"pool{block}")
        block, conv = block + 1, 1
    return names


VGG19_LAYERS = _vgg19_layer_names()


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


class IdentityExtractor(nn.Module):
    """phi(x) = x; handy for checking the loss arithmetic."""

    def forward(self, x):
        return [x]


class VGG19Features(nn.Module):
    """Activations of selected VGG19 layers.

    ``weights_path`` may hold either a full torchvision ``vgg19`` state dict or
    one for the ``features`` submodule alone. Without weights the network is
    randomly initialised, which is only useful for smoke tests.
    """

    def __init__(self, layers: Sequence[str] = ("relu3_1",), weights_path=None):
        super().__init__()
        from torchvision.models.vgg import cfgs, make_layers

        unknown = [n for n in layers if n not in VGG19_LAYERS]
        if unknown:
            raise ValueError(f"unknown VGG19 layers {unknown}")
        self.layer_ids = sorted(VGG19_LAYERS.index(n) for n in layers)
        features = make_layers(cfgs["E"])
        if weights_path is not None:
            state = torch.load(Path(weights_path), map_location="cpu", weights_only=True)
            if any(k.startswith("features.") for k in state):
                state = {k[len("features."):]: v for k, v in state.items() if k.startswith("features.")}
            features.load_state_dict(state)
        else:
            log.warning("VGG19 perceptual extractor has no pretrained weights; features are random")
        self.features = features[: self.layer_ids[-1] + 1]
        self.register_buffer("mean", torch.tensor(_IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(_IMAGENET_STD).view(1, 3, 1, 1))
        freeze(self)

    def forward(self, x):
        h = ((x + 1) / 2 - self.mean.to(x.dtype)) / self.std.to(x.dtype)
        out = []
        for i, layer in enumerate(self.features):
            h = layer(h)
            if i in self.layer_ids:
                out.append(h)
        return out


class RandomConvFeatures(nn.Module):
    """Small conv stack with fixed seeded weights.

    Cheap stand-in for a pretrained backbone in desk-scale runs; random
    convolutional features still respond to local texture and colour.
    """

    def __init__(self, channels: Sequence[int] = (16, 32), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers = []
        c_in = 3
        for k, c_out in enumerate(channels):
            conv = nn.Conv2d(c_in, c_out, 3, stride=1 if k == 0 else 2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * math.sqrt(2.0 / (c_in * 9)))
                conv.bias.zero_()
            layers += [conv, nn.ReLU()]
            c_in = c_out
        self.net = nn.Sequential(*layers)
        freeze(self)

    def forward(self, x):
        return [self.net(x)]


def build_perceptual(kind: str = "vgg19", layers: Sequence[str] = ("relu3_1",), weights_path=None, seed: int = 0):
    if kind == "vgg19":
        return VGG19Features(layers, weights_path)
    if kind == "random":
        return RandomConvFeatures(seed=seed)
    if kind == "identity":
        return IdentityExtractor()
    raise ValueError(f"unknown perceptual extractor {kind!r} (vgg19, random, identity)")
