"""Patch discriminator with an auxiliary weather-class head on the shared trunk."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .dataset import WeatherClass

N_CLASSES = len(WeatherClass)


@dataclass
class DiscriminatorConfig:
    base_channels: int = 64
    n_layers: int = 4
    image_size: tuple[int, int] | None = None

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.image_size is not None:
            self.image_size = tuple(int(s) for s in self.image_size)


def patch_grid_size(size: int, n_layers: int) -> int:
    """Side length of the realness map for a square input (3x3, stride 2, pad 1 blocks)."""
    for _ in range(n_layers):
        size = (size + 2 - 3) // 2 + 1
    return size


class PatchDiscriminator(nn.Module):
    def __init__(self, cfg: DiscriminatorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DiscriminatorConfig()
        ch = cfg.base_channels
        layers = [nn.Conv2d(3, ch, 3, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
        for _ in range(cfg.n_layers - 1):
            out = min(ch * 2, cfg.base_channels * 8)
            layers += [
                nn.Conv2d(ch, out, 3, stride=2, padding=1, bias=False),
                nn.InstanceNorm2d(out, affine=True),
                nn.LeakyReLU(0.2, inplace=True),
            ]
            ch = out
        self.trunk = nn.Sequential(*layers)
        self.patch_head = nn.Conv2d(ch, 1, 3, padding=1)
        self.class_head = nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(ch, N_CLASSES))

    def _check_input(self, img: torch.Tensor) -> None:
        if img.ndim != 4 or img.shape[1] != 3:
            raise ValueError(f"expected a Bx3xHxW image batch, got shape {tuple(img.shape)}")
        if self.cfg.image_size is not None and tuple(img.shape[-2:]) != self.cfg.image_size:
            raise ValueError(f"expected spatial size {self.cfg.image_size}, got {tuple(img.shape[-2:])}")

    def forward(self, img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (per-patch realness logits Bx1xhxw, class logits Bx5)."""
        self._check_input(img)
        feat = self.trunk(img)
        return self.patch_head(feat), self.class_head(feat)

    def discriminate(self, img: torch.Tensor) -> torch.Tensor:
        return self(img)[0]

    def classify(self, img: torch.Tensor) -> torch.Tensor:
        return self(img)[1]
