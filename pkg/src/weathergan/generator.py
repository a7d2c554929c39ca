"""Three-branch generator: initial translation, attention and weather-cue
segmentation heads over an encoder/residual trunk, fused into a translation
map that blends the translated image with the input."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch
import torch.nn as nn

from .dataset import DEFAULT_CUES, WeatherClass

COMPOSITIONS = ("full", "attention_only", "segmentation_only", "init_only")

COMPOSITION_FORMULAS = {
    "full": "T = G_att(x) * clamp(sum of relevant G_seg(x) channels, 0, 1)",
    "attention_only": "T = G_att(x)",
    "segmentation_only": "T = clamp(sum of relevant G_seg(x) channels, 0, 1)",
    "init_only": "T = 1",
}

# Cues that characterise each weather class; a domain pair uses the union.
CLASS_CUES = {
    WeatherClass.SUNNY: ("sky",),
    WeatherClass.CLOUDY: ("cloud", "sky"),
    WeatherClass.FOGGY: ("fog",),
    WeatherClass.RAINY: ("rain-streak", "wet-ground"),
    WeatherClass.SNOWY: ("snow-cover",),
}


def relevant_cues_for_pair(domain_x, domain_y, cue_names: Sequence[str] = DEFAULT_CUES) -> tuple[int, ...]:
    """Indices of the cue channels that drive translation between two domains."""
    wanted = set(CLASS_CUES[WeatherClass.parse(domain_x)]) | set(CLASS_CUES[WeatherClass.parse(domain_y)])
    cues = tuple(i for i, name in enumerate(cue_names) if i > 0 and name in wanted)
    if not cues:
        raise ValueError(f"no cue in vocabulary {list(cue_names)} matches {sorted(wanted)}")
    return cues


@dataclass
class GeneratorConfig:
    base_channels: int = 64
    n_residual_blocks: int = 6
    n_down: int = 3
    n_s: int = len(DEFAULT_CUES)
    relevant_cues: tuple[int, ...] = (1, 2)
    norm: str = "instance"
    shared_encoder: bool = True
    composition: str = "full"
    image_size: tuple[int, int] | None = None

    def __post_init__(self):
        self.relevant_cues = tuple(sorted(set(int(c) for c in self.relevant_cues)))
        if self.image_size is not None:
            self.image_size = tuple(int(s) for s in self.image_size)
        if self.n_down < 1:
            raise ValueError("n_down must be >= 1")
        if self.n_residual_blocks < 1:
            raise ValueError("n_residual_blocks must be >= 1")
        if self.n_s < 2:
            raise ValueError("n_s must count background plus at least one cue")
        check_relevant_cues(self.relevant_cues, self.n_s)
        if self.norm not in ("instance", "batch"):
            raise ValueError(f"norm must be 'instance' or 'batch', got {self.norm!r}")
        if self.composition not in COMPOSITIONS:
            raise ValueError(f"composition must be one of {COMPOSITIONS}, got {self.composition!r}")


def check_relevant_cues(relevant_cues, n_s: int) -> None:
    if not relevant_cues:
        raise ValueError("relevant_cues must not be empty")
    for c in relevant_cues:
        if c == 0:
            raise ValueError("relevant_cues must exclude the background class 0")
        if not 0 < c < n_s:
            raise ValueError(f"relevant cue {c} outside [1, {n_s})")


class GeneratorOutput(NamedTuple):
    g_init: torch.Tensor
    att: torch.Tensor
    seg: torch.Tensor
    t: torch.Tensor
    g: torch.Tensor


def _norm(kind: str, channels: int) -> nn.Module:
    if kind == "batch":
        return nn.BatchNorm2d(channels)
    return nn.InstanceNorm2d(channels)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int, norm: str = "instance"):
        super().__init__()
        self.block = nn.Sequential(
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3, bias=False),
            _norm(norm, channels),
            nn.ReLU(inplace=True),
            nn.ReflectionPad2d(1),
            nn.Conv2d(channels, channels, 3, bias=False),
            _norm(norm, channels),
        )

    def forward(self, x):
        return x + self.block(x)


class Encoder(nn.Module):
    """``n_down`` conv blocks (the first at full resolution, the rest stride 2)
    followed by the residual trunk."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        ch = cfg.base_channels
        blocks = [
            nn.Sequential(
                nn.ReflectionPad2d(3), nn.Conv2d(3, ch, 7, bias=False), _norm(cfg.norm, ch), nn.ReLU(inplace=True)
            )
        ]
        for _ in range(cfg.n_down - 1):
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1, bias=False),
                    _norm(cfg.norm, ch * 2),
                    nn.ReLU(inplace=True),
                )
            )
            ch *= 2
        self.down = nn.ModuleList(blocks)
        self.trunk = nn.Sequential(*[ResidualBlock(ch, cfg.norm) for _ in range(cfg.n_residual_blocks)])
        self.out_channels = ch

    def forward(self, x):
        sizes = []
        for block in self.down:
            sizes.append(x.shape[-2:])
            x = block(x)
        return self.trunk(x), sizes


class Decoder(nn.Module):
    """Transposed-conv upsampling back to the input size, then a 7x7 output conv."""

    def __init__(self, cfg: GeneratorConfig, in_channels: int, out_channels: int, activation: nn.Module):
        super().__init__()
        ch = in_channels
        self.up = nn.ModuleList()
        for _ in range(cfg.n_down - 1):
            self.up.append(nn.ConvTranspose2d(ch, ch // 2, 3, stride=2, padding=1, bias=False))
            self.up.append(nn.Sequential(_norm(cfg.norm, ch // 2), nn.ReLU(inplace=True)))
            ch //= 2
        self.out = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(ch, out_channels, 7), activation)

    def forward(self, feat, sizes):
        # sizes[1:] are the inputs of the stride-2 blocks, i.e. the targets when going back up.
        targets = list(reversed(sizes[1:]))
        for k in range(0, len(self.up), 2):
            feat = self.up[k](feat, output_size=targets[k // 2])
            feat = self.up[k + 1](feat)
        return self.out(feat)


def reduce_segmentation(seg: torch.Tensor, relevant_cues: Sequence[int]) -> torch.Tensor:
    """Sum the relevant cue channels (in ascending order) and clamp to [0, 1]."""
    check_relevant_cues(relevant_cues, seg.shape[-3])
    cues = sorted(relevant_cues)
    acc = seg[..., cues[0] : cues[0] + 1, :, :]
    for c in cues[1:]:
        acc = acc + seg[..., c : c + 1, :, :]
    return acc.clamp(0.0, 1.0)


def translation_map(att: torch.Tensor, seg: torch.Tensor, relevant_cues: Sequence[int]) -> torch.Tensor:
    """Fuse attention and cue segmentation into a single-channel map in [0, 1]."""
    if att.shape[-2:] != seg.shape[-2:] or att.shape[-3] != 1:
        raise ValueError(f"attention {tuple(att.shape)} and segmentation {tuple(seg.shape)} are not congruent")
    return att * reduce_segmentation(seg, relevant_cues)


def _check_alpha(alpha) -> None:
    a = torch.as_tensor(alpha, dtype=torch.float64)
    if not torch.all((a >= 0) & (a <= 1)):
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")


def compose(x: torch.Tensor, g_init: torch.Tensor, t: torch.Tensor, alpha=1.0) -> torch.Tensor:
    """Blend ``g_init`` into ``x`` with per-pixel weight ``alpha * t``."""
    _check_alpha(alpha)
    w = alpha * t
    return w * g_init + (1 - w) * x


class WeatherGenerator(nn.Module):
    """Generator for one translation direction.

    ``forward`` returns every branch output together with the composed image.
    """

    def __init__(self, cfg: GeneratorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or GeneratorConfig()
        n_enc = 1 if cfg.shared_encoder else 3
        self.encoders = nn.ModuleList(Encoder(cfg) for _ in range(n_enc))
        ch = self.encoders[0].out_channels
        self.init_head = Decoder(cfg, ch, 3, nn.Tanh())
        self.att_head = Decoder(cfg, ch, 1, nn.Sigmoid())
        self.seg_head = Decoder(cfg, ch, cfg.n_s, nn.Softmax(dim=1))

    def _check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected a Bx3xHxW image batch, got shape {tuple(x.shape)}")
        if self.cfg.image_size is not None and tuple(x.shape[-2:]) != self.cfg.image_size:
            raise ValueError(f"expected spatial size {self.cfg.image_size}, got {tuple(x.shape[-2:])}")
        min_side = 2 ** (self.cfg.n_down - 1)
        if min(x.shape[-2:]) < min_side:
            raise ValueError(f"input smaller than the {min_side}px minimum for n_down={self.cfg.n_down}")

    def _features(self, x, branch: int):
        return self.encoders[branch if len(self.encoders) > 1 else 0](x)

    def init_translation(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.init_head(*self._features(x, 0))

    def attention_map(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.att_head(*self._features(x, 1))

    def segment_cues(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.seg_head(*self._features(x, 2))

    def fuse(self, att: torch.Tensor, seg: torch.Tensor) -> torch.Tensor:
        mode = self.cfg.composition
        if mode == "full":
            return translation_map(att, seg, self.cfg.relevant_cues)
        if mode == "attention_only":
            return att
        if mode == "segmentation_only":
            return reduce_segmentation(seg, self.cfg.relevant_cues)
        return torch.ones_like(att)

    def forward(self, x: torch.Tensor, alpha=1.0) -> GeneratorOutput:
        _check_alpha(alpha)
        squeeze = x.ndim == 3
        if squeeze:
            x = x[None]
        self._check_input(x)
        if len(self.encoders) == 1:
            feats = [self.encoders[0](x)] * 3
        else:
            feats = [enc(x) for enc in self.encoders]
        g_init = self.init_head(*feats[0])
        att = self.att_head(*feats[1])
        seg = self.seg_head(*feats[2])
        t = self.fuse(att, seg)
        out = GeneratorOutput(g_init, att, seg, t, compose(x, g_init, t, alpha))
        if squeeze:
            out = GeneratorOutput(*(v[0] for v in out))
        return out


def generate(x: torch.Tensor, alpha: float, generator: WeatherGenerator) -> GeneratorOutput:
    return generator(x, alpha=alpha)
