"""Checkpoint loading and image translation with intensity sweeps."""

from __future__ import annotations

import warnings
from pathlib import Path
from typing import Sequence

import torch
from PIL import Image

from .dataset import IMAGE_EXTENSIONS, preprocess_image
from .fileio import map_to_uint8, save_png, tensor_to_uint8
from .generator import WeatherGenerator
from .training import TrainConfig, read_checkpoint

DEFAULT_ALPHAS = (0.0, 0.25, 0.5, 0.75, 1.0)


def load_generator(checkpoint, direction: str = "xy") -> tuple[WeatherGenerator, TrainConfig, tuple[str, ...]]:
    """Rebuild G (``xy``) or F (``yx``) from a checkpoint, in eval mode."""
    if direction not in ("xy", "yx"):
        raise ValueError("direction must be 'xy' or 'yx'")
    state = read_checkpoint(checkpoint)
    config = TrainConfig.from_dict(state["config"])
    cue_names = tuple(state["cue_names"])
    gen = WeatherGenerator(config.generator_config(cue_names))
    prefix = "G/" if direction == "xy" else "F/"
    gen.load_state_dict({k[len(prefix):]: v for k, v in state["params"].items() if k.startswith(prefix)})
    return gen.eval(), config, cue_names


def list_inputs(path) -> list[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
    raise FileNotFoundError(f"input not found: {path}")


def alpha_name(stem: str, alpha: float) -> str:
    return f"{stem}_a{alpha:.2f}.png"


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


@torch.no_grad()
def translate_file(
    generator: WeatherGenerator,
    image_path,
    out_dir,
    alphas: Sequence[float] = DEFAULT_ALPHAS,
    image_size=(300, 300),
    dump_intermediates: bool = False,
    cue_names: Sequence[str] = (),
) -> list[Path]:
    """Write G(x) for each alpha and, optionally, the branch outputs as images."""
    image_path, out_dir = Path(image_path), Path(out_dir)
    with Image.open(image_path) as img:
        img.load()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            x = preprocess_image(img, image_size)
    stem = image_path.stem
    written = []
    out = None
    for alpha in alphas:
        out = generator(x[None], alpha=alpha)
        written.append(save_png(out_dir / alpha_name(stem, alpha), tensor_to_uint8(out.g[0])))
    if dump_intermediates:
        if out is None:
            out = generator(x[None])
        written.append(save_png(out_dir / f"{stem}_input.png", tensor_to_uint8(x)))
        written.append(save_png(out_dir / f"{stem}_g_init.png", tensor_to_uint8(out.g_init[0])))
        written.append(save_png(out_dir / f"{stem}_att.png", map_to_uint8(out.att[0])))
        written.append(save_png(out_dir / f"{stem}_t.png", map_to_uint8(out.t[0])))
        for c in range(out.seg.shape[1]):
            label = _safe(cue_names[c]) if c < len(cue_names) else str(c)
            written.append(save_png(out_dir / f"{stem}_seg{c}_{label}.png", map_to_uint8(out.seg[0, c])))
    return written
