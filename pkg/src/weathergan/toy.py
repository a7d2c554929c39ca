"""Synthetic two-domain corpus for desk-scale experiments.

Domain X (sunny) has a blue upper half, domain Y (cloudy) a gray one. The
lower half is random "ground" drawn from the same distribution in both
domains. Every image carries one cue box, the upper half, labelled ``sky``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .dataset import DEFAULT_CUES, CueBox, WeatherClass, format_manifest, load_example
from .fileio import atomic_write_text
from .metrics import PooledPixelExtractor, extract_features, fid
from .training import TrainConfig

SKY_COLORS = {
    WeatherClass.SUNNY: (60, 120, 215),
    WeatherClass.CLOUDY: (150, 150, 155),
}


def toy_image(rng: np.random.Generator, weather: WeatherClass, size: int = 64) -> np.ndarray:
    img = np.empty((size, size, 3), dtype=np.float64)
    half = size // 2
    sky = np.asarray(SKY_COLORS[weather], dtype=np.float64) + rng.normal(0, 8, 3)
    img[:half] = sky + rng.normal(0, 6, (half, size, 3))
    ground = np.asarray((90, 110, 60), dtype=np.float64) + rng.normal(0, 20, 3)
    img[half:] = ground + rng.normal(0, 12, (size - half, size, 3))
    return np.clip(img, 0, 255).round().astype(np.uint8)


def make_toy_corpus(
    root,
    n_per_domain: int = 200,
    size: int = 64,
    seed: int = 0,
    domains=(WeatherClass.SUNNY, WeatherClass.CLOUDY),
) -> Path:
    """Write PNGs under ``root/<class>/`` plus ``root/manifest.tsv``; return the manifest path."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    sky = DEFAULT_CUES.index("sky")
    entries = []
    for weather in domains:
        weather = WeatherClass.parse(weather)
        (root / weather.label).mkdir(parents=True, exist_ok=True)
        for i in range(n_per_domain):
            rel = f"{weather.label}/{i:04d}.png"
            Image.fromarray(toy_image(rng, weather, size)).save(root / rel)
            entries.append((rel, weather, [CueBox(sky, 0, 0, size, size // 2)]))
    manifest = root / "manifest.tsv"
    atomic_write_text(manifest, format_manifest(DEFAULT_CUES, entries))
    return manifest


def toy_config(**overrides) -> TrainConfig:
    """Small architecture sized for CPU runs on 64x64 images."""
    params = dict(
        domain_x=WeatherClass.SUNNY,
        domain_y=WeatherClass.CLOUDY,
        total_iterations=2000,
        decay_start=1000,
        batch_size=4,
        image_size=(64, 64),
        checkpoint_every=1000,
        gen_base_channels=8,
        gen_residual_blocks=2,
        gen_n_down=3,
        disc_base_channels=16,
        disc_layers=3,
        perceptual="random",
        relevant_cues=("sky",),
    )
    params.update(overrides)
    return TrainConfig(**params)


@torch.no_grad()
def toy_report(trainer, index, batch_size: int = 50) -> dict[str, float]:
    """Translate every domain-X image with G and score the toy experiment.

    Returns the mean translation map inside/outside the cue region, the mean
    absolute change outside it, FID of G(X) and of X against Y (pooled pixel
    features), and the fraction of G(X) that D_Y's class head labels as Y.
    """
    cfg = trainer.config
    size = cfg.image_size
    xs = torch.stack([load_example(r, size, index.n_s)[0] for r in index.domain(cfg.domain_x)])
    ys = torch.stack([load_example(r, size, index.n_s)[0] for r in index.domain(cfg.domain_y)])
    cue = torch.stack([load_example(r, size, index.n_s)[1] for r in index.domain(cfg.domain_x)])
    inside = (cue[:, 0:1] == 0).float()
    trainer.G.eval()
    trainer.D_Y.eval()
    t_in = t_out = change_out = 0.0
    hits = 0
    generated = []
    for start in range(0, len(xs), batch_size):
        x = xs[start : start + batch_size]
        mask = inside[start : start + batch_size]
        out = trainer.G(x)
        generated.append(out.g)
        t_in += float((out.t * mask).sum())
        t_out += float((out.t * (1 - mask)).sum())
        change_out += float(((out.g - x).abs() * (1 - mask)).sum())
        hits += int((trainer.D_Y.classify(out.g).argmax(1) == int(cfg.domain_y)).sum())
    n_in = float(inside.sum())
    n_out = float((1 - inside).sum())
    extractor = PooledPixelExtractor(grid=4)
    gen_feats = extract_features(torch.cat(generated), extractor)
    x_feats = extract_features(xs, extractor)
    y_feats = extract_features(ys, extractor)
    return {
        "t_inside": t_in / n_in,
        "t_outside": t_out / n_out,
        "t_gap": t_in / n_in - t_out / n_out,
        "change_outside": change_out / (3 * n_out),
        "fid_generated_y": fid(gen_feats, y_feats),
        "fid_x_y": fid(x_feats, y_feats),
        "target_class_rate": hits / len(xs),
    }
