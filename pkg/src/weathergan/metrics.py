"""Frechet and kernel distances between two image sets.

Both metrics work on feature matrices (one row per image). Features come from
an injected extractor; the default for real evaluations is the 2048-d pooled
Inception-v3 embedding, loaded from a local weight file.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError

from .dataset import IMAGE_EXTENSIONS, preprocess_image

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Feature extractors


class FlattenExtractor(nn.Module):
    """Rows are the raw flattened pixels."""

    def forward(self, x):
        return x.flatten(1)


class PooledPixelExtractor(nn.Module):
    """Per-channel averages over a ``grid x grid`` partition of the image (d = 3 grid^2)."""

    def __init__(self, grid: int = 4):
        super().__init__()
        self.grid = grid

    def forward(self, x):
        return F.adaptive_avg_pool2d(x, self.grid).flatten(1)


class InceptionExtractor(nn.Module):
    """2048-d average-pooled Inception-v3 features.

    Inputs in [-1, 1] are resized to 299x299. ``weights_path`` is a torchvision
    ``inception_v3`` state dict; without it the network is randomly initialised.
    """

    def __init__(self, weights_path=None):
        super().__init__()
        from torchvision.models import inception_v3

        net = inception_v3(weights=None, aux_logits=False, init_weights=weights_path is None)
        if weights_path is not None:
            state = torch.load(Path(weights_path), map_location="cpu", weights_only=True)
            state = {k: v for k, v in state.items() if not k.startswith("AuxLogits.")}
            net.load_state_dict(state)
        else:
            log.warning("Inception extractor has no pretrained weights; features are random")
        net.fc = nn.Identity()
        self.net = net.eval()
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        # torchvision's inception expects ImageNet normalisation; transform_input is off
        mean = x.new_tensor((0.485, 0.456, 0.406)).view(1, 3, 1, 1)
        std = x.new_tensor((0.229, 0.224, 0.225)).view(1, 3, 1, 1)
        return self.net(((x + 1) / 2 - mean) / std)


@torch.no_grad()
def extract_features(images: Sequence[torch.Tensor] | torch.Tensor, extractor, batch_size: int = 32) -> np.ndarray:
    """Run ``extractor`` over images (each 3xHxW) and return an n x d float64 matrix."""
    n = len(images)
    if n < 2:
        raise ValueError(f"need at least 2 images to extract features, got {n}")
    rows = []
    for start in range(0, n, batch_size):
        chunk = images[start : start + batch_size]
        batch = chunk if isinstance(chunk, torch.Tensor) else torch.stack(list(chunk))
        try:
            feats = extractor(batch)
        except Exception as err:
            raise RuntimeError(f"feature extractor failed on images {start}..{start + len(batch) - 1}") from err
        rows.append(feats.reshape(len(batch), -1).double().cpu().numpy())
    return np.concatenate(rows, axis=0)


# ---------------------------------------------------------------------------
# Statistics


def matrix_sqrt_psd(m: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix via eigendecomposition.

    Eigenvalues slightly below zero (roundoff) are clipped to zero.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    scale = max(1.0, float(np.abs(m).max(initial=0.0)))
    if np.abs(m - m.T).max(initial=0.0) > tol * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    if vals.size and vals.min() < -tol * scale:
        warnings.warn(f"clipping negative eigenvalue {vals.min():.3e}", RuntimeWarning, stacklevel=2)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def _as_features(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or len(a) < 2:
        raise ValueError(f"feature matrix must be n x d with n >= 2, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("feature matrix contains non-finite values")
    return a


def _check_pair(real, fake) -> tuple[np.ndarray, np.ndarray]:
    real, fake = _as_features(real), _as_features(fake)
    if real.shape[1] != fake.shape[1]:
        raise ValueError(f"feature dimensions differ: {real.shape[1]} vs {fake.shape[1]}")
    return real, fake


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1 - mu2||^2 + tr(S1 + S2 - 2 (S1 S2)^(1/2)), clipped at 0.

    tr((S1 S2)^(1/2)) is evaluated as tr((R S2 R)^(1/2)) with R = S1^(1/2): the
    two products are similar, and the second is symmetric PSD.
    """
    sigma1 = np.atleast_2d(sigma1)
    sigma2 = np.atleast_2d(sigma2)
    root1 = matrix_sqrt_psd(sigma1)
    inner = root1 @ sigma2 @ root1
    eig = np.linalg.eigvalsh((inner + inner.T) / 2)
    if eig.size and eig.min() < -1e-6 * max(1.0, abs(eig).max()):
        warnings.warn(f"covariance product has negative eigenvalue {eig.min():.3e}; clipped", RuntimeWarning, stacklevel=2)
    tr_covmean = np.sqrt(np.clip(eig, 0.0, None)).sum()
    diff = np.atleast_1d(mu1) - np.atleast_1d(mu2)
    value = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * tr_covmean)
    return max(value, 0.0)


def fid(real, fake) -> float:
    real, fake = _check_pair(real, fake)
    return frechet_distance(
        real.mean(0), np.cov(real, rowvar=False), fake.mean(0), np.cov(fake, rowvar=False)
    )


def polynomial_kernel(a: np.ndarray, b: np.ndarray, degree: int = 3, coef0: float = 1.0) -> np.ndarray:
    return (a @ b.T / a.shape[1] + coef0) ** degree


def mmd2_unbiased(a: np.ndarray, b: np.ndarray) -> float:
    """Unbiased squared MMD under the cubic polynomial kernel.

    Within-set sums skip the diagonal. For equal set sizes the samples are
    treated as pairs (a_i, b_i) and the cross sum skips i == j as well, which
    keeps the estimate unbiased and makes it exactly zero when ``a == b``.
    """
    m, n = len(a), len(b)
    k_aa = polynomial_kernel(a, a)
    k_bb = polynomial_kernel(b, b)
    k_ab = polynomial_kernel(a, b)
    sum_aa = k_aa.sum() - np.trace(k_aa)
    sum_bb = k_bb.sum() - np.trace(k_bb)
    if m == n:
        cross = (k_ab.sum() - np.trace(k_ab)) / (m * (m - 1))
    else:
        cross = k_ab.mean()
    return float(sum_aa / (m * (m - 1)) + sum_bb / (n * (n - 1)) - 2.0 * cross)


def kid(real, fake, subset_size: int = 100, n_subsets: int = 100, seed: int = 0) -> tuple[float, float]:
    """Mean and standard deviation of the unbiased MMD^2 over random subsets."""
    real, fake = _check_pair(real, fake)
    if n_subsets < 1:
        raise ValueError("n_subsets must be >= 1")
    if not 2 <= subset_size <= min(len(real), len(fake)):
        raise ValueError(
            f"subset_size {subset_size} must lie in [2, {min(len(real), len(fake))}] for {len(real)} real / {len(fake)} fake"
        )
    rng = np.random.default_rng(seed)
    scores = np.empty(n_subsets)
    for s in range(n_subsets):
        idx = rng.choice(len(real), subset_size, replace=False)
        # equal-sized sets share one draw so that pairs line up (see mmd2_unbiased)
        fa = fake[idx] if len(fake) == len(real) else fake[rng.choice(len(fake), subset_size, replace=False)]
        ra = real[idx]
        scores[s] = mmd2_unbiased(ra, fa)
    return float(scores.mean()), float(scores.std())


# ---------------------------------------------------------------------------
# Reports and the directory pipeline


@dataclass
class MetricReport:
    fid: float
    kid_mean: float
    kid_std: float
    n_real: int
    n_fake: int
    n_skipped: int = 0
    config: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = [
            f"fid={self.fid!r}",
            f"kid_mean={self.kid_mean!r}",
            f"kid_std={self.kid_std!r}",
            f"n_real={self.n_real}",
            f"n_fake={self.n_fake}",
            f"n_skipped={self.n_skipped}",
        ]
        lines += [f"config.{k}={v}" for k, v in sorted(self.config.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        values, config = {}, {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"malformed report line {line!r}")
            if key.startswith("config."):
                config[key[len("config."):]] = value
            else:
                values[key] = value
        return cls(
            fid=float(values["fid"]),
            kid_mean=float(values["kid_mean"]),
            kid_std=float(values["kid_std"]),
            n_real=int(values["n_real"]),
            n_fake=int(values["n_fake"]),
            n_skipped=int(values.get("n_skipped", 0)),
            config=config,
        )


@dataclass
class EvalConfig:
    image_size: tuple[int, int] = (299, 299)
    subset_size: int = 100
    n_subsets: int = 100
    seed: int = 0


class TooFewImagesError(ValueError):
    pass


def load_image_dir(directory, image_size) -> tuple[list[torch.Tensor], list[str]]:
    """Load every image file in ``directory``; unreadable files are returned as skipped."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"image directory not found: {directory}")
    images, skipped = [], []
    for path in sorted(directory.iterdir()):
        if not path.is_file() or path.suffix.lower() not in IMAGE_EXTENSIONS:
            continue
        try:
            with Image.open(path) as img:
                img.load()
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    images.append(preprocess_image(img, image_size))
        except (OSError, UnidentifiedImageError, ValueError) as err:
            log.warning("skipping unreadable image %s: %s", path, err)
            skipped.append(str(path))
    return images, skipped


def evaluate_pair(real_dir, fake_dir, extractor, config: EvalConfig | None = None) -> MetricReport:
    config = config or EvalConfig()
    real, skipped_real = load_image_dir(real_dir, config.image_size)
    fake, skipped_fake = load_image_dir(fake_dir, config.image_size)
    for name, imgs in (("real", real), ("fake", fake)):
        if len(imgs) < 2:
            raise TooFewImagesError(f"{name} directory has {len(imgs)} readable image(s); need at least 2")
    real_feats = extract_features(real, extractor)
    fake_feats = extract_features(fake, extractor)
    subset = min(config.subset_size, len(real), len(fake))
    kid_mean, kid_std = kid(real_feats, fake_feats, subset, config.n_subsets, config.seed)
    return MetricReport(
        fid=fid(real_feats, fake_feats),
        kid_mean=kid_mean,
        kid_std=kid_std,
        n_real=len(real),
        n_fake=len(fake),
        n_skipped=len(skipped_real) + len(skipped_fake),
        config={
            "extractor": type(extractor).__name__,
            "feature_dim": real_feats.shape[1],
            "image_size": f"{config.image_size[0]}x{config.image_size[1]}",
            "subset_size": subset,
            "n_subsets": config.n_subsets,
            "seed": config.seed,
        },
    )
