"""Atomic file output: write to a temporary sibling, then rename."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np
import torch
from PIL import Image


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def tensor_to_uint8(img: torch.Tensor) -> np.ndarray:
    """3xHxW image in [-1, 1] to HxWx3 uint8 via (v + 1) * 127.5."""
    arr = ((img.detach().double().cpu().clamp(-1, 1) + 1) * 127.5).round().to(torch.uint8)
    return arr.permute(1, 2, 0).numpy()


def map_to_uint8(m: torch.Tensor) -> np.ndarray:
    """HxW (or 1xHxW) map in [0, 1] to grayscale uint8."""
    m = m.detach().double().cpu().reshape(m.shape[-2:])
    return (m.clamp(0, 1) * 255).round().to(torch.uint8).numpy()


def save_png(path, array: np.ndarray) -> Path:
    import io

    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return atomic_write_bytes(path, buf.getvalue())
