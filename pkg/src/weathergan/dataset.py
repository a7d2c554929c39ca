"""Weather image corpus: manifest parsing, preprocessing, cue rasterization and
unpaired batch sampling.

Manifest layout (UTF-8, tab separated)::

    #cues: background,sky,cloud,fog,rain-streak,snow-cover,wet-ground
    images/0001.jpg<TAB>sunny<TAB>1:0,0,640,200;6:0,300,640,480
    images/0002.jpg<TAB>cloudy

Box groups are ``<cue_class>:<x0>,<y0>,<x1>,<y1>`` in source pixel
coordinates, inclusive-exclusive. Channel 0 of the cue vocabulary is always
the background class.
"""

from __future__ import annotations

import enum
import functools
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

DEFAULT_CUES = ("background", "sky", "cloud", "fog", "rain-streak", "snow-cover", "wet-ground")
IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff", ".webp"}


class WeatherClass(enum.IntEnum):
    SUNNY = 0
    CLOUDY = 1
    FOGGY = 2
    RAINY = 3
    SNOWY = 4

    @classmethod
    def parse(cls, value: "str | int | WeatherClass") -> "WeatherClass":
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[str(value).strip().upper()]
        except KeyError:
            names = ", ".join(c.label for c in cls)
            raise ValueError(f"unknown weather class {value!r} (expected one of {names})") from None

    @property
    def label(self) -> str:
        return self.name.lower()


class ManifestError(ValueError):
    """Malformed manifest line."""

    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True)
class CueBox:
    cue_class: int
    x0: int
    y0: int
    x1: int
    y1: int

    def validate(self, width: int, height: int, n_s: int) -> None:
        if not 0 <= self.cue_class < n_s:
            raise ValueError(f"cue class {self.cue_class} outside vocabulary of size {n_s}")
        if not (0 <= self.x0 < self.x1 <= width and 0 <= self.y0 < self.y1 <= height):
            raise ValueError(
                f"box ({self.x0},{self.y0},{self.x1},{self.y1}) outside image bounds {width}x{height}"
            )


@dataclass(frozen=True)
class Record:
    path: Path
    weather_class: WeatherClass
    boxes: tuple[CueBox, ...] = ()


@dataclass(frozen=True)
class DatasetIndex:
    """Immutable record list with per-class sub-indices."""

    root: Path
    cue_names: tuple[str, ...]
    records: tuple[Record, ...]
    by_class: dict = field(default_factory=dict)

    @classmethod
    def from_records(cls, root, cue_names: Sequence[str], records: Iterable[Record]) -> "DatasetIndex":
        records = tuple(records)
        by_class: dict[WeatherClass, tuple[int, ...]] = {}
        for i, rec in enumerate(records):
            by_class.setdefault(rec.weather_class, ())
            by_class[rec.weather_class] += (i,)
        return cls(Path(root), tuple(cue_names), records, by_class)

    @property
    def n_s(self) -> int:
        return len(self.cue_names)

    def counts(self) -> dict[str, int]:
        return {c.label: len(ix) for c, ix in sorted(self.by_class.items())}

    def domain(self, weather_class) -> list[Record]:
        weather_class = WeatherClass.parse(weather_class)
        return [self.records[i] for i in self.by_class.get(weather_class, ())]

    def cue_index(self, name: str) -> int:
        try:
            return self.cue_names.index(name)
        except ValueError:
            raise ValueError(f"unknown cue {name!r}; vocabulary is {', '.join(self.cue_names)}") from None


def _parse_boxes(text: str, cue_names: Sequence[str], manifest, lineno: int) -> tuple[CueBox, ...]:
    boxes = []
    for group in filter(None, (g.strip() for g in text.split(";"))):
        try:
            cls_text, coords = group.split(":", 1)
            cls_text = cls_text.strip()
            cue = int(cls_text) if cls_text.lstrip("-").isdigit() else list(cue_names).index(cls_text)
            x0, y0, x1, y1 = (int(v) for v in coords.split(","))
        except ValueError:
            raise ManifestError(manifest, lineno, f"malformed box group {group!r}") from None
        box = CueBox(cue, x0, y0, x1, y1)
        if not 0 <= cue < len(cue_names):
            raise ManifestError(manifest, lineno, f"cue class {cue} outside vocabulary of size {len(cue_names)}")
        if not (0 <= x0 < x1 and 0 <= y0 < y1):
            raise ManifestError(manifest, lineno, f"degenerate box {group!r}")
        boxes.append(box)
    return tuple(boxes)


def parse_manifest(text: str, manifest="<manifest>") -> tuple[tuple[str, ...], list[tuple[str, WeatherClass, tuple[CueBox, ...]]]]:
    """Parse manifest text into (cue vocabulary, [(relative path, class, boxes)])."""
    cue_names = DEFAULT_CUES
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            if key.strip() == "cues":
                cue_names = tuple(c.strip() for c in value.split(",") if c.strip())
                if len(cue_names) < 2:
                    raise ManifestError(manifest, lineno, "cue vocabulary needs background plus at least one cue")
            continue
        fields = line.rstrip("\r\n").split("\t")
        if len(fields) < 2 or len(fields) > 3 or not fields[0].strip():
            raise ManifestError(manifest, lineno, f"expected 2 or 3 tab-separated fields, got {len(fields)}")
        try:
            weather = WeatherClass.parse(fields[1])
        except ValueError as err:
            raise ManifestError(manifest, lineno, str(err)) from None
        boxes = _parse_boxes(fields[2], cue_names, manifest, lineno) if len(fields) == 3 else ()
        entries.append((fields[0].strip(), weather, boxes))
    return cue_names, entries


def load_dataset(root_path, manifest) -> DatasetIndex:
    """Read a manifest and check every referenced image exists under ``root_path``."""
    root = Path(root_path)
    manifest = Path(manifest)
    if not manifest.is_file():
        raise FileNotFoundError(f"manifest not found: {manifest}")
    cue_names, entries = parse_manifest(manifest.read_text(encoding="utf-8"), manifest)
    if not entries:
        raise ValueError(f"no records in manifest {manifest}")
    missing = [str(root / rel) for rel, _, _ in entries if not (root / rel).is_file()]
    if missing:
        raise FileNotFoundError(f"{len(missing)} image(s) referenced by {manifest} not found: " + ", ".join(missing))
    records = [Record(root / rel, weather, boxes) for rel, weather, boxes in entries]
    return DatasetIndex.from_records(root, cue_names, records)


def format_manifest(cue_names: Sequence[str], entries: Iterable[tuple[str, "WeatherClass | str", Sequence[CueBox]]]) -> str:
    lines = ["#cues: " + ",".join(cue_names)]
    for rel, weather, boxes in entries:
        fields = [str(rel), WeatherClass.parse(weather).label]
        if boxes:
            fields.append(";".join(f"{b.cue_class}:{b.x0},{b.y0},{b.x1},{b.y1}" for b in boxes))
        lines.append("\t".join(fields))
    return "\n".join(lines) + "\n"


def preprocess_image(raw, target_size: tuple[int, int]) -> torch.Tensor:
    """Convert a decoded image to a 3xHxW float tensor in [-1, 1].

    ``raw`` may be a PIL image, an HxW[xC] uint8 array, or an already
    normalized 3xHxW float tensor (values are then left untouched).
    """
    if isinstance(raw, torch.Tensor) and raw.is_floating_point():
        if raw.ndim != 3 or raw.shape[0] != 3:
            raise ValueError(f"normalized tensors must be 3xHxW, got {tuple(raw.shape)}")
        tensor = raw
    else:
        if isinstance(raw, Image.Image):
            if raw.mode not in ("RGB", "RGBA", "L", "LA"):
                raw = raw.convert("RGB")
            raw = np.asarray(raw)
        arr = np.asarray(raw)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"expected an HxWxC image, got shape {arr.shape}")
        channels = arr.shape[2]
        if channels in (1, 2):
            warnings.warn("grayscale input replicated to 3 channels", stacklevel=2)
            arr = np.repeat(arr[:, :, :1], 3, axis=2)
        elif channels == 4:
            warnings.warn("alpha channel dropped", stacklevel=2)
            arr = arr[:, :, :3]
        elif channels != 3:
            raise ValueError(f"unsupported channel count {channels}")
        if arr.dtype == np.uint8:
            values = arr.astype(np.float32) / 127.5 - 1.0
        else:
            # float input assumed in [0, 1]
            values = arr.astype(np.float32) * 2.0 - 1.0
        tensor = torch.from_numpy(np.ascontiguousarray(values.transpose(2, 0, 1)))

    target_size = tuple(int(s) for s in target_size)
    if tuple(tensor.shape[1:]) != target_size:
        tensor = F.interpolate(
            tensor[None], size=target_size, mode="bilinear", align_corners=False, antialias=True
        )[0].clamp_(-1.0, 1.0)
    return tensor


def _scale_span(lo: int, hi: int, src: int, dst: int) -> tuple[int, int]:
    # Target pixels whose footprint overlaps [lo, hi) in source space.
    return (lo * dst) // src, -((-hi * dst) // src)


def rasterize_cues(
    boxes: Sequence[CueBox],
    source_size: tuple[int, int],
    target_size: tuple[int, int],
    n_s: int = len(DEFAULT_CUES),
) -> torch.Tensor:
    """Paint boxes into a one-hot ``n_s x H x W`` target; later boxes win overlaps."""
    src_h, src_w = source_size
    dst_h, dst_w = target_size
    labels = torch.zeros(dst_h, dst_w, dtype=torch.long)
    for box in boxes:
        box.validate(src_w, src_h, n_s)
        r0, r1 = _scale_span(box.y0, box.y1, src_h, dst_h)
        c0, c1 = _scale_span(box.x0, box.x1, src_w, dst_w)
        labels[r0:r1, c0:c1] = box.cue_class
    return F.one_hot(labels, n_s).permute(2, 0, 1).float()


@dataclass
class Batch:
    x_images: torch.Tensor
    y_images: torch.Tensor
    x_seg_targets: torch.Tensor
    y_seg_targets: torch.Tensor
    x_class: WeatherClass
    y_class: WeatherClass

    def __post_init__(self):
        sizes = {len(self.x_images), len(self.y_images), len(self.x_seg_targets), len(self.y_seg_targets)}
        if len(sizes) != 1:
            raise ValueError(f"batch members disagree in size: {sorted(sizes)}")
        if self.x_class == self.y_class:
            raise ValueError("x and y domains must differ")

    @property
    def size(self) -> int:
        return len(self.x_images)


@functools.lru_cache(maxsize=8192)
def _load_example(path: Path, boxes: tuple[CueBox, ...], size: tuple[int, int], n_s: int):
    with Image.open(path) as img:
        img.load()
        source_size = (img.height, img.width)
        image = preprocess_image(img, size)
    return image, rasterize_cues(boxes, source_size, size, n_s)


def load_example(record: Record, image_size: tuple[int, int], n_s: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Preprocessed image and cue target for one record (cached, do not mutate)."""
    return _load_example(record.path, record.boxes, tuple(image_size), n_s)


def sample_unpaired_batch(
    index: DatasetIndex,
    domain_x,
    domain_y,
    batch_size: int,
    seed: int,
    image_size: tuple[int, int] = (300, 300),
) -> Batch:
    """Draw independent with-replacement samples from two domains."""
    domain_x, domain_y = WeatherClass.parse(domain_x), WeatherClass.parse(domain_y)
    if domain_x == domain_y:
        raise ValueError(f"domain_x and domain_y are both {domain_x.label}")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    pools = []
    for dom in (domain_x, domain_y):
        ids = index.by_class.get(dom, ())
        if not ids:
            raise ValueError(f"domain {dom.label} has no images in the dataset")
        pools.append(ids)

    rng = np.random.default_rng(seed)
    picks = [rng.integers(0, len(pool), size=batch_size) for pool in pools]
    stacks = []
    for pool, pick in zip(pools, picks):
        examples = [load_example(index.records[pool[k]], image_size, index.n_s) for k in pick]
        stacks.append((torch.stack([e[0] for e in examples]), torch.stack([e[1] for e in examples])))
    (xi, xs), (yi, ys) = stacks
    return Batch(xi, yi, xs, ys, domain_x, domain_y)


def scan_image_tree(root) -> list[tuple[str, WeatherClass]]:
    """List ``root/<class_name>/**/<image>`` files as sorted (relative path, class)."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    entries = []
    for cls in WeatherClass:
        class_dir = root / cls.label
        if not class_dir.is_dir():
            continue
        for path in sorted(class_dir.rglob("*")):
            if path.is_file() and path.suffix.lower() in IMAGE_EXTENSIONS:
                entries.append((path.relative_to(root).as_posix(), cls))
    return entries
