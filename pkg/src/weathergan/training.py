"""Alternating discriminator / generator optimisation for one domain pair."""

from __future__ import annotations

import configparser
import copy
import io
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .dataset import DEFAULT_CUES, Batch, DatasetIndex, WeatherClass, sample_unpaired_batch
from .discriminator import DiscriminatorConfig, PatchDiscriminator
from .fileio import atomic_write_bytes, atomic_write_text
from .generator import COMPOSITION_FORMULAS, COMPOSITIONS, GeneratorConfig, WeatherGenerator, relevant_cues_for_pair
from .losses import (
    LossWeights,
    NonFiniteLossError,
    adversarial_loss_d,
    adversarial_loss_g,
    classification_loss,
    cycle_l1,
    cycle_total,
    perceptual_loss,
    seg_loss,
    total_generator_loss,
)
from .perceptual import build_perceptual

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"WGAN-CKPT v1\n"


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    domain_x: WeatherClass = WeatherClass.SUNNY
    domain_y: WeatherClass = WeatherClass.CLOUDY
    total_iterations: int = 10000
    decay_start: int = 1000
    lr0: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    seed: int = 0
    image_size: tuple[int, int] = (300, 300)
    checkpoint_every: int = 1000
    log_every: int = 1
    ablation: str = "full"
    loss_weights: LossWeights = field(default_factory=LossWeights)
    # generator architecture
    gen_base_channels: int = 64
    gen_residual_blocks: int = 6
    gen_n_down: int = 3
    gen_norm: str = "instance"
    gen_shared_encoder: bool = True
    relevant_cues: tuple[str, ...] | None = None
    # discriminator architecture
    disc_base_channels: int = 64
    disc_layers: int = 4
    # perceptual extractor
    perceptual: str = "vgg19"
    perceptual_layers: tuple[str, ...] = ("relu3_1",)
    perceptual_weights: str | None = None
    # locations
    data_root: str | None = None
    manifest: str | None = None
    output_dir: str = "runs/weathergan"

    def __post_init__(self):
        self.domain_x = WeatherClass.parse(self.domain_x)
        self.domain_y = WeatherClass.parse(self.domain_y)
        self.image_size = tuple(int(s) for s in self.image_size)
        self.perceptual_layers = tuple(self.perceptual_layers)
        if self.relevant_cues is not None:
            self.relevant_cues = tuple(self.relevant_cues)
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if self.domain_x == self.domain_y:
            raise ConfigError("domain_x and domain_y must differ")
        if not 0 <= self.decay_start < self.total_iterations:
            raise ConfigError(
                f"need 0 <= decay_start < total_iterations, got {self.decay_start} and {self.total_iterations}"
            )
        if not self.lr0 > 0:
            raise ConfigError("lr0 must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ConfigError("checkpoint_every and log_every must be >= 1")
        if self.ablation not in COMPOSITIONS:
            raise ConfigError(f"ablation must be one of {COMPOSITIONS}, got {self.ablation!r}")

    @property
    def lambda_cycle_blend(self) -> float:
        return self.loss_weights.lambda_cycle_blend

    def generator_config(self, cue_names=DEFAULT_CUES) -> GeneratorConfig:
        if self.relevant_cues is None:
            cues = relevant_cues_for_pair(self.domain_x, self.domain_y, cue_names)
        else:
            missing = [c for c in self.relevant_cues if c not in cue_names]
            if missing:
                raise ConfigError(f"relevant cues {missing} not in vocabulary {list(cue_names)}")
            cues = tuple(cue_names.index(c) for c in self.relevant_cues)
        return GeneratorConfig(
            base_channels=self.gen_base_channels,
            n_residual_blocks=self.gen_residual_blocks,
            n_down=self.gen_n_down,
            n_s=len(cue_names),
            relevant_cues=cues,
            norm=self.gen_norm,
            shared_encoder=self.gen_shared_encoder,
            composition=self.ablation,
            image_size=self.image_size,
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(self.disc_base_channels, self.disc_layers, self.image_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domain_x"] = self.domain_x.label
        d["domain_y"] = self.domain_y.label
        d["image_size"] = list(self.image_size)
        d["perceptual_layers"] = list(self.perceptual_layers)
        if self.relevant_cues is not None:
            d["relevant_cues"] = list(self.relevant_cues)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


# INI layout: section -> {key: attribute}
_CONFIG_KEYS = {
    "train": {
        "domain_x": "domain_x", "domain_y": "domain_y", "total_iterations": "total_iterations",
        "decay_start": "decay_start", "lr0": "lr0", "beta1": "beta1", "beta2": "beta2",
        "batch_size": "batch_size", "seed": "seed", "image_size": "image_size",
        "checkpoint_every": "checkpoint_every", "log_every": "log_every", "ablation": "ablation",
    },
    "data": {"root": "data_root", "manifest": "manifest"},
    "output": {"dir": "output_dir"},
    "generator": {
        "base_channels": "gen_base_channels", "n_residual_blocks": "gen_residual_blocks",
        "n_down": "gen_n_down", "norm": "gen_norm", "shared_encoder": "gen_shared_encoder",
        "relevant_cues": "relevant_cues",
    },
    "discriminator": {"base_channels": "disc_base_channels", "n_layers": "disc_layers"},
    "losses": {f.name: f.name for f in fields(LossWeights)},
    "perceptual": {"kind": "perceptual", "layers": "perceptual_layers", "weights": "perceptual_weights"},
}

_INT_ATTRS = {"total_iterations", "decay_start", "batch_size", "seed", "checkpoint_every", "log_every",
              "gen_base_channels", "gen_residual_blocks", "gen_n_down", "disc_base_channels", "disc_layers"}
_FLOAT_ATTRS = {"lr0", "beta1", "beta2"}


def _parse_size(text: str) -> tuple[int, int]:
    parts = [p for p in text.replace("x", ",").split(",") if p.strip()]
    if len(parts) == 1:
        parts = parts * 2
    return tuple(int(p) for p in parts)


def parse_config(text: str, base_dir=None) -> TrainConfig:
    """Build a TrainConfig from INI text; relative paths resolve against ``base_dir``."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as err:
        raise ConfigError(f"cannot parse config: {err}") from None
    kwargs, weights = {}, {}
    for section in parser.sections():
        if section not in _CONFIG_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            attr = _CONFIG_KEYS[section].get(key)
            if attr is None:
                raise ConfigError(f"unknown config key '{section}.{key}'")
            raw = raw.strip()
            try:
                if section == "losses":
                    weights[attr] = float(raw)
                    continue
                if attr in _INT_ATTRS:
                    value = int(raw)
                elif attr in _FLOAT_ATTRS:
                    value = float(raw)
                elif attr == "image_size":
                    value = _parse_size(raw)
                elif attr == "gen_shared_encoder":
                    value = parser.getboolean(section, key)
                elif attr in ("relevant_cues", "perceptual_layers"):
                    value = tuple(v.strip() for v in raw.split(",") if v.strip())
                elif attr in ("data_root", "manifest", "output_dir", "perceptual_weights"):
                    value = raw
                    if base_dir is not None and not Path(raw).is_absolute():
                        value = str(Path(base_dir) / raw)
                else:
                    value = raw
            except ValueError as err:
                raise ConfigError(f"bad value for '{section}.{key}': {err}") from None
            kwargs[attr] = value
    try:
        if weights:
            kwargs["loss_weights"] = LossWeights(**weights)
        return TrainConfig(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as err:
        raise ConfigError(str(err)) from None


def load_config(path) -> TrainConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)


def format_config(cfg: TrainConfig) -> str:
    """Inverse of ``parse_config`` (paths are written as stored)."""
    d = cfg.to_dict()
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, keys in _CONFIG_KEYS.items():
        parser.add_section(section)
        for key, attr in keys.items():
            value = d["loss_weights"][attr] if section == "losses" else d[attr]
            if value is None:
                continue
            if isinstance(value, (list, tuple)):
                value = ",".join(str(v) for v in value)
            parser.set(section, key, str(value))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def lr_schedule(iteration: int, config: TrainConfig) -> float:
    """Constant ``lr0`` up to ``decay_start``, then linear decay to 0 at ``total_iterations``."""
    if not 0 <= iteration <= config.total_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {config.total_iterations}]")
    if iteration <= config.decay_start:
        return config.lr0
    span = config.total_iterations - config.decay_start
    return config.lr0 * (1.0 - (iteration - config.decay_start) / span)


@dataclass
class StepReport:
    iteration: int
    losses: dict[str, float]
    lr: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps({"iteration": self.iteration, "lr": self.lr, "wall_time": self.wall_time, **self.losses})

    def deterministic_view(self) -> dict:
        return {"iteration": self.iteration, "lr": self.lr, **self.losses}


def _set_lr(optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


class WeatherGANTrainer:
    """Owns G (X->Y), F (Y->X), the two discriminators, and both optimisers."""

    def __init__(self, config: TrainConfig, cue_names=DEFAULT_CUES):
        self.config = config
        self.cue_names = tuple(cue_names)
        torch.manual_seed(config.seed)
        gcfg = config.generator_config(self.cue_names)
        dcfg = config.discriminator_config()
        self.G = WeatherGenerator(gcfg)
        self.F = WeatherGenerator(copy.deepcopy(gcfg))
        self.D_X = PatchDiscriminator(dcfg)
        self.D_Y = PatchDiscriminator(copy.deepcopy(dcfg))
        self.phi = build_perceptual(
            config.perceptual, config.perceptual_layers, config.perceptual_weights, seed=config.seed
        )
        betas = (config.beta1, config.beta2)
        self.opt_g = torch.optim.Adam(itertools.chain(self.G.parameters(), self.F.parameters()), config.lr0, betas)
        self.opt_d = torch.optim.Adam(itertools.chain(self.D_X.parameters(), self.D_Y.parameters()), config.lr0, betas)
        self.iteration = 0

    @property
    def models(self) -> dict[str, torch.nn.Module]:
        return {"G": self.G, "F": self.F, "D_X": self.D_X, "D_Y": self.D_Y}

    @property
    def composition_description(self) -> str:
        return COMPOSITION_FORMULAS[self.config.ablation]

    @property
    def uses_segmentation(self) -> bool:
        return self.config.ablation in ("full", "segmentation_only")

    def batch_seed(self, iteration: int) -> int:
        return int(np.random.SeedSequence([self.config.seed, iteration]).generate_state(1)[0])

    def sample_batch(self, index: DatasetIndex) -> Batch:
        cfg = self.config
        return sample_unpaired_batch(
            index, cfg.domain_x, cfg.domain_y, cfg.batch_size, self.batch_seed(self.iteration), cfg.image_size
        )

    def _discriminators_trainable(self, flag: bool) -> None:
        for d in (self.D_X, self.D_Y):
            d.requires_grad_(flag)

    def train_step(self, batch: Batch) -> StepReport:
        """One discriminator update followed by one joint update of G and F."""
        cfg, w = self.config, self.config.loss_weights
        if (batch.x_class, batch.y_class) != (cfg.domain_x, cfg.domain_y):
            raise ValueError(
                f"batch domains {batch.x_class.label}->{batch.y_class.label} do not match "
                f"config {cfg.domain_x.label}->{cfg.domain_y.label}"
            )
        start = time.perf_counter()
        lr = lr_schedule(self.iteration, cfg)
        _set_lr(self.opt_g, lr)
        _set_lr(self.opt_d, lr)
        for m in self.models.values():
            m.train()

        x, y = batch.x_images, batch.y_images
        n = len(x)
        cx, cy = int(batch.x_class), int(batch.y_class)
        out_g = self.G(x)
        out_f = self.F(y)
        fake_y, fake_x = out_g.g, out_f.g

        # discriminator half-step; class heads learn from real images of both domains
        d_backup = (copy.deepcopy(self.D_X.state_dict()), copy.deepcopy(self.D_Y.state_dict()),
                    copy.deepcopy(self.opt_d.state_dict()))
        self.opt_d.zero_grad(set_to_none=True)
        both_labels_y = torch.cat([torch.full((n,), cy), torch.full((n,), cx)])
        both_labels_x = torch.cat([torch.full((n,), cx), torch.full((n,), cy)])
        real_y_logit, cls_y = self.D_Y(torch.cat([y, x]))
        real_x_logit, cls_x = self.D_X(torch.cat([x, y]))
        fake_y_logit, _ = self.D_Y(fake_y.detach())
        fake_x_logit, _ = self.D_X(fake_x.detach())
        d_adv = adversarial_loss_d(real_y_logit[:n], fake_y_logit) + adversarial_loss_d(real_x_logit[:n], fake_x_logit)
        d_class = F.cross_entropy(cls_y, both_labels_y) + F.cross_entropy(cls_x, both_labels_x)
        d_total = w.w_adv * d_adv + w.w_class * d_class
        for name, value in (("d_adv", d_adv), ("d_class", d_class)):
            if not torch.isfinite(value):
                raise NonFiniteLossError(name, float(value))
        d_total.backward()
        self.opt_d.step()

        # generator half-step with frozen discriminators
        self._discriminators_trainable(False)
        try:
            self.opt_g.zero_grad(set_to_none=True)
            rec_x = self.F(fake_y).g
            rec_y = self.G(fake_x).g
            dy_fake, cls_fake_y = self.D_Y(fake_y)
            dx_fake, cls_fake_x = self.D_X(fake_x)
            adv_xy = adversarial_loss_g(dy_fake)
            adv_yx = adversarial_loss_g(dx_fake)
            classify = classification_loss(cls_fake_y, cy, cls_fake_x, cx)
            l1 = cycle_l1(x, rec_x, y, rec_y)
            perc = perceptual_loss(self.phi, x, rec_x, y, rec_y)
            cycle = cycle_total(l1, perc, w.lambda_cycle_blend)
            seg_x = seg_y = None
            if self.uses_segmentation:
                seg_x = seg_loss(out_g.seg, batch.x_seg_targets)
                seg_y = seg_loss(out_f.seg, batch.y_seg_targets)
            g_total = total_generator_loss(adv_xy, adv_yx, cycle, classify, seg_x, seg_y, w)
        except NonFiniteLossError:
            self.D_X.load_state_dict(d_backup[0])
            self.D_Y.load_state_dict(d_backup[1])
            self.opt_d.load_state_dict(d_backup[2])
            self._discriminators_trainable(True)
            raise
        g_total.backward()
        self.opt_g.step()
        self._discriminators_trainable(True)

        losses = {
            "d_adv": d_adv, "d_class": d_class, "d_total": d_total,
            "g_adv_xy": adv_xy, "g_adv_yx": adv_yx, "classify": classify,
            "cycle_l1": l1, "cycle_perceptual": perc, "cycle": cycle, "g_total": g_total,
        }
        if seg_x is not None:
            losses["seg_x"], losses["seg_y"] = seg_x, seg_y
        losses = {k: float(v.detach()) for k, v in losses.items()}
        losses["t_mean"] = float(out_g.t.detach().mean())
        report = StepReport(self.iteration, losses, lr, time.perf_counter() - start)
        self.iteration += 1
        return report

    # -- checkpoints ---------------------------------------------------------

    def state_dict(self) -> dict:
        params = {}
        for name, model in self.models.items():
            for key, value in model.state_dict().items():
                params[f"{name}/{key}"] = value
        return {
            "iteration": self.iteration,
            "config": self.config.to_dict(),
            "cue_names": list(self.cue_names),
            "params": params,
            "optim": {"G": self.opt_g.state_dict(), "D": self.opt_d.state_dict()},
            "rng": {"torch": torch.get_rng_state()},
        }

    def load_state_dict(self, state: dict) -> None:
        for name, model in self.models.items():
            prefix = f"{name}/"
            model.load_state_dict({k[len(prefix):]: v for k, v in state["params"].items() if k.startswith(prefix)})
        self.opt_g.load_state_dict(state["optim"]["G"])
        self.opt_d.load_state_dict(state["optim"]["D"])
        torch.set_rng_state(state["rng"]["torch"])
        self.iteration = int(state["iteration"])

    def save_checkpoint(self, path) -> Path:
        buf = io.BytesIO()
        buf.write(CHECKPOINT_MAGIC)
        torch.save(self.state_dict(), buf)
        return atomic_write_bytes(path, buf.getvalue())

    @classmethod
    def from_checkpoint(cls, path) -> "WeatherGANTrainer":
        state = read_checkpoint(path)
        trainer = cls(TrainConfig.from_dict(state["config"]), state["cue_names"])
        trainer.load_state_dict(state)
        return trainer


def read_checkpoint(path) -> dict:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a WGAN-CKPT v1 checkpoint")
    return torch.load(io.BytesIO(data[len(CHECKPOINT_MAGIC):]), map_location="cpu", weights_only=True)


def train(
    config: TrainConfig,
    dataset: DatasetIndex,
    output_dir=None,
    resume=None,
    on_step: Callable[[StepReport], None] | None = None,
) -> tuple[WeatherGANTrainer, list[StepReport]]:
    """Run (or resume) training to ``config.total_iterations``.

    Writes ``steps.jsonl`` (one record per step), periodic
    ``ckpt_<iteration>.ckpt`` files and ``final.ckpt`` under ``output_dir``.
    """
    for dom in (config.domain_x, config.domain_y):
        if not dataset.by_class.get(dom):
            raise ValueError(f"dataset has no images of class {dom.label}")
    out = Path(output_dir or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        trainer = WeatherGANTrainer.from_checkpoint(resume)
        if trainer.config.to_dict() != config.to_dict():
            log.warning("config differs from the one stored in %s; using the checkpoint's", resume)
        config = trainer.config
    else:
        trainer = WeatherGANTrainer(config, dataset.cue_names)
    log.info("%s -> %s, composition: %s", config.domain_x.label, config.domain_y.label, trainer.composition_description)

    log_path = out / "steps.jsonl"
    kept = []
    if log_path.exists() and resume is not None:
        kept = [line for line in log_path.read_text().splitlines()
                if line.strip() and json.loads(line)["iteration"] < trainer.iteration]
    atomic_write_text(log_path, "".join(line + "\n" for line in kept))
    atomic_write_text(out / "run.json", json.dumps(
        {"composition": trainer.composition_description, "config": config.to_dict()}, indent=2))

    reports = []
    with open(log_path, "a", encoding="utf-8") as fh:
        while trainer.iteration < config.total_iterations:
            batch = trainer.sample_batch(dataset)
            try:
                report = trainer.train_step(batch)
            except NonFiniteLossError:
                trainer.save_checkpoint(out / "pre_failure.ckpt")
                raise
            reports.append(report)
            fh.write(report.to_json() + "\n")
            fh.flush()
            if on_step is not None:
                on_step(report)
            if trainer.iteration % config.checkpoint_every == 0 and trainer.iteration < config.total_iterations:
                trainer.save_checkpoint(out / f"ckpt_{trainer.iteration:07d}.ckpt")
    trainer.save_checkpoint(out / "final.ckpt")
    return trainer, reports
