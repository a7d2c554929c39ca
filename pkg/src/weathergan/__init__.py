"""Multi-domain weather translation with attention and weather-cue guided GANs."""

__version__ = "0.1.0"

from .dataset import Batch, CueBox, DatasetIndex, WeatherClass, load_dataset, preprocess_image, rasterize_cues, sample_unpaired_batch
from .discriminator import DiscriminatorConfig, PatchDiscriminator
from .generator import GeneratorConfig, GeneratorOutput, WeatherGenerator, compose, translation_map
from .losses import LossWeights
from .metrics import MetricReport, fid, kid, matrix_sqrt_psd
from .training import TrainConfig, WeatherGANTrainer, lr_schedule, train
