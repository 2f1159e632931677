"""Causal Transformer speech enhancement with MetricGAN fine-tuning, in NumPy."""

from .discriminator import Discriminator, DiscriminatorConfig
from .dsp import FrameParams, Spectrogram, istft, stft
from .generator import Generator, GeneratorConfig, generator_forward, stream_enhance
from .metrics import QSNR, get_metric, q_snr
from .training import TrainConfig, metricgan_finetune, pretrain

__version__ = "0.1.0"
