"""Single-codebook speech codec: 24 kHz audio to 23.4375 tokens/s and back."""

from .audio import SAMPLE_RATE, AudioBuffer, load_audio, save_wav
from .bitstream import TokenStream, bandwidth, pack, read_hhc, unpack, write_hhc
from .codec import decode_tokens, encode_file, export_lm_corpus, load_model
from .config import RunConfig, build_config, load_config
from .errors import (BitstreamError, ConfigError, DataError, HHCError, MetricError,
                     TrainingDivergence)
from .estimator import HHCodec, QuantizedAutoencoder
from .model import CodecModel
from .trainer import LossReport, LossWeights, Trainer, TrainState

__version__ = "0.1.0"
