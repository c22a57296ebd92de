"""Nested all-in-one compression and quantization of conformer speech encoders."""

from .autograd import Tensor, finite_diff, gradients, no_grad, stop_gradient
from .config import ConfigError, RunConfig
from .data import ToyCorpus, batch, generate_corpus
from .encoder import EncoderConfig, MaskPolicy, SpecError, SubnetSpec, encoder_forward, param_inventory, width_mask
from .estimator import NestedCTCRecognizer
from .evaluation import build_report, greedy_ctc_decode, mapsswe, token_error_rate
from .losses import LossWeights, allinone_loss, ctc_loss, default_loss_weights, kl_regularizer
from .quant import IntTensor, export_int, fake_quantize
from .supernet import ExtractedModel, Grid, SupernetModel, compression_ratio, enumerate_grid, extract, param_count
from .trainer import AdamW, TrainConfig, Trainer, lr_at_step, sample_training_set

__version__ = "0.1.0"
