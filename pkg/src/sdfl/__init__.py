"""sdfl: raw-waveform speech denoising trained with a deep feature loss.

A from-first-principles numpy toolkit: a minimal reverse-mode autodiff core,
a dilated-convolution denoising network, a decimating audio classification
network that doubles as a perceptually-motivated training loss, training
loops, corpus tooling (WAV I/O, SNR mixing, a synthetic generator), and an
SNR/tranche evaluation harness.
"""

from .audio import SAMPLE_RATE, AudioError, Waveform, read_wav, stereo_split, write_wav
from .corpus import (CROP_MIN_LEN, Manifest, Record, SynthSpec, fit_noise,
                     mix_at_snr, peak_normalize_pair, random_crop, synth_corpus)
from .denoiser import DenoiserConfig, DenoiserParams, denoiser_forward, denoiser_init
from .evaluate import (SNR_CAP_DB, Report, ScoreRecord, evaluate_corpus,
                       partition_octiles, snr_metric)
from .featnet import (FeatureNetConfig, FeatureNetParams, LossWeights, TaskSpec,
                      calibrate_lambda, classify, feature_forward, feature_loss,
                      feature_terms, featnet_init, task_logits)
from .ndgrad import (Adam, BatchNormState, Tensor, adaptive_norm, as_tensor,
                     avg_pool_time, batch_norm, classify_loss, conv1d_dilated,
                     decimate2, derive_rng, l1_loss, l2_loss, linear, lrelu,
                     make_rng, parameter, weighted_sum, xavier_init)
from .trainer import (ClassifierFile, ClassifierTask, DenoisePair, TrainConfig,
                      epoch_schedule, train_classifier, train_denoiser)

__version__ = "0.1.0"
