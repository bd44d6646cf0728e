"""Sampling-rate aware non-intrusive MOS prediction."""

from .data import PredictionSet, UtteranceRecord, Waveform, kfold_split, load_manifest, load_waveform
from .features import FeatureBundle, FeatureConfig, FeatureExtractor
from .losses import LossConfig
from .metrics import MetricReport, full_report
from .model import Checkpoint, ModelConfig, ScoreModel
from .training import TrainConfig, cross_validate, predict, train

__version__ = "0.1.0"
