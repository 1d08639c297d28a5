"""Anchored speech recognition with a neural transducer on synthetic mixtures.

The package is self-contained on numpy: a small reverse-mode autodiff core,
a recurrent transducer with the full-lattice marginal loss, anchor-derived
context biasing and gating, auxiliary context objectives, a deterministic
mixture simulator, anchor-mean baselines, and WER/WERR reporting.
"""

from . import autodiff
from .anchoring import AnchorSpec, SubsegmentConfig, anchored_forward
from .autodiff import Tape, Tensor, backward, finite_difference_check
from .config import ExperimentConfig, config_from_dict, config_to_dict, load_config, save_config
from .mixsim import MixerConfig, MixtureSpec, ToyCorpus, ToyCorpusConfig, mix, synth_corpus
from .objectives import LossWeights, vic_loss
from .scoring import ConditionReport, edit_distance, werr
from .system import System
from .training import train
from .transducer import (BLANK, FeatureSequence, ModelConfig, TransducerModel,
                         greedy_decode, rnnt_loss, rnnt_loss_bruteforce)

__version__ = "0.1.0"

__all__ = [
    "AnchorSpec", "BLANK", "ConditionReport", "ExperimentConfig", "FeatureSequence",
    "LossWeights", "MixerConfig", "MixtureSpec", "ModelConfig", "SubsegmentConfig",
    "System", "Tape", "Tensor", "ToyCorpus", "ToyCorpusConfig", "TransducerModel",
    "anchored_forward", "autodiff", "backward", "config_from_dict", "config_to_dict",
    "edit_distance", "finite_difference_check", "greedy_decode", "load_config",
    "mix", "rnnt_loss", "rnnt_loss_bruteforce", "save_config", "synth_corpus",
    "train", "vic_loss", "werr",
]
