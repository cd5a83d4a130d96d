"""Narration-driven gaze trajectory prediction with a learned dynamical system.

Submodules: ``diffcore`` (autodiff), ``data`` (scene bundles), ``encoder``
(word encoder and patch attention), ``dynamics`` (gaze rollout), ``density``
(KDE scoring and losses), ``metrics``, ``training``, ``synthetic``, ``cli``.
"""

from .data import Dataset, SceneBundle, load_bundle, load_dataset, save_bundle
from .model import ModelConfig, ModelParams
from .synthetic import SynthConfig, generate
from .training import Checkpoint, TrainConfig, Trainer, evaluate, train_two_stage

__version__ = "0.1.0"
