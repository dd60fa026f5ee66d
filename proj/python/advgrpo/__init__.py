"""Adversarially robust SFT + GRPO on a synthetic structured-output VQA task."""

from ._core import *  # noqa: F401,F403
from ._core import ConfigError, Error, IoError, TrainingDiverged  # noqa: F401

__version__ = "0.1.0"
