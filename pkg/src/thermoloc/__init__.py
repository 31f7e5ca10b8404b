"""Absolute pose regression from single thermal images."""

from thermoloc.config import BackboneConfig, MBConvSpec, StageSpec, TrainConfig
from thermoloc.preproc import PreprocessConfig, preprocess
from thermoloc.quaternion import Pose

__all__ = [
    "BackboneConfig",
    "MBConvSpec",
    "Pose",
    "PreprocessConfig",
    "StageSpec",
    "TrainConfig",
    "preprocess",
]
__version__ = "0.1.0"
