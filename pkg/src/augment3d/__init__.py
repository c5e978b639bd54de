"""Deterministic 3D volume augmentation and a numpy 3D CNN training harness."""

__version__ = "0.1.0"

from .volume import Volume3, read_nifti, write_nifti, minmax
from .rng import RngStream
from .augment import (
    Brightness,
    Compose,
    Elastic,
    FlipX,
    NoAugment,
    Rotate,
    Scale,
    apply_pipeline,
    draw,
    spec_from_dict,
)
from .nn import Model, ModelConfig, param_count
