"""Stratified SIFT matching for localized iris images."""

from .core import (
    DetectorParams,
    IrisImage,
    Keypoint,
    KeypointSet,
    MatchPair,
    MatchSet,
    PipelineConfig,
    load_config,
    load_image,
)
from .sift import detect

__version__ = "0.1.0"

__all__ = [
    "DetectorParams",
    "IrisImage",
    "Keypoint",
    "KeypointSet",
    "MatchPair",
    "MatchSet",
    "PipelineConfig",
    "detect",
    "load_config",
    "load_image",
]
