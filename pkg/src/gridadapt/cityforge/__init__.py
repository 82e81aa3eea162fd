"""Synthetic two-city benchmark generator and dataset access."""

from .generator import (
    CLASSES,
    CLASSES_13,
    STATIC_CLASSES,
    STATIC_CLASSES_13,
    STATIC_CLASSES_FULL,
    SceneSample,
    SceneSpec,
    emit_dataset,
    generate_pair,
    generate_scene,
)
from .dataset import LabelAccessError, SceneDataset, UnlabeledView, images_to_batch
from .netpbm import read_pgm, read_ppm, write_pgm, write_ppm

__all__ = [
    "CLASSES", "CLASSES_13", "STATIC_CLASSES", "STATIC_CLASSES_13", "STATIC_CLASSES_FULL",
    "SceneSample", "SceneSpec", "emit_dataset", "generate_pair", "generate_scene",
    "LabelAccessError", "SceneDataset", "UnlabeledView", "images_to_batch",
    "read_pgm", "read_ppm", "write_pgm", "write_ppm",
]
